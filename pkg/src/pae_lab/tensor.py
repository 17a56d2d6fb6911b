"""Dense tensors with reverse-mode automatic differentiation.

Storage is float32; reductions and the finite-difference oracle accumulate
in float64. The tape is rebuilt on every forward pass (define-by-run): ops
record themselves on the ambient tape only when an input requires grad, so
frozen-parameter subgraphs cost nothing at backward time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import (
    ContractError,
    DegenerateBatchError,
    IndexError_,
    OracleError,
    PoisonedGradientError,
    ShapeError,
)

_TAPE_STACK: list["Tape"] = []

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tape:
    """Ordered record of one forward pass. Context manager activates it."""

    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.nodes.append((out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """n-d array of reals plus an optional handle into the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = None  # index of the producing tape node, None for leaves

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def has_bad_values(self) -> bool:
        return not np.isfinite(self.data).all()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience operators; the real work lives in the op functions
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _lift(x, dtype) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _make(out_data, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when gradients are needed."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        out.node = len(tape.nodes)
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return _make(a.data * s, (a,), bwd)


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bwd)


def slice_axis1(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim < 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"bad slice [{start}:{stop}] for shape {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)
    shp = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shp).astype(a.dtype, copy=False),)

    return _make(out.astype(a.dtype), (a,), bwd)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    # x*x*x, not x**3: integer-exponent pow takes the slow libm path
    u = _GELU_C * (xd + _GELU_A * (xd * xd * xd))
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * (xd * xd))
        dydx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return ((g * dydx).astype(x.dtype, copy=False),)

    return _make(out.astype(x.dtype, copy=False), (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must be [{d}], got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    # arithmetic in the input dtype, reductions accumulated in float64
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dgain = (g * xhat).reshape(-1, d).sum(axis=0, dtype=np.float64)
        dbias = g.reshape(-1, d).sum(axis=0, dtype=np.float64)
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (
            dx.astype(x.dtype, copy=False),
            dgain.astype(gain.dtype, copy=False),
            dbias.astype(bias.dtype, copy=False),
        )

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), bwd)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    xd = x.data.astype(np.float64)
    inv = 1.0 / np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + eps)
    y = xd * inv

    def bwd(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=-1, keepdims=True)
        dx = inv * (g64 - y * dot)
        return (dx.astype(x.dtype, copy=False),)

    return _make(y.astype(x.dtype, copy=False), (x,), bwd)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]x[k,n], got {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading dims: [...,m,k] @ [...,k,n]."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"bmm needs stacked matrices, got {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _make(ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------

def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = int(ids.reshape(-1)[np.argmax((ids < 0) | (ids >= v))])
        raise IndexError_(f"token id {bad} outside table of size {v}")

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _make(table.data[ids], (table,), bwd)


def slot_scatter(base: Tensor, ins: Tensor, positions: np.ndarray) -> Tensor:
    """Replace rows of [B,L,d] `base` at per-example `positions` [B,S] with `ins` [B,S,d]."""
    positions = np.asarray(positions)
    bsz, seq_len, dim = base.shape
    if ins.shape[:2] != positions.shape or ins.shape[2] != dim:
        raise ContractError(
            f"slot count mismatch: inserts {ins.shape}, positions {positions.shape}"
        )
    if positions.size:
        if positions.min() < 0 or positions.max() >= seq_len:
            raise ContractError("slot position outside sequence")
        if positions.shape[1] > 1 and not (np.diff(positions, axis=1) > 0).all():
            raise ContractError("slot positions must be strictly increasing per row")
    bidx = np.arange(bsz)[:, None]
    out = base.data.copy()
    out[bidx, positions] = ins.data

    def bwd(g):
        dbase = g.copy()
        dbase[bidx, positions] = 0.0
        dins = g[bidx, positions]
        return dbase, dins

    return _make(out, (base, ins), bwd)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def masked_softmax(scores: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis with boolean `mask` (True = position allowed)."""
    xd = scores.data
    fill = xd.dtype.type(-1e30)
    x = xd.copy() if mask is None else np.where(mask, xd, fill)
    x -= x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    p = e / denom

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
        ds = p * (g - dot)
        return (ds.astype(scores.dtype, copy=False),)

    return _make(p.astype(scores.dtype, copy=False), (scores,), bwd)


def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    loss_mask: np.ndarray,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean negative log-softmax over masked positions, max-subtraction stabilized.

    `weights`, when given, replaces the uniform 1/n_masked weighting (used for
    per-example averaging); it must already be zero outside the mask.
    """
    n, v = logits.shape
    targets = np.asarray(targets).reshape(-1)
    loss_mask = np.asarray(loss_mask, dtype=bool).reshape(-1)
    if targets.shape[0] != n or loss_mask.shape[0] != n:
        raise ShapeError(f"targets/mask length must be {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError_(f"target id outside vocabulary of size {v}")
    if not loss_mask.any():
        raise DegenerateBatchError("all positions masked out of the loss")

    z = logits.data.astype(np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    if weights is None:
        w = loss_mask.astype(np.float64) / float(loss_mask.sum())
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    per = -logp[np.arange(n), targets]
    loss = float((per * w).sum())

    def bwd(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        p = ez / sez
        p[np.arange(n), targets] -= 1.0
        dl = p * (w * gs)[:, None]
        return (dl.astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over `tape`; returns {id(leaf tensor): grad} and fills .grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward")
    tape.consumed = True

    loss.grad = np.ones_like(loss.data)
    leaf_grads: dict[int, np.ndarray] = {}
    for out, inputs, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = g.astype(inp.dtype, copy=True)
            else:
                inp.grad += g
            if inp.node is None:
                leaf_grads[id(inp)] = inp.grad
        if out.node is not None:
            out.grad = None  # free non-leaf intermediate
    tape.nodes.clear()
    return leaf_grads


# ---------------------------------------------------------------------------
# optimizer + schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """AdamW accumulators; moment shapes mirror parameter shapes."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update over `params` (in place)."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"missing gradient for parameter {name!r}")
        if not np.isfinite(p.grad).all():
            raise PoisonedGradientError(f"non-finite gradient in {name!r}; step refused")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * state.weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None  # consumed; next backward starts a fresh accumulation


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all present grads so their joint L2 norm is at most `max_norm`.

    Returns the pre-clip norm. `max_norm=0` disables clipping; rare one-batch
    gradient spikes otherwise poison the Adam moments for the rest of a run.
    """
    if max_norm < 0:
        raise ContractError(f"max_norm must be >= 0, got {max_norm}")
    total = 0.0
    grads = [p.grad for p in params.values() if p.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def cosine_lr(step: int, warmup: int, total: int, base: float, floor: float = 0.0) -> float:
    """Linear warmup 0->base, cosine decay base->floor at step==total, floor after."""
    if warmup >= total:
        raise ContractError(f"warmup ({warmup}) must be < total ({total})")
    if step >= total:
        return floor
    if step < warmup:
        return base * step / warmup
    frac = (step - warmup) / (total - warmup)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: list[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between analytic grads of `f` and central differences.

    Runs in float64 end to end; relies on ops following their input dtype.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ContractError(f"eps {eps} outside [1e-5, 1e-2]")
    xs = [Tensor(t.data, requires_grad=True, dtype=np.float64) for t in inputs]

    def value() -> float:
        out = f(*xs)
        if out.data.size != 1:
            raise ContractError("grad_check needs a scalar-valued f")
        return float(out.data.reshape(-1)[0])

    first, second = value(), value()
    if not (math.isfinite(first) and math.isfinite(second)):
        raise OracleError("f produced a non-finite value")
    if first != second:
        raise OracleError("f is not deterministic (double evaluation mismatch)")

    with Tape() as tape:
        loss = f(*xs)
    backward(tape, loss)

    worst = 0.0
    for x in xs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
