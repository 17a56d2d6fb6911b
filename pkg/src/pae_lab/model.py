"""Tiny vision-language model.

Patch-embedding ViT encoder, one affine connector, and a pre-norm causal
decoder whose output head is tied to the token embedding table. Image
embeddings are spliced into the token stream at placeholder slots before
the first decoder block. Low-rank adapters can be attached to the
decoder's attention projections; the second factor is zero-initialized so
a freshly adapted model computes exactly the base forward.

Parameters live in named groups (encoder, connector, lm, lm_lora,
embeddings) with per-group trainable flags; a frozen group is presented
to the graph through no-grad aliases, so no gradients are recorded or
accumulated for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateBatchError, ShapeError
from .tensor import Tensor

GROUP_NAMES = ("encoder", "connector", "lm", "lm_lora", "embeddings")


@dataclass
class ModelConfig:
    vocab_size: int
    image_size: int = 64
    patch_size: int = 8
    enc_dim: int = 128
    enc_layers: int = 4
    enc_heads: int = 4
    lm_dim: int = 128
    lm_layers: int = 4
    lm_heads: int = 4
    context_len: int = 256
    lora_rank: int = 8  # 0 disables adapters

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.enc_dim % self.enc_heads or self.lm_dim % self.lm_heads:
            raise ContractError("model dims must be divisible by head counts")
        if self.vocab_size < 4 or self.context_len < 8:
            raise ContractError("vocab_size/context_len too small")
        if self.lora_rank < 0:
            raise ContractError("lora_rank must be >= 0")

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class ModelParams:
    config: ModelConfig
    groups: dict[str, dict[str, Tensor]]
    trainable: dict[str, bool] = field(
        default_factory=lambda: {g: True for g in GROUP_NAMES}
    )

    @property
    def lora_applied(self) -> bool:
        return bool(self.groups.get("lm_lora"))

    def set_trainable(self, **flags: bool):
        for name, flag in flags.items():
            if name not in GROUP_NAMES:
                raise ContractError(f"unknown parameter group {name!r}")
            self.trainable[name] = bool(flag)

    def named_tensors(self) -> dict[str, Tensor]:
        """Flat {"group/name": tensor} view in stable order."""
        return {
            f"{g}/{k}": t
            for g in GROUP_NAMES
            for k, t in sorted(self.groups.get(g, {}).items())
        }

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {
            name: t
            for name, t in self.named_tensors().items()
            if self.trainable[name.split("/", 1)[0]]
        }

    def effective(self, group: str) -> dict[str, Tensor]:
        """Group tensors, wrapped as no-grad aliases when the group is frozen."""
        tensors = self.groups[group]
        if self.trainable[group]:
            return tensors
        return {k: Tensor(t.data, requires_grad=False) for k, t in tensors.items()}

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())


def _block_param_count(dim: int) -> int:
    attn = 4 * (dim * dim + dim)
    mlp = dim * 4 * dim + 4 * dim + 4 * dim * dim + dim
    norms = 4 * dim
    return attn + mlp + norms


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Parameter count derived from the architecture definition alone."""
    t = cfg.tokens_per_image
    enc = (
        cfg.patch_dim * cfg.enc_dim + cfg.enc_dim
        + t * cfg.enc_dim
        + cfg.enc_layers * _block_param_count(cfg.enc_dim)
        + 2 * cfg.enc_dim
    )
    conn = cfg.enc_dim * cfg.lm_dim + cfg.lm_dim
    lm = (
        cfg.context_len * cfg.lm_dim
        + cfg.lm_layers * _block_param_count(cfg.lm_dim)
        + 2 * cfg.lm_dim
    )
    emb = cfg.vocab_size * cfg.lm_dim
    lora = cfg.lm_layers * 4 * (2 * cfg.lm_dim * cfg.lora_rank) if cfg.lora_rank else 0
    return enc + conn + lm + emb + lora


def _init_block(rng, dim: int, prefix: str, out: dict[str, Tensor]):
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = T.parameter(rng.normal(0, 0.02, (dim, dim)))
        out[f"{prefix}.{name.replace('w', 'b')}"] = T.parameter(np.zeros(dim))
    out[f"{prefix}.w1"] = T.parameter(rng.normal(0, 0.02, (dim, 4 * dim)))
    out[f"{prefix}.b1"] = T.parameter(np.zeros(4 * dim))
    out[f"{prefix}.w2"] = T.parameter(rng.normal(0, 0.02, (4 * dim, dim)))
    out[f"{prefix}.b2"] = T.parameter(np.zeros(dim))
    for ln in ("ln1", "ln2"):
        out[f"{prefix}.{ln}_g"] = T.parameter(np.ones(dim))
        out[f"{prefix}.{ln}_b"] = T.parameter(np.zeros(dim))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    enc: dict[str, Tensor] = {
        "patch_w": T.parameter(rng.normal(0, 0.02, (cfg.patch_dim, cfg.enc_dim))),
        "patch_b": T.parameter(np.zeros(cfg.enc_dim)),
        "pos": T.parameter(rng.normal(0, 0.02, (cfg.tokens_per_image, cfg.enc_dim))),
        "lnf_g": T.parameter(np.ones(cfg.enc_dim)),
        "lnf_b": T.parameter(np.zeros(cfg.enc_dim)),
    }
    for i in range(cfg.enc_layers):
        _init_block(rng, cfg.enc_dim, f"blk{i}", enc)

    if cfg.enc_dim == cfg.lm_dim:
        conn_w = np.eye(cfg.enc_dim)  # pass-through at init
    else:
        conn_w = rng.normal(0, 0.02, (cfg.enc_dim, cfg.lm_dim))
    connector = {"w": T.parameter(conn_w), "b": T.parameter(np.zeros(cfg.lm_dim))}

    lm: dict[str, Tensor] = {
        "pos": T.parameter(rng.normal(0, 0.02, (cfg.context_len, cfg.lm_dim))),
        "lnf_g": T.parameter(np.ones(cfg.lm_dim)),
        "lnf_b": T.parameter(np.zeros(cfg.lm_dim)),
    }
    for i in range(cfg.lm_layers):
        _init_block(rng, cfg.lm_dim, f"blk{i}", lm)

    emb = {"tok": T.parameter(rng.normal(0, 0.02, (cfg.vocab_size, cfg.lm_dim)))}

    params = ModelParams(
        config=cfg,
        groups={
            "encoder": enc,
            "connector": connector,
            "lm": lm,
            "lm_lora": {},
            "embeddings": emb,
        },
    )
    if cfg.lora_rank > 0:
        apply_lora(params, cfg.lora_rank, seed=seed + 1)
    return params


def apply_lora(params: ModelParams, rank: int, seed: int = 1):
    """Attach low-rank adapters to every decoder attention projection."""
    if rank < 1:
        raise ContractError(f"adapter rank must be >= 1, got {rank}")
    if params.lora_applied:
        raise ContractError("adapters already applied")
    rng = np.random.default_rng(seed)
    dim = params.config.lm_dim
    lora: dict[str, Tensor] = {}
    for i in range(params.config.lm_layers):
        for name in ("q", "k", "v", "o"):
            lora[f"blk{i}.{name}_a"] = T.parameter(rng.normal(0, 0.02, (dim, rank)))
            # zero second factor: adapted forward equals base at init
            lora[f"blk{i}.{name}_b"] = T.parameter(np.zeros((rank, dim)))
    params.groups["lm_lora"] = lora


def merge_lora(params: ModelParams):
    """Fold every adapter product into its base weight and drop the adapters."""
    if not params.lora_applied:
        raise ContractError("no adapters to merge")
    lm = params.groups["lm"]
    lora = params.groups["lm_lora"]
    for i in range(params.config.lm_layers):
        for name in ("q", "k", "v", "o"):
            a = lora[f"blk{i}.{name}_a"].data
            b = lora[f"blk{i}.{name}_b"].data
            w = lm[f"blk{i}.w{name}"]
            w.data = (w.data.astype(np.float64) + a.astype(np.float64) @ b).astype(
                np.float32
            )
    params.groups["lm_lora"] = {}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def normalize_image(img: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float32 in [-1, 1]."""
    return (img.astype(np.float32) / 127.5) - 1.0


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """float32 [B,H,W,3] -> [B, (H/p)*(W/p), p*p*3], row-major patch order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, gh * gw, patch * patch * c)


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[N, d_in] @ w + b."""
    return T.matmul(x, w) + b


def _attention(
    x: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    heads: int,
    mask: np.ndarray | None,
    lora: dict[str, Tensor] | None,
    lora_prefix: str = "",
) -> Tensor:
    bsz, seq, dim = x.shape
    dh = dim // heads
    flat = T.reshape(x, (bsz * seq, dim))

    def proj(name: str) -> Tensor:
        out = _affine(flat, p[f"{prefix}.w{name}"], p[f"{prefix}.b{name}"])
        if lora is not None:
            low = T.matmul(flat, lora[f"{lora_prefix}{name}_a"])
            out = out + T.matmul(low, lora[f"{lora_prefix}{name}_b"])
        return out

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (bsz, seq, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(proj("q")), split(proj("k")), split(proj("v"))
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = T.masked_softmax(scores, mask)
    ctx = T.bmm(probs, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz * seq, dim))
    out = _affine(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    if lora is not None:
        low = T.matmul(ctx, lora[f"{lora_prefix}o_a"])
        out = out + T.matmul(low, lora[f"{lora_prefix}o_b"])
    return T.reshape(out, (bsz, seq, dim))


def _mlp(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    bsz, seq, dim = x.shape
    flat = T.reshape(x, (bsz * seq, dim))
    h = T.gelu(_affine(flat, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    out = _affine(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return T.reshape(out, (bsz, seq, dim))


def _transformer_block(
    x: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    heads: int,
    mask: np.ndarray | None,
    lora: dict[str, Tensor] | None = None,
    lora_prefix: str = "",
) -> Tensor:
    h = T.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    x = x + _attention(h, p, prefix, heads, mask, lora, lora_prefix)
    h = T.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    return x + _mlp(h, p, prefix)


def vit_encode(params: ModelParams, images: np.ndarray) -> Tensor:
    """uint8 [B,H,W,3] -> patch features [B, T, enc_dim].

    Freezing is realized structurally: with the encoder group frozen the
    whole pass runs on no-grad aliases and records nothing on the tape.
    """
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ShapeError(
            f"expected [B,{cfg.image_size},{cfg.image_size},3] images, got {images.shape}"
        )
    p = params.effective("encoder")
    bsz = images.shape[0]
    patches = patchify(normalize_image(images), cfg.patch_size)
    t = patches.shape[1]
    flat = Tensor(patches.reshape(bsz * t, cfg.patch_dim), requires_grad=False)
    x = T.reshape(_affine(flat, p["patch_w"], p["patch_b"]), (bsz, t, cfg.enc_dim))
    x = x + p["pos"]
    for i in range(cfg.enc_layers):
        x = _transformer_block(x, p, f"blk{i}", cfg.enc_heads, None)
    return T.layer_norm(x, p["lnf_g"], p["lnf_b"])


def connect(params: ModelParams, features: Tensor) -> Tensor:
    """Per-patch affine map from encoder space to LM embedding space."""
    p = params.effective("connector")
    bsz, t, _ = features.shape
    flat = T.reshape(features, (bsz * t, params.config.enc_dim))
    return T.reshape(_affine(flat, p["w"], p["b"]), (bsz, t, params.config.lm_dim))


def _causal_mask(seq: int) -> np.ndarray:
    return np.tril(np.ones((seq, seq), dtype=bool))


def lm_forward(
    params: ModelParams,
    ids: np.ndarray,
    image_embeds: Tensor | None = None,
    slot_positions: np.ndarray | None = None,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    """Token ids [B, L] (+ spliced image embeddings) -> logits [B, L, V].

    `pad_mask` is True at real positions; padded positions are excluded as
    attention keys so their ids cannot influence any real position.
    """
    cfg = params.config
    ids = np.asarray(ids)
    bsz, seq = ids.shape
    if seq > cfg.context_len:
        raise ContractError(f"sequence length {seq} exceeds context {cfg.context_len}")
    lm = params.effective("lm")
    emb = params.effective("embeddings")
    lora = params.effective("lm_lora") if params.lora_applied else None

    x = T.embedding_gather(emb["tok"], ids)
    x = x + T.embedding_gather(lm["pos"], np.arange(seq))
    if image_embeds is not None:
        if slot_positions is None:
            raise ContractError("image embeddings given without slot positions")
        x = T.slot_scatter(x, image_embeds, slot_positions)
    elif slot_positions is not None and np.asarray(slot_positions).size:
        raise ContractError("slot positions given without image embeddings")

    mask = _causal_mask(seq)[None, None, :, :]
    if pad_mask is not None:
        keys = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
        mask = mask & keys
    for i in range(cfg.lm_layers):
        x = _transformer_block(
            x, lm, f"blk{i}", cfg.lm_heads, mask, lora, f"blk{i}."
        )
    x = T.layer_norm(x, lm["lnf_g"], lm["lnf_b"])
    flat = T.reshape(x, (bsz * seq, cfg.lm_dim))
    logits = T.matmul(flat, T.transpose(emb["tok"], (1, 0)))
    return T.reshape(logits, (bsz, seq, cfg.vocab_size))


def encode_images_for_lm(params: ModelParams, images: np.ndarray, n_images: int) -> Tensor:
    """Encode a flat [B*n_images, H, W, 3] stack and group per example.

    Returns [B, n_images*T, lm_dim], matching slot positions that list each
    example's image slots in order.
    """
    feats = vit_encode(params, images)
    embeds = connect(params, feats)
    total, t, d = embeds.shape
    if total % n_images:
        raise ContractError(f"{total} images do not split into groups of {n_images}")
    return T.reshape(embeds, (total // n_images, n_images * t, d))


def vqa_loss(
    params: ModelParams,
    ids: np.ndarray,
    loss_mask: np.ndarray,
    pad_mask: np.ndarray,
    images: np.ndarray | None,
    slot_positions: np.ndarray | None,
    n_images: int = 1,
    image_embeds: Tensor | None = None,
) -> Tensor:
    """Next-token cross entropy over answer positions, averaged per example
    then over the batch.

    Image context comes from raw `images`, or from `image_embeds` when the
    caller has already run the (frozen) encoder.
    """
    ids = np.asarray(ids)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    bsz, seq = ids.shape
    if image_embeds is None and images is not None and len(images):
        image_embeds = encode_images_for_lm(params, images, n_images)
    logits = lm_forward(params, ids, image_embeds, slot_positions, pad_mask)

    # position t predicts token t+1: shift targets/mask left, drop last column
    targets = np.zeros_like(ids)
    targets[:, :-1] = ids[:, 1:]
    answer = np.zeros_like(loss_mask)
    answer[:, :-1] = loss_mask[:, 1:]
    per_example = answer.sum(axis=1)
    if (per_example == 0).any():
        raise DegenerateBatchError("an example has no loss-masked answer tokens")
    weights = answer.astype(np.float64) / (per_example[:, None] * bsz)

    flat_logits = T.reshape(logits, (bsz * seq, params.config.vocab_size))
    return T.softmax_cross_entropy(
        flat_logits, targets.reshape(-1), answer.reshape(-1), weights.reshape(-1)
    )


def generate(
    params: ModelParams,
    prompt_ids: np.ndarray,
    images: np.ndarray | None,
    slot_positions: np.ndarray | None,
    max_new: int,
    eos_id: int,
    n_images: int = 1,
    image_embeds: Tensor | None = None,
) -> list[list[int]]:
    """Batched greedy decoding; prompts must share one length.

    Image context comes either from raw `images` or from precomputed
    `image_embeds` (callers amortizing the encoder across many prompts).
    Returns per-example generated ids, truncated at (and excluding) EOS.
    """
    cfg = params.config
    ids = np.asarray(prompt_ids)
    if ids.ndim != 2:
        raise ShapeError(f"prompt ids must be [B, L], got {ids.shape}")
    bsz, plen = ids.shape
    if max_new < 0:
        raise ContractError("max_new must be >= 0")
    if plen + max_new > cfg.context_len:
        raise ContractError(
            f"prompt {plen} + max_new {max_new} exceeds context {cfg.context_len}"
        )
    if max_new == 0:
        return [[] for _ in range(bsz)]
    if image_embeds is None and images is not None and len(images):
        image_embeds = encode_images_for_lm(params, images, n_images)

    out = ids
    alive = np.ones(bsz, dtype=bool)
    for _ in range(max_new):
        logits = lm_forward(params, out, image_embeds, slot_positions).data
        nxt = logits[:, -1, :].argmax(axis=1).astype(out.dtype)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        alive &= nxt != eos_id
        if not alive.any():
            break
    results = []
    for b in range(bsz):
        gen = out[b, plen:]
        cut = np.nonzero(gen == eos_id)[0]
        results.append([int(t) for t in (gen[: cut[0]] if len(cut) else gen)])
    return results
