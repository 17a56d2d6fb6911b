"""Training pipelines: contrastive encoder warm-up, the staged curriculum,
and downstream fine-tunes.

Stage ladder: stage 1 adapts the connector, decoder adapters, and the tied
embedding table against a frozen random-init encoder; stage 2 additionally
unfreezes the encoder; stage 3 re-freezes it. Decoder blocks never train
directly — all decoder adaptation flows through low-rank adapters.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import LabConfig
from .data import (
    Batch,
    ScenePool,
    TaskMix,
    TrainingExample,
    assemble_batch,
    next_example,
)
from .errors import ContractError, PoisonedGradientError, PoisonedRunError
from .model import ModelParams, connect, vit_encode, vqa_loss
from .persist import MetricsLog, save_checkpoint
from .scenes import caption_of
from .tensor import (
    OptimState,
    Tape,
    Tensor,
    adamw_step,
    backward,
    clip_gradients,
    cosine_lr,
)
from .vocab import Vocabulary

# canonical per-stage trainable sets; the encoder is only ever adapted in
# stage 2, and decoder blocks are adapter-only everywhere
STAGE_TRAINABLE: dict[str, dict[str, bool]] = {
    "stage1": dict(encoder=False, connector=True, lm=False, lm_lora=True, embeddings=True),
    "stage2": dict(encoder=True, connector=True, lm=False, lm_lora=True, embeddings=True),
    "stage3": dict(encoder=False, connector=True, lm=False, lm_lora=True, embeddings=True),
    "seg": dict(encoder=False, connector=True, lm=False, lm_lora=True, embeddings=True),
    "game": dict(encoder=False, connector=True, lm=False, lm_lora=True, embeddings=True),
}

STAGE_MIX: dict[str, dict[str, float]] = {
    "seg": {"refer": 0.5, "segment": 0.5},
    "game": {"game": 1.0},
}


@dataclass
class StageConfig:
    """One training stage: what trains, for how long, on which task mix."""

    name: str
    trainable: dict[str, bool]
    steps: int
    batch: int
    lr: float
    warmup: int
    mix_weights: dict[str, float]
    lora: bool = True
    weight_decay: float = 0.01
    log_every: int = 25
    max_grad_norm: float = 5.0

    def __post_init__(self):
        if self.name not in STAGE_TRAINABLE:
            raise ContractError(f"unknown stage {self.name!r}")
        if self.steps <= 0 or self.batch <= 0:
            raise ContractError("steps and batch must be positive")
        if not 0 <= self.warmup < self.steps:
            raise ContractError("warmup must lie inside the step budget")


def make_stage_config(cfg: LabConfig, name: str) -> StageConfig:
    """Stage settings from a run config plus the canonical trainable sets."""
    if name not in STAGE_TRAINABLE:
        raise ContractError(f"unknown stage {name!r}")
    keys = cfg.stage_keys(name)
    if name in STAGE_MIX:
        mix = dict(STAGE_MIX[name])
    else:
        pvp = keys["pvp_weight"]
        rest = (1.0 - pvp) / 3.0
        mix = {"pvp": pvp, "caption": rest, "refer": rest, "segment": rest}
    return StageConfig(
        name=name,
        trainable=dict(STAGE_TRAINABLE[name]),
        steps=keys["steps"],
        batch=keys["batch"],
        lr=keys["lr"],
        warmup=keys["warmup"],
        mix_weights=mix,
        weight_decay=cfg["train.weight_decay"],
        log_every=cfg["train.log_every"],
        max_grad_norm=cfg["train.max_grad_norm"],
    )


class FeatureCache:
    """Frozen-encoder image features keyed per image.

    Stores vit_encode outputs (pre-connector) so frozen-encoder stages skip
    the encoder after an image's first appearance. The connector still runs
    under the tape every step.
    """

    def __init__(self, params: ModelParams, max_items: int = 4096):
        self.params = params
        self.max_items = max_items
        self._store: dict[tuple, np.ndarray] = {}

    def gather(self, batch: Batch) -> np.ndarray:
        """Features for every image row of `batch`: [B*n, T, enc_dim]."""
        keys = [k for ex_keys in batch.image_keys for k in ex_keys]
        if len(keys) != len(batch.images):
            raise ContractError("image keys do not cover the image rows")
        missing = []
        seen = set()
        for row, key in enumerate(keys):
            if key not in self._store and key not in seen:
                missing.append((row, key))
                seen.add(key)
        if missing:
            feats = vit_encode(
                self.params, np.stack([batch.images[row] for row, _ in missing])
            ).data
            if len(self._store) + len(missing) > self.max_items:
                self._store.clear()  # simple wholesale eviction; refills fast
            for (_, key), f in zip(missing, feats):
                self._store[key] = f
        return np.stack([self._store[k] for k in keys])


def _batch_loss(params: ModelParams, batch: Batch, cache: FeatureCache | None) -> Tensor:
    if cache is None:
        return vqa_loss(
            params, batch.ids, batch.loss_mask, batch.pad_mask,
            batch.images, batch.slot_positions, batch.n_images,
        )
    feats = cache.gather(batch)
    embeds = connect(params, Tensor(feats))
    total, tokens, dim = embeds.shape
    embeds = T.reshape(embeds, (total // batch.n_images, batch.n_images * tokens, dim))
    return vqa_loss(
        params, batch.ids, batch.loss_mask, batch.pad_mask,
        None, batch.slot_positions, batch.n_images, image_embeds=embeds,
    )


@dataclass
class StageResult:
    checkpoint: Path
    checkpoint_hash: str
    history: list[tuple[int, float]]
    final_loss: float


def window_means(history, frac: float = 0.1) -> tuple[float, float]:
    """Mean loss over the first and last `frac` windows of a stage history."""
    if not history:
        raise ContractError("empty history")
    k = max(1, int(len(history) * frac))
    losses = [loss for _, loss in history]
    return float(np.mean(losses[:k])), float(np.mean(losses[-k:]))


def run_stage(
    params: ModelParams,
    stage: StageConfig,
    pool: ScenePool,
    vocab: Vocabulary,
    out_dir,
    seed: int,
    episodes=None,
    metrics: MetricsLog | None = None,
    parent_hash: str = "",
) -> StageResult:
    """Drive one stage: sample, batch, step; abort on poisoned numerics.

    Frozen groups are restored-by-never-touching: only trainable tensors get
    optimizer updates. A non-finite loss or gradient raises after saving the
    last good snapshot, so a poisoned run still leaves a usable checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params.set_trainable(**stage.trainable)
    mix = TaskMix(stage.mix_weights, np.random.default_rng(seed))
    trainable = params.trainable_tensors()
    state = OptimState(weight_decay=stage.weight_decay)
    cache = None if stage.trainable["encoder"] else FeatureCache(params)
    ckpt_path = out_dir / f"{stage.name}.ckpt"

    snapshot = {name: t.data.copy() for name, t in trainable.items()}
    history: list[tuple[int, float]] = []
    for step in range(stage.steps):
        examples = [
            next_example(mix, pool, vocab, params.config, episodes)
            for _ in range(stage.batch)
        ]
        batch = assemble_batch(examples, params.config, vocab.pad_id)
        with Tape() as tape:
            loss = _batch_loss(params, batch, cache)
            backward(tape, loss)
        loss_val = float(loss.data)
        lr = cosine_lr(step, stage.warmup, stage.steps, stage.lr)
        try:
            if not np.isfinite(loss_val):
                raise PoisonedGradientError(f"non-finite loss at step {step}")
            clip_gradients(trainable, stage.max_grad_norm)
            adamw_step(trainable, state, lr)
        except PoisonedGradientError as exc:
            for name, t in trainable.items():
                t.data[...] = snapshot[name]
            save_checkpoint(params, ckpt_path, vocab.tokens, parent_hash=parent_hash)
            raise PoisonedRunError(
                f"{stage.name} aborted at step {step}: {exc}; "
                f"last good state kept at {ckpt_path}"
            ) from exc
        history.append((step, loss_val))
        if step % stage.log_every == 0 or step == stage.steps - 1:
            for name, t in trainable.items():
                snapshot[name][...] = t.data
            if metrics is not None:
                metrics.append(step=step, stage=stage.name, task="mix",
                               loss=loss_val, lr=lr)
    digest = save_checkpoint(params, ckpt_path, vocab.tokens, parent_hash=parent_hash)
    return StageResult(
        checkpoint=ckpt_path,
        checkpoint_hash=digest,
        history=history,
        final_loss=history[-1][1],
    )


def finetune_segmentation(params, cfg: LabConfig, pool, vocab, out_dir, seed,
                          metrics=None, parent_hash="") -> StageResult:
    """Referring-box plus per-pixel-membership fine-tune on frozen encoder."""
    stage = make_stage_config(cfg, "seg")
    return run_stage(params, stage, pool, vocab, out_dir, seed,
                     metrics=metrics, parent_hash=parent_hash)


def finetune_game(params, cfg: LabConfig, episodes, vocab, out_dir, seed,
                  metrics=None, parent_hash="") -> StageResult:
    """Action imitation on recorded expert episodes."""
    stage = make_stage_config(cfg, "game")
    pool = ScenePool(specs=[], images=np.zeros((0, 1, 1, 3), np.uint8),
                     targets=np.zeros((0, 1, 1, 3), np.uint8),
                     target_size=cfg["data.target_size"])
    return run_stage(params, stage, pool, vocab, out_dir, seed,
                     episodes=episodes, metrics=metrics, parent_hash=parent_hash)


# ---------------------------------------------------------------------------
# contrastive encoder warm-up
# ---------------------------------------------------------------------------

def _caption_matrix(captions: list[str], vocab: Vocabulary) -> np.ndarray:
    """Bag-of-words mixing matrix: rows average each caption's token rows."""
    m = np.zeros((len(captions), len(vocab)), dtype=np.float32)
    for i, text in enumerate(captions):
        ids = vocab.encode(text)
        for t in ids:
            m[i, t] += 1.0
        m[i] /= len(ids)
    return m


def _clip_embeddings(params, cap_table: Tensor, images, captions, vocab):
    """L2-normalized image and caption embeddings for one batch."""
    feats = vit_encode(params, images)
    pooled = T.scale(T.sum_axis(feats, axis=1), 1.0 / feats.shape[1])
    img = T.l2_normalize(pooled)
    mix = _caption_matrix(captions, vocab)
    cap = T.l2_normalize(T.matmul(Tensor(mix), cap_table))
    return img, cap


def clip_loss(params, cap_table: Tensor, images, captions, vocab,
              temperature: float) -> Tensor:
    """Symmetric InfoNCE between image and bag-of-words caption towers."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    img, cap = _clip_embeddings(params, cap_table, images, captions, vocab)
    logits = T.scale(T.matmul(img, T.transpose(cap, (1, 0))), 1.0 / temperature)
    n = len(captions)
    labels = np.arange(n)
    ones = np.ones(n, dtype=bool)
    weights = np.full(n, 1.0 / n)
    fwd = T.softmax_cross_entropy(logits, labels, ones, weights)
    bwd = T.softmax_cross_entropy(T.transpose(logits, (1, 0)), labels, ones, weights)
    return T.scale(T.add(fwd, bwd), 0.5)


def _distinct_caption_batch(pool: ScenePool, batch: int, rng) -> tuple[np.ndarray, list[str]]:
    """Sample scene rows without replacement, dropping duplicate captions."""
    idx = rng.choice(len(pool), size=min(batch, len(pool)), replace=False)
    images, captions, seen = [], [], set()
    for i in idx:
        text = caption_of(pool.specs[int(i)])
        if text in seen:
            continue  # labels must be unique within the batch
        seen.add(text)
        images.append(pool.images[int(i)])
        captions.append(text)
    return np.stack(images), captions


def contrastive_pretrain(
    params: ModelParams,
    pool: ScenePool,
    vocab: Vocabulary,
    steps: int,
    batch: int,
    lr: float,
    temperature: float,
    seed: int,
    metrics: MetricsLog | None = None,
) -> tuple[Tensor, list[tuple[int, float]]]:
    """Warm the vision encoder by image-caption alignment.

    Returns the caption-embedding table (kept only for retrieval checks) and
    the loss history; encoder updates land in `params` directly.
    """
    if batch < 8:
        raise ContractError("contrastive batches need at least 8 distinct scenes")
    if len(pool) < batch:
        raise ContractError(f"pool of {len(pool)} scenes cannot fill batches of {batch}")
    rng = np.random.default_rng(seed)
    cap_rng = np.random.default_rng(seed + 1)
    cap_table = Tensor(
        cap_rng.normal(0.0, 0.02, size=(len(vocab), params.config.enc_dim)).astype(np.float32),
        requires_grad=True,
    )
    params.set_trainable(encoder=True, connector=False, lm=False, lm_lora=False, embeddings=False)
    trainable = dict(params.trainable_tensors())
    trainable["caption/tok"] = cap_table
    state = OptimState(weight_decay=0.0)
    history = []
    for step in range(steps):
        images, captions = _distinct_caption_batch(pool, batch, rng)
        with Tape() as tape:
            loss = clip_loss(params, cap_table, images, captions, vocab, temperature)
            backward(tape, loss)
        clip_gradients(trainable, 5.0)
        adamw_step(trainable, state, lr=cosine_lr(step, min(20, steps - 1), steps, lr))
        history.append((step, float(loss.data)))
        if metrics is not None and step % 25 == 0:
            metrics.append(step=step, stage="clip", task="contrastive",
                           loss=float(loss.data), lr=lr)
    return cap_table, history


def retrieval_top1(params, cap_table: Tensor, pool: ScenePool, vocab: Vocabulary) -> float:
    """Image-to-caption retrieval accuracy over a held-out pool."""
    captions = [caption_of(sp) for sp in pool.specs]
    if len(set(captions)) != len(captions):
        keep = []
        seen = set()
        for i, c in enumerate(captions):
            if c not in seen:
                seen.add(c)
                keep.append(i)
        captions = [captions[i] for i in keep]
        images = pool.images[keep]
    else:
        images = pool.images
    img, cap = _clip_embeddings(params, cap_table, images, captions, vocab)
    sims = img.data @ cap.data.T
    return float((sims.argmax(axis=1) == np.arange(len(captions))).mean())


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

def code_fingerprint() -> str:
    """Content hash over the package's own source files."""
    root = Path(__file__).resolve().parent
    digest = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to reproduce a run bit-identically."""

    config_text: str
    seed: int
    code: str = field(default_factory=code_fingerprint)
    stages: list = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def record_stage(self, name: str, result: StageResult, parent_hash: str = ""):
        self.stages.append(
            {
                "name": name,
                "checkpoint": str(result.checkpoint),
                "hash": result.checkpoint_hash,
                "parent": parent_hash,
                "final_loss": result.final_loss,
            }
        )

    def save(self, path):
        payload = {
            "config": self.config_text,
            "seed": self.seed,
            "code": self.code,
            "stages": self.stages,
            "data": self.data,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        payload = json.loads(Path(path).read_text())
        m = cls(config_text=payload["config"], seed=payload["seed"], code=payload["code"])
        m.stages = payload["stages"]
        m.data = payload["data"]
        return m
