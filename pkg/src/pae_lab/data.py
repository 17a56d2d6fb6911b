"""Training-example construction and task mixing.

Bridges the scene/game generators and the model: builds prompt+answer
token sequences per task, downsamples rendering targets, and samples a
stage-dependent task mixture. Batch assembly right-pads sequences and
keeps padding out of both attention and the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prompts
from .errors import ContractError
from .laneracer import ACTION_LABELS, Episode
from .model import ModelConfig
from .scenes import SceneSpec, caption_of, object_mask, referring_sentence, render_scene
from .vocab import TokenSeq, Vocabulary, build_seq

GAME_INSTRUCTION = "drive the car and stay on the road"

TASK_KINDS = ("pvp", "caption", "refer", "segment", "game")


@dataclass
class TrainingExample:
    task: str
    images: np.ndarray  # uint8 [n_images, H, W, 3]
    seq: TokenSeq
    # one cache key per image row: examples sharing a key share that image
    image_keys: tuple = ()


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping block mean per channel, rounded half-up to 0-255."""
    h, w = image.shape[:2]
    if factor < 1 or h % factor or w % factor:
        raise ContractError(f"factor {factor} does not divide {h}x{w}")
    blocks = image.reshape(h // factor, factor, w // factor, factor, 3)
    means = blocks.astype(np.float64).mean(axis=(1, 3))
    return np.floor(means + 0.5).astype(np.uint8)  # round half up


@dataclass
class ScenePool:
    """Pre-rendered scenes with their targets, indexed by scene id."""

    specs: list[SceneSpec]
    images: np.ndarray        # uint8 [N, S, S, 3] at input resolution
    targets: np.ndarray       # uint8 [N, T, T, 3] downsampled ground truth
    target_size: int

    @classmethod
    def build(cls, seeds, image_size: int, target_size: int) -> "ScenePool":
        from .scenes import sample_scene

        specs = [sample_scene(s) for s in seeds]
        images = np.stack([render_scene(sp, image_size) for sp in specs])
        factor = image_size // target_size
        targets = np.stack([downsample(im, factor) for im in images])
        return cls(specs, images, targets, target_size)

    def __len__(self) -> int:
        return len(self.specs)


def sample_pvp_example(
    pool: ScenePool, rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig
) -> TrainingExample:
    """Random image, uniform random target-resolution location."""
    if not len(pool):
        raise ContractError("empty scene pool")
    i = int(rng.integers(len(pool)))
    t = pool.target_size
    x, y = int(rng.integers(t)), int(rng.integers(t))
    r, g, b = (int(c) for c in pool.targets[i][y, x])
    seq = build_seq(
        vocab,
        prompts.format_pvp_prompt(x, y, t, t),
        prompts.format_pvp_answer(r, g, b),
        cfg.tokens_per_image,
    )
    return TrainingExample("pvp", pool.images[i : i + 1], seq, (("scene", i),))


def sample_pvp_balanced_example(
    pool: ScenePool, rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig
) -> TrainingExample:
    """Random image, then a location drawn class-balanced over target colors.

    Uniform location sampling mirrors the class prior, so on skewed scenes
    the dominant color soaks up nearly all answer gradient; drawing a
    distinct color first, then one of its cells, gives every answer string
    equal pull. Used by overfit recipes alongside the uniform sampler.
    """
    if not len(pool):
        raise ContractError("empty scene pool")
    i = int(rng.integers(len(pool)))
    t = pool.target_size
    target = pool.targets[i]
    by_color: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for y in range(t):
        for x in range(t):
            by_color.setdefault(tuple(int(c) for c in target[y, x]), []).append((x, y))
    colors = sorted(by_color)
    color = colors[int(rng.integers(len(colors)))]
    cells = by_color[color]
    x, y = cells[int(rng.integers(len(cells)))]
    seq = build_seq(
        vocab,
        prompts.format_pvp_prompt(x, y, t, t),
        prompts.format_pvp_answer(*color),
        cfg.tokens_per_image,
    )
    return TrainingExample("pvp", pool.images[i : i + 1], seq, (("scene", i),))


def sample_caption_example(
    pool: ScenePool, rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig
) -> TrainingExample:
    if not len(pool):
        raise ContractError("empty scene pool")
    i = int(rng.integers(len(pool)))
    seq = build_seq(
        vocab, prompts.format_caption_prompt(), caption_of(pool.specs[i]),
        cfg.tokens_per_image,
    )
    return TrainingExample("caption", pool.images[i : i + 1], seq, (("scene", i),))


def sample_refer_example(
    pool: ScenePool, rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig
) -> TrainingExample:
    if not len(pool):
        raise ContractError("empty scene pool")
    i = int(rng.integers(len(pool)))
    spec = pool.specs[i]
    idx = int(rng.integers(len(spec.objects)))
    t = pool.target_size
    from .scenes import bbox_of_mask

    x1, y1, x2, y2 = bbox_of_mask(object_mask(spec, idx, t))
    seq = build_seq(
        vocab,
        prompts.format_refer_prompt(referring_sentence(spec, idx)),
        prompts.format_bbox_answer(x1, y1, x2, y2, t, t),
        cfg.tokens_per_image,
    )
    return TrainingExample("refer", pool.images[i : i + 1], seq, (("scene", i),))


def sample_seg_example(
    pool: ScenePool, rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig
) -> TrainingExample:
    """Pixel-membership query, class-balanced 50/50 inside/outside the mask."""
    if not len(pool):
        raise ContractError("empty scene pool")
    i = int(rng.integers(len(pool)))
    spec = pool.specs[i]
    idx = int(rng.integers(len(spec.objects)))
    t = pool.target_size
    mask = object_mask(spec, idx, t)
    inside = rng.random() < 0.5
    ys, xs = np.nonzero(mask if inside else 1 - mask)
    if len(xs) == 0:  # degenerate side (mask covers nothing or everything)
        ys, xs = np.nonzero(1 - mask if inside else mask)
        inside = not inside
    j = int(rng.integers(len(xs)))
    x, y = int(xs[j]), int(ys[j])
    seq = build_seq(
        vocab,
        prompts.format_seg_prompt(referring_sentence(spec, idx), x, y, t, t),
        prompts.format_mask_answer(1 if inside else 0),
        cfg.tokens_per_image,
    )
    return TrainingExample("segment", pool.images[i : i + 1], seq, (("scene", i),))


def sample_game_example(
    episodes: list[Episode], rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig
) -> TrainingExample:
    """Uniform (observation, expert action) pair over all recorded steps."""
    if not episodes:
        raise ContractError("empty episode set")
    lengths = np.array([len(ep) for ep in episodes])
    flat = int(rng.integers(lengths.sum()))
    e = int(np.searchsorted(lengths.cumsum(), flat, side="right"))
    t = flat - int(lengths[:e].sum())
    ep = episodes[e]
    seq = build_seq(
        vocab,
        prompts.format_game_prompt(GAME_INSTRUCTION, 2, ACTION_LABELS),
        prompts.format_action_answer(int(ep.actions[t]), ACTION_LABELS),
        cfg.tokens_per_image,
        n_images=2,
    )
    return TrainingExample(
        "game",
        ep.observation(t),
        seq,
        (("frame", ep.seed, max(t - 1, 0)), ("frame", ep.seed, t)),
    )


@dataclass
class TaskMix:
    """Seeded categorical sampler over task kinds."""

    weights: dict[str, float]
    rng: np.random.Generator

    def __post_init__(self):
        names = [k for k, w in self.weights.items() if w > 0]
        if not names:
            raise ContractError("task mix has no positive weights")
        if any(w < 0 for w in self.weights.values()):
            raise ContractError("task weights must be nonnegative")
        self._names = names
        probs = np.array([self.weights[k] for k in names], dtype=np.float64)
        self._probs = probs / probs.sum()

    def draw(self) -> str:
        return self._names[int(self.rng.choice(len(self._names), p=self._probs))]


def build_task_mix(stage: int, seed: int, pvp_weight: float | None = None) -> TaskMix:
    """Stage mixtures: PVP 0.30 in stages 1-2, reduced to 0.10 in stage 3;
    the remainder splits evenly across caption/refer/segment."""
    if stage not in (1, 2, 3):
        raise ContractError(f"unknown stage {stage}")
    pvp = pvp_weight if pvp_weight is not None else (0.30 if stage in (1, 2) else 0.10)
    if not 0.0 <= pvp < 1.0:
        raise ContractError(f"pvp weight {pvp} outside [0, 1)")
    rest = (1.0 - pvp) / 3.0
    weights = {"pvp": pvp, "caption": rest, "refer": rest, "segment": rest}
    return TaskMix(weights, np.random.default_rng(seed))


def next_example(
    mix: TaskMix,
    pool: ScenePool,
    vocab: Vocabulary,
    cfg: ModelConfig,
    episodes: list[Episode] | None = None,
) -> TrainingExample:
    task = mix.draw()
    sampler = {
        "pvp": sample_pvp_example,
        "pvp_balanced": sample_pvp_balanced_example,
        "caption": sample_caption_example,
        "refer": sample_refer_example,
        "segment": sample_seg_example,
    }
    if task == "game":
        return sample_game_example(episodes, mix.rng, vocab, cfg)
    return sampler[task](pool, mix.rng, vocab, cfg)


@dataclass
class Batch:
    ids: np.ndarray             # int32 [B, L]
    loss_mask: np.ndarray       # bool [B, L]
    pad_mask: np.ndarray        # bool [B, L], True at real tokens
    slot_positions: np.ndarray  # int32 [B, S]
    images: np.ndarray          # uint8 [B * n_images, H, W, 3]
    n_images: int
    image_keys: list[tuple] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)


def assemble_batch(examples: list[TrainingExample], cfg: ModelConfig, pad_id: int) -> Batch:
    """Right-pad to the longest sequence; all examples must share n_images."""
    if not examples:
        raise ContractError("empty batch")
    n_images = {ex.seq.n_images for ex in examples}
    if len(n_images) != 1:
        raise ContractError("mixed image counts in one batch")
    n_images = n_images.pop()
    lengths = [len(ex.seq) for ex in examples]
    for ex, ln in zip(examples, lengths):
        if ln > cfg.context_len:
            raise ContractError(
                f"{ex.task} example of length {ln} exceeds context {cfg.context_len}"
            )
    bsz, length = len(examples), max(lengths)
    ids = np.full((bsz, length), pad_id, dtype=np.int32)
    loss_mask = np.zeros((bsz, length), dtype=bool)
    pad_mask = np.zeros((bsz, length), dtype=bool)
    for b, ex in enumerate(examples):
        n = len(ex.seq)
        ids[b, :n] = ex.seq.ids
        loss_mask[b, :n] = ex.seq.loss_mask
        pad_mask[b, :n] = True
    slots = np.stack([ex.seq.image_slots for ex in examples]).astype(np.int32)
    images = np.concatenate([ex.images for ex in examples], axis=0)
    return Batch(
        ids=ids,
        loss_mask=loss_mask,
        pad_mask=pad_mask,
        slot_positions=slots,
        images=images,
        n_images=n_images,
        image_keys=[ex.image_keys for ex in examples],
        tasks=[ex.task for ex in examples],
    )
