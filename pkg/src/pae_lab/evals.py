"""Evaluation heads: reconstruction error, referring segmentation, game score.

Metrics over integer pixel data accumulate in int64 and divide once, so
results are exact and independent of summation order. Model-backed
evaluations batch their prompts through a shared query engine that encodes
each distinct image exactly once.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseFailure
from .laneracer import (
    ACTION_LABELS,
    ACTION_STRAIGHT,
    Episode,
    LaneRacer,
    expert_policy,
    run_episode,
)
from .model import ModelParams, connect, generate, vit_encode
from .prompts import (
    format_game_prompt,
    format_pvp_prompt,
    format_refer_prompt,
    format_seg_prompt,
    parse_action_answer,
    parse_bbox_answer,
    parse_mask_answer,
    parse_pvp_answer,
)
from .scenes import render_scene, sample_scene, referring_of
from .vocab import Vocabulary, build_prompt_ids

GAME_INSTRUCTION = "drive the car and stay on the road"

# generation lengths: worst-case answer tokens + EOS, with early stopping
MAX_NEW_RGB = 16     # [255,255,255] is 13 tokens
MAX_NEW_BBOX = 16    # [15,15,15,15] is 13 tokens
MAX_NEW_BIT = 2      # single 0/1 token
MAX_NEW_ACTION = 3   # action label is one token


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _abs_diff_total(pred: np.ndarray, gt: np.ndarray) -> int:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return int(np.abs(pred.astype(np.int64) - gt.astype(np.int64)).sum())


def pixel_re(pred_rgb, gt_rgb) -> float:
    """Mean absolute channel difference for one pixel, on the 0..255 scale."""
    pred = np.asarray(pred_rgb)
    if pred.shape != (3,):
        raise ContractError(f"pixel must have 3 channels, got {pred.shape}")
    return _abs_diff_total(pred, gt_rgb) / 3.0


def image_re(pred: np.ndarray, gt: np.ndarray) -> float:
    """Reconstruction error: mean per-pixel `pixel_re` over the image."""
    pred = np.asarray(pred)
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise ContractError(f"image must be [H, W, 3], got {pred.shape}")
    h, w, _ = pred.shape
    return _abs_diff_total(pred, gt) / (h * w * 3)


def image_re_scaled(pred: np.ndarray, gt: np.ndarray) -> float:
    """Sum-normalized variant: channel-summed differences over H*W*255.

    Bounded by 3.0; reported alongside `image_re` for cross-checking.
    """
    pred = np.asarray(pred)
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise ContractError(f"image must be [H, W, 3], got {pred.shape}")
    h, w, _ = pred.shape
    return _abs_diff_total(pred, gt) / (h * w * 255)


def ciou(pred_masks, gt_masks) -> float:
    """Cumulative IoU: summed intersections over summed unions."""
    if len(pred_masks) != len(gt_masks) or not len(pred_masks):
        raise ContractError("need equal, nonzero numbers of masks")
    inter = 0
    union = 0
    for p, g in zip(pred_masks, gt_masks):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise ContractError(f"mask shape mismatch {p.shape} vs {g.shape}")
        inter += int((p & g).sum())
        union += int((p | g).sum())
    if union == 0:
        raise ContractError("all masks empty; cumulative IoU undefined")
    return inter / union


def box_iou(a, b) -> float:
    """IoU of two inclusive pixel boxes (x1, y1, x2, y2)."""
    for box in (a, b):
        x1, y1, x2, y2 = box
        if x2 < x1 or y2 < y1:
            raise ContractError(f"degenerate box {box}")
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = ix2 - ix1 + 1, iy2 - iy1 + 1
    inter = iw * ih if (iw > 0 and ih > 0) else 0
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def precision_at_50(pred_boxes, gt_boxes) -> float:
    """Fraction of box pairs with IoU of at least 0.5."""
    if len(pred_boxes) != len(gt_boxes) or not len(pred_boxes):
        raise ContractError("need equal, nonzero numbers of boxes")
    hits = sum(1 for p, g in zip(pred_boxes, gt_boxes) if box_iou(p, g) >= 0.5)
    return hits / len(pred_boxes)


# ---------------------------------------------------------------------------
# batched prompt answering over a fixed image set
# ---------------------------------------------------------------------------

class QueryEngine:
    """Answers text prompts against images encoded once up front.

    Holds post-connector embeddings for every image, so thousands of prompts
    about the same scene never re-run the vision encoder.
    """

    def __init__(self, params: ModelParams, vocab: Vocabulary, images, chunk: int = 128):
        self.params = params
        self.vocab = vocab
        self.chunk = chunk
        images = np.asarray(images)
        if images.ndim != 4:
            raise ContractError(f"images must be [N, H, W, 3], got {images.shape}")
        parts = []
        for i in range(0, len(images), 32):
            feats = vit_encode(params, images[i : i + 32])
            parts.append(connect(params, feats).data)
        self.embeds = np.concatenate(parts, axis=0)

    def answer(self, prompts: list[str], rows: list[tuple], max_new: int) -> list[str]:
        """Greedy answers for `prompts`; rows[i] lists image indices per prompt."""
        if len(prompts) != len(rows):
            raise ContractError("one image-row tuple per prompt")
        params, vocab = self.params, self.vocab
        n_images = len(rows[0]) if rows else 1
        tpi = params.config.tokens_per_image
        encoded = []
        by_len: dict[int, list[int]] = {}
        for i, (p, r) in enumerate(zip(prompts, rows)):
            if len(r) != n_images:
                raise ContractError("all prompts must use the same image count")
            ids, slots = build_prompt_ids(vocab, p, tpi, n_images)
            encoded.append((ids, slots))
            by_len.setdefault(len(ids), []).append(i)

        out: list[str] = [""] * len(prompts)
        d = self.embeds.shape[2]
        for idxs in by_len.values():
            for s in range(0, len(idxs), self.chunk):
                sel = idxs[s : s + self.chunk]
                ids = np.stack([encoded[i][0] for i in sel])
                slots = np.stack([encoded[i][1] for i in sel])
                flat = np.array([j for i in sel for j in rows[i]])
                emb = self.embeds[flat].reshape(len(sel), n_images * tpi, d)
                from .tensor import Tensor

                gens = generate(
                    params, ids, None, slots, max_new, vocab.eos_id,
                    n_images=n_images, image_embeds=Tensor(emb),
                )
                for i, g in zip(sel, gens):
                    out[i] = vocab.decode(g)
        return out

    def single_image_answerer(self, row: int):
        """Binds one image; returns answer(prompts) for per-item pipelines."""

        def answer(prompts: list[str]) -> list[str]:
            return self.answer(prompts, [(row,)] * len(prompts), MAX_NEW_BBOX)

        return answer


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

@dataclass
class ReconReport:
    """Per-image reconstructions with both error normalizations."""

    recons: np.ndarray            # uint8 [N, t, t, 3]
    res: list[float]              # image_re per image
    res_scaled: list[float]       # image_re_scaled per image
    parse_failures: int
    mean_re: float
    mean_re_scaled: float


def evaluate_reconstruction(
    params: ModelParams,
    vocab: Vocabulary,
    images,
    target_size: int = 16,
    chunk: int = 128,
) -> ReconReport:
    """Query every target-resolution pixel of every image and score against
    block-averaged ground truth. Unparseable answers count as black pixels."""
    from .data import downsample

    images = np.asarray(images)
    n = len(images)
    t = target_size
    engine = QueryEngine(params, vocab, images, chunk=chunk)
    prompts = []
    rows = []
    for i in range(n):
        for y in range(t):
            for x in range(t):
                prompts.append(format_pvp_prompt(x, y, t, t))
                rows.append((i,))
    answers = engine.answer(prompts, rows, MAX_NEW_RGB)

    recons = np.zeros((n, t, t, 3), dtype=np.uint8)
    failures = 0
    k = 0
    for i in range(n):
        for y in range(t):
            for x in range(t):
                try:
                    recons[i, y, x] = parse_pvp_answer(answers[k])
                except ParseFailure:
                    failures += 1  # fallback pixel stays black and is scored
                k += 1
    factor = images.shape[1] // t
    res = []
    res_scaled = []
    for i in range(n):
        gt = downsample(images[i], factor)
        res.append(image_re(recons[i], gt))
        res_scaled.append(image_re_scaled(recons[i], gt))
    return ReconReport(
        recons=recons,
        res=res,
        res_scaled=res_scaled,
        parse_failures=failures,
        mean_re=float(np.mean(res)),
        mean_re_scaled=float(np.mean(res_scaled)),
    )


def constant_baseline_re(targets) -> tuple[tuple[int, int, int], float]:
    """Best single-color predictor (per-channel median) and its mean error."""
    targets = np.asarray(targets)
    if targets.ndim != 4 or targets.shape[3] != 3:
        raise ContractError(f"targets must be [N, t, t, 3], got {targets.shape}")
    flat = targets.reshape(-1, 3).astype(np.int64)
    rgb = tuple(int(np.floor(np.median(flat[:, c]) + 0.5)) for c in range(3))
    const = np.empty_like(targets[0])
    const[...] = rgb
    mean = float(np.mean([image_re(const, tgt) for tgt in targets]))
    return rgb, mean


# ---------------------------------------------------------------------------
# referring segmentation
# ---------------------------------------------------------------------------

@dataclass
class MaskPrediction:
    """Box-then-mask pipeline output for one referring sentence."""

    bbox: tuple[int, int, int, int]
    mask: np.ndarray              # bool [t, t]
    bbox_fallback: bool           # True when the box answer failed to parse
    bit_failures: int             # unparseable per-pixel answers (scored as 0)


def predict_mask(answer, sentence: str, target_size: int) -> MaskPrediction:
    """Two-stage referring segmentation against an answer(prompts) callable.

    Stage one asks for the object's box; stage two asks a mask bit for every
    pixel inside it. Parsing failures fall back (full-image box, 0 bits) and
    are still scored.
    """
    t = target_size
    raw = answer([format_refer_prompt(sentence)])[0]
    fallback = False
    try:
        bbox = parse_bbox_answer(raw, t, t)
    except ParseFailure:
        bbox = (0, 0, t - 1, t - 1)
        fallback = True
    x1, y1, x2, y2 = bbox
    prompts = [
        format_seg_prompt(sentence, x, y, t, t)
        for y in range(y1, y2 + 1)
        for x in range(x1, x2 + 1)
    ]
    bits_raw = answer(prompts)
    mask = np.zeros((t, t), dtype=bool)
    failures = 0
    k = 0
    for y in range(y1, y2 + 1):
        for x in range(x1, x2 + 1):
            try:
                mask[y, x] = bool(parse_mask_answer(bits_raw[k]))
            except ParseFailure:
                failures += 1
            k += 1
    return MaskPrediction(bbox=bbox, mask=mask, bbox_fallback=fallback, bit_failures=failures)


@dataclass
class SegEvalItem:
    """One referring-expression query with target-resolution ground truth."""

    image: np.ndarray             # uint8 [H, W, 3]
    sentence: str
    gt_mask: np.ndarray           # bool [t, t]
    gt_bbox: tuple[int, int, int, int]
    seed: int


def build_seg_eval_items(
    seeds, n_items: int, image_size: int = 64, target_size: int = 16
) -> list[SegEvalItem]:
    """Deterministic referring-eval set: objects in seed order until n_items."""
    items: list[SegEvalItem] = []
    for seed in seeds:
        spec = sample_scene(seed)
        image = render_scene(spec, image_size)
        for idx in range(len(spec.objects)):
            try:
                sentence, mask, bbox = referring_of(spec, idx, target_size)
            except ContractError:
                continue  # object too small to own a pixel at target scale
            items.append(SegEvalItem(image, sentence, mask, bbox, seed))
            if len(items) == n_items:
                return items
    raise ContractError(f"only {len(items)} referring items from {len(list(seeds))} seeds")


@dataclass
class SegReport:
    """Referring segmentation quality over a fixed eval set."""

    ciou: float
    precision: float
    n_items: int
    bbox_fallbacks: int
    bit_failures: int
    ious: list[float] = field(default_factory=list)


def evaluate_segmentation(
    params: ModelParams,
    vocab: Vocabulary,
    items: list[SegEvalItem],
    chunk: int = 256,
) -> SegReport:
    """Run the box-then-mask pipeline over `items` and report cumulative IoU
    plus box precision at the 0.5 threshold."""
    if not items:
        raise ContractError("empty eval set")
    t = items[0].gt_mask.shape[0]
    row_of: dict[int, int] = {}
    images = []
    for it in items:
        if it.seed not in row_of:
            row_of[it.seed] = len(images)
            images.append(it.image)
    engine = QueryEngine(params, vocab, np.asarray(images), chunk=chunk)

    # stage one for every item in one batched pass
    box_prompts = [format_refer_prompt(it.sentence) for it in items]
    box_rows = [(row_of[it.seed],) for it in items]
    box_raw = engine.answer(box_prompts, box_rows, MAX_NEW_BBOX)
    bboxes = []
    fallbacks = 0
    for raw in box_raw:
        try:
            bboxes.append(parse_bbox_answer(raw, t, t))
        except ParseFailure:
            bboxes.append((0, 0, t - 1, t - 1))
            fallbacks += 1

    # stage two: per-pixel bits inside each predicted box, batched jointly
    prompts = []
    rows = []
    spans = []
    for it, (x1, y1, x2, y2) in zip(items, bboxes):
        start = len(prompts)
        for y in range(y1, y2 + 1):
            for x in range(x1, x2 + 1):
                prompts.append(format_seg_prompt(it.sentence, x, y, t, t))
                rows.append((row_of[it.seed],))
        spans.append((start, len(prompts)))
    bits_raw = engine.answer(prompts, rows, MAX_NEW_BIT)

    masks = []
    bit_failures = 0
    for it, bbox, (start, stop) in zip(items, bboxes, spans):
        x1, y1, x2, y2 = bbox
        mask = np.zeros((t, t), dtype=bool)
        k = start
        for y in range(y1, y2 + 1):
            for x in range(x1, x2 + 1):
                try:
                    mask[y, x] = bool(parse_mask_answer(bits_raw[k]))
                except ParseFailure:
                    bit_failures += 1
                k += 1
        masks.append(mask)

    gts = [it.gt_mask for it in items]
    ious = []
    for m, g in zip(masks, gts):
        union = int((m | g).sum())
        ious.append(int((m & g).sum()) / union if union else 0.0)
    return SegReport(
        ciou=ciou(masks, gts),
        precision=precision_at_50(bboxes, [it.gt_bbox for it in items]),
        n_items=len(items),
        bbox_fallbacks=fallbacks,
        bit_failures=bit_failures,
        ious=ious,
    )


# ---------------------------------------------------------------------------
# game
# ---------------------------------------------------------------------------

@dataclass
class GameReport:
    """Scores from model-controlled rollouts."""

    scores: list[float]
    mean_score: float
    parse_failures: int
    frames: int


def eval_game(
    params: ModelParams,
    vocab: Vocabulary,
    n_rounds: int = 15,
    seed_base: int = 2000,
) -> GameReport:
    """Roll out the model policy on held-out tracks, all rounds in lockstep.

    Every step batches one action query per live environment; unparseable
    answers steer STRAIGHT and are counted.
    """
    cfg = params.config
    prompt = format_game_prompt(GAME_INSTRUCTION, 2, ACTION_LABELS)
    ids, slots = build_prompt_ids(vocab, prompt, cfg.tokens_per_image, n_images=2)

    envs = [LaneRacer() for _ in range(n_rounds)]
    obs = [env.reset(seed_base + i) for i, env in enumerate(envs)]
    alive = [True] * n_rounds
    scores = [0.0] * n_rounds
    failures = 0
    frames = 0
    while any(alive):
        live = [i for i in range(n_rounds) if alive[i]]
        images = np.concatenate([obs[i] for i in live], axis=0)
        batch_ids = np.tile(ids, (len(live), 1))
        batch_slots = np.tile(slots, (len(live), 1))
        gens = generate(
            params, batch_ids, images, batch_slots,
            MAX_NEW_ACTION, vocab.eos_id, n_images=2,
        )
        frames += len(live)
        for i, g in zip(live, gens):
            try:
                action = parse_action_answer(vocab.decode(g), ACTION_LABELS)
            except ParseFailure:
                action = ACTION_STRAIGHT
                failures += 1
            o, _, done = envs[i].step(action)
            obs[i] = o
            if done:
                alive[i] = False
                scores[i] = envs[i].score_tenths / 10.0
    return GameReport(
        scores=scores,
        mean_score=float(np.mean(scores)),
        parse_failures=failures,
        frames=frames,
    )


def baseline_game_scores(kind: str, n_rounds: int = 15, seed_base: int = 2000) -> list[float]:
    """Reference rollouts on the same tracks: scripted expert or random play."""
    scores = []
    for i in range(n_rounds):
        if kind == "expert":
            policy = expert_policy
        elif kind == "random":
            rng = np.random.default_rng(9000 + i)

            def policy(env, rng=rng):
                return int(rng.integers(3))
        else:
            raise ContractError(f"unknown baseline {kind!r}")
        ep = run_episode(seed_base + i, policy)
        scores.append(ep.score_tenths / 10.0)
    return scores


def action_accuracy(
    params: ModelParams,
    vocab: Vocabulary,
    episodes: list[Episode],
    stride: int = 7,
    limit: int = 256,
    chunk: int = 48,
) -> tuple[float, int]:
    """Fraction of recorded frames where the model picks the logged action."""
    cfg = params.config
    prompt = format_game_prompt(GAME_INSTRUCTION, 2, ACTION_LABELS)
    ids, slots = build_prompt_ids(vocab, prompt, cfg.tokens_per_image, n_images=2)
    picks = []
    for ep in episodes:
        for t in range(0, len(ep.actions), stride):
            picks.append((ep, t))
            if len(picks) == limit:
                break
        if len(picks) == limit:
            break
    if not picks:
        raise ContractError("no frames to score")
    hits = 0
    failures = 0
    for s in range(0, len(picks), chunk):
        sel = picks[s : s + chunk]
        images = np.concatenate([ep.observation(t) for ep, t in sel], axis=0)
        batch_ids = np.tile(ids, (len(sel), 1))
        batch_slots = np.tile(slots, (len(sel), 1))
        gens = generate(
            params, batch_ids, images, batch_slots,
            MAX_NEW_ACTION, vocab.eos_id, n_images=2,
        )
        for (ep, t), g in zip(sel, gens):
            try:
                action = parse_action_answer(vocab.decode(g), ACTION_LABELS)
            except ParseFailure:
                failures += 1
                continue
            hits += int(action == int(ep.actions[t]))
    return hits / len(picks), failures
