"""Procedural shape scenes: rasterizer, captions, referring expressions.

Scenes hold 1..4 colored shapes with guaranteed pairwise separation, so
every object has a unique referring sentence and per-object masks never
overlap. Rasterization is a pixel-center coverage test with no
anti-aliasing: a pixel is either background or exactly one object's
palette color, which makes masks and pixel-value ground truth exact at
any resolution.

Coordinates are (x, y) in [0,1)^2 with x rightward and y downward; pixel
(x, y) lives at array position [y, x].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .vocab import COLOR_WORDS, SHAPE_WORDS, SPATIAL_WORDS

# fixed palette, one entry per color word, chosen for wide RGB separation
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (230, 25, 75),
    "green": (60, 180, 75),
    "blue": (0, 130, 200),
    "yellow": (255, 225, 25),
    "cyan": (70, 240, 240),
    "magenta": (240, 50, 230),
    "orange": (245, 130, 48),
    "purple": (145, 30, 180),
}
BACKGROUND: tuple[int, int, int] = (40, 40, 40)

SIZE_MIN, SIZE_MAX = 0.10, 0.13
MIN_CENTER_DIST = 0.22
EDGE_MARGIN = 0.02
# below this horizontal gap a duplicate pair is disambiguated vertically
SPATIAL_DX_THRESHOLD = 0.05
MAX_DUPLICATES = 2


@dataclass(frozen=True)
class SceneObject:
    shape: str   # circle | square | triangle
    color: str   # key into PALETTE
    cx: float
    cy: float
    size: float  # max extent from center, fraction of image side


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    seed: int


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    grid = (np.arange(size, dtype=np.float64) + 0.5) / size
    px = np.broadcast_to(grid[None, :], (size, size))
    py = np.broadcast_to(grid[:, None], (size, size))
    return px, py


def object_coverage(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean [size, size] coverage of the shape at pixel centers."""
    px, py = _pixel_centers(size)
    dx = px - obj.cx
    dy = py - obj.cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= obj.size * obj.size
    if obj.shape == "square":
        half = obj.size / np.sqrt(2.0)  # circumradius == size
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if obj.shape == "triangle":
        # equilateral, apex up (smaller y), circumradius == size
        angles = np.deg2rad([90.0, 210.0, 330.0])
        vx = obj.cx + obj.size * np.cos(angles)
        vy = obj.cy - obj.size * np.sin(angles)
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            x0, y0 = vx[k], vy[k]
            x1, y1 = vx[(k + 1) % 3], vy[(k + 1) % 3]
            cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
            inside &= cross <= 0.0
        return inside
    raise ContractError(f"unknown shape {obj.shape!r}")


def render_scene(spec: SceneSpec, size: int) -> np.ndarray:
    """uint8 [size, size, 3] image; deterministic function of the spec."""
    if not spec.objects:
        raise ContractError("scene must contain at least one object")
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in spec.objects:
        img[object_coverage(obj, size)] = PALETTE[obj.color]
    return img


def object_mask(spec: SceneSpec, idx: int, size: int) -> np.ndarray:
    """uint8 {0,1} mask of object `idx` at the given resolution."""
    if not 0 <= idx < len(spec.objects):
        raise ContractError(f"object index {idx} out of range")
    return object_coverage(spec.objects[idx], size).astype(np.uint8)


def bbox_of_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight inclusive (x1, y1, x2, y2) bound of a nonempty binary mask."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ContractError("mask is empty, no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def sample_scene(seed: int, n_objects: int | None = None) -> SceneSpec:
    """Rejection-sample a scene satisfying all placement constraints."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5)) if n_objects is None else n_objects
    if not 1 <= n <= 4:
        raise ContractError(f"object count must be 1..4, got {n}")
    while True:
        objects: list[SceneObject] = []
        counts: dict[tuple[str, str], int] = {}
        ok = True
        for _ in range(n):
            color = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
            shape = SHAPE_WORDS[int(rng.integers(len(SHAPE_WORDS)))]
            if counts.get((color, shape), 0) >= MAX_DUPLICATES:
                ok = False
                break
            size = float(rng.uniform(SIZE_MIN, SIZE_MAX))
            lo = size + EDGE_MARGIN
            placed = False
            for _ in range(400):
                cx = float(rng.uniform(lo, 1.0 - lo))
                cy = float(rng.uniform(lo, 1.0 - lo))
                if all(
                    np.hypot(cx - o.cx, cy - o.cy)
                    >= max(MIN_CENTER_DIST, size + o.size + 0.02)
                    for o in objects
                ):
                    placed = True
                    break
            if not placed:
                ok = False
                break
            objects.append(SceneObject(shape, color, cx, cy, size))
            counts[(color, shape)] = counts.get((color, shape), 0) + 1
        if ok:
            return SceneSpec(objects=objects, seed=seed)


def caption_of(spec: SceneSpec) -> str:
    """Caption listing every object in scene order."""
    return " and ".join(f"a {o.color} {o.shape}" for o in spec.objects)


def _spatial_qualifier(target: SceneObject, twin: SceneObject) -> str:
    if abs(target.cx - twin.cx) >= SPATIAL_DX_THRESHOLD:
        return "leftmost" if target.cx < twin.cx else "rightmost"
    return "topmost" if target.cy < twin.cy else "bottommost"


def referring_sentence(spec: SceneSpec, idx: int) -> str:
    """Shortest sentence that uniquely identifies object `idx`."""
    if not 0 <= idx < len(spec.objects):
        raise ContractError(f"object index {idx} out of range")
    target = spec.objects[idx]
    twins = [
        o for i, o in enumerate(spec.objects)
        if i != idx and o.color == target.color and o.shape == target.shape
    ]
    if not twins:
        return f"the {target.color} {target.shape}"
    qualifier = _spatial_qualifier(target, twins[0])
    return f"the {qualifier} {target.color} {target.shape}"


def referring_of(
    spec: SceneSpec, idx: int, target_size: int
) -> tuple[str, np.ndarray, tuple[int, int, int, int]]:
    """(sentence, mask, bbox) for object `idx` at target resolution."""
    sentence = referring_sentence(spec, idx)
    mask = object_mask(spec, idx, target_size)
    return sentence, mask, bbox_of_mask(mask)


def match_objects(spec: SceneSpec, sentence: str) -> list[int]:
    """Indices of objects a referring sentence denotes (predicate oracle)."""
    words = sentence.split()
    if words and words[0] in ("the", "a"):
        words = words[1:]
    qualifier = None
    if words and words[0] in SPATIAL_WORDS:
        qualifier = words[0]
        words = words[1:]
    if len(words) != 2:
        raise ContractError(f"unparseable referring sentence {sentence!r}")
    color, shape = words
    hits = [
        i for i, o in enumerate(spec.objects)
        if o.color == color and o.shape == shape
    ]
    if qualifier is None or len(hits) <= 1:
        return hits
    key = {
        "leftmost": lambda i: spec.objects[i].cx,
        "rightmost": lambda i: -spec.objects[i].cx,
        "topmost": lambda i: spec.objects[i].cy,
        "bottommost": lambda i: -spec.objects[i].cy,
    }[qualifier]
    return [min(hits, key=key)]
