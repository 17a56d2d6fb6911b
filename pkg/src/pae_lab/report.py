"""Report rendering: delimited JSONL records plus matplotlib figures.

Every eval path writes machine-readable lines first and figures second, so
a truncated render never loses the numbers.
"""

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ContractError
from .persist import write_image


def write_jsonl(path, records: list[dict]) -> Path:
    """One sorted-key JSON object per line; deterministic bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r, sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_jsonl(path) -> list[dict]:
    text = Path(path).read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve_figure(records: list[dict], path) -> Path:
    """Loss-vs-step curves from metrics-log records, one line per stage."""
    if not records:
        raise ContractError("no metric records to plot")
    stages: dict[str, tuple[list, list]] = {}
    for r in records:
        xs, ys = stages.setdefault(r["stage"], ([], []))
        xs.append(int(r["step"]))
        ys.append(float(r["loss"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage, (xs, ys) in stages.items():
        ax.plot(xs, ys, label=stage, linewidth=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("loss by stage")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def _upscale(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def recon_contact_sheet(
    ground_truth: list[np.ndarray],
    columns: dict[str, list[np.ndarray]],
    path,
    ppm_dir=None,
) -> Path:
    """Side-by-side reconstruction grid: ground truth next to each model's
    predictions, one row per evaluation image.

    `columns` maps a column label ("frozen", "adapted", ...) to one
    reconstruction per ground-truth image. With `ppm_dir`, every tile is also
    written as a raw PPM alongside the figure.
    """
    n = len(ground_truth)
    if n == 0:
        raise ContractError("contact sheet needs at least one image")
    for label, recons in columns.items():
        if len(recons) != n:
            raise ContractError(f"column {label!r} has {len(recons)} images, expected {n}")
    labels = ["ground truth"] + list(columns)
    grids = [ground_truth] + [columns[k] for k in columns]
    if ppm_dir is not None:
        ppm_dir = Path(ppm_dir)
        ppm_dir.mkdir(parents=True, exist_ok=True)
        for label, col in zip(labels, grids):
            slug = label.replace(" ", "_")
            for i, im in enumerate(col):
                write_image(np.asarray(im, dtype=np.uint8), ppm_dir / f"{slug}_{i}.ppm")
    fig, axes = plt.subplots(
        n, len(labels), figsize=(1.6 * len(labels), 1.6 * n), squeeze=False
    )
    for col, (label, images) in enumerate(zip(labels, grids)):
        axes[0][col].set_title(label, fontsize=9)
        for row, im in enumerate(images):
            ax = axes[row][col]
            ax.imshow(_upscale(np.asarray(im, dtype=np.uint8), 8))
            ax.set_xticks([])
            ax.set_yticks([])
    return _save(fig, path)


def game_score_chart(scores: dict[str, list[float]], path) -> Path:
    """Mean-reward bars with per-round scatter, one bar per policy."""
    if not scores:
        raise ContractError("no game scores to plot")
    names = list(scores)
    means = [float(np.mean(scores[n])) for n in names]
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 4))
    xs = np.arange(len(names))
    ax.bar(xs, means, color="#4878b0", width=0.6)
    for i, name in enumerate(names):
        pts = np.asarray(scores[name], dtype=float)
        ax.plot(np.full(len(pts), xs[i]) + np.linspace(-0.15, 0.15, len(pts)),
                pts, "k.", markersize=4, alpha=0.6)
    ax.set_xticks(xs)
    ax.set_xticklabels(names)
    ax.set_ylabel("episode reward")
    ax.set_title("mean reward by policy")
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)


def seg_overlay_figure(
    images: list[np.ndarray],
    gt_masks: list[np.ndarray],
    pred_masks: list[np.ndarray],
    sentences: list[str],
    path,
) -> Path:
    """Referred-object masks: image, ground-truth mask, predicted mask."""
    n = len(images)
    if not (n and len(gt_masks) == n and len(pred_masks) == n and len(sentences) == n):
        raise ContractError("overlay inputs must be equal-length and non-empty")
    fig, axes = plt.subplots(n, 3, figsize=(5.4, 1.8 * n), squeeze=False)
    for col, title in enumerate(("image", "target mask", "predicted mask")):
        axes[0][col].set_title(title, fontsize=9)
    for row in range(n):
        axes[row][0].imshow(images[row])
        axes[row][0].set_ylabel(sentences[row], fontsize=6)
        axes[row][1].imshow(gt_masks[row], cmap="gray", vmin=0, vmax=1)
        axes[row][2].imshow(pred_masks[row], cmap="gray", vmin=0, vmax=1)
        for col in range(3):
            axes[row][col].set_xticks([])
            axes[row][col].set_yticks([])
    return _save(fig, path)
