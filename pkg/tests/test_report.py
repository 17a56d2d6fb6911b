"""Report outputs: JSONL round-trips and figure files that actually render."""

import numpy as np
import pytest

from pae_lab.errors import ContractError
from pae_lab.persist import read_image
from pae_lab.report import (
    game_score_chart,
    loss_curve_figure,
    read_jsonl,
    recon_contact_sheet,
    seg_overlay_figure,
    write_jsonl,
)


def test_jsonl_round_trip(tmp_path):
    records = [{"b": 2, "a": 1}, {"x": [1, 2], "y": "s"}]
    path = write_jsonl(tmp_path / "r.jsonl", records)
    assert read_jsonl(path) == records


def test_jsonl_deterministic_bytes(tmp_path):
    records = [{"b": 2, "a": 1}]
    p1 = write_jsonl(tmp_path / "one.jsonl", records)
    p2 = write_jsonl(tmp_path / "two.jsonl", [{"a": 1, "b": 2}])
    assert p1.read_bytes() == p2.read_bytes()


def test_jsonl_empty(tmp_path):
    path = write_jsonl(tmp_path / "empty.jsonl", [])
    assert path.read_bytes() == b""
    assert read_jsonl(path) == []


def test_loss_curves_render(tmp_path):
    records = [
        {"step": str(s), "stage": stage, "loss": f"{2.0 - 0.01 * s:.6f}"}
        for stage in ("stage1", "stage2")
        for s in range(0, 100, 25)
    ]
    out = loss_curve_figure(records, tmp_path / "loss.png")
    assert out.exists() and out.stat().st_size > 1000
    with pytest.raises(ContractError):
        loss_curve_figure([], tmp_path / "none.png")


def test_contact_sheet_renders_and_writes_ppms(tmp_path):
    rng = np.random.default_rng(0)
    gt = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(2)]
    cols = {
        "frozen": [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(2)],
        "adapted": [g.copy() for g in gt],
    }
    out = recon_contact_sheet(gt, cols, tmp_path / "sheet.png", ppm_dir=tmp_path / "ppm")
    assert out.exists() and out.stat().st_size > 1000
    tile = read_image(tmp_path / "ppm" / "adapted_0.ppm")
    assert np.array_equal(tile, gt[0])
    assert (tmp_path / "ppm" / "ground_truth_1.ppm").exists()


def test_contact_sheet_validates_columns(tmp_path):
    gt = [np.zeros((4, 4, 3), np.uint8)]
    with pytest.raises(ContractError):
        recon_contact_sheet(gt, {"short": []}, tmp_path / "x.png")
    with pytest.raises(ContractError):
        recon_contact_sheet([], {}, tmp_path / "x.png")


def test_game_chart_renders(tmp_path):
    out = game_score_chart(
        {"expert": [98.0, 99.5], "imitator": [60.0, 72.0], "random": [15.0, 12.0]},
        tmp_path / "game.png",
    )
    assert out.exists() and out.stat().st_size > 1000
    with pytest.raises(ContractError):
        game_score_chart({}, tmp_path / "none.png")


def test_seg_overlay_renders(tmp_path):
    rng = np.random.default_rng(1)
    images = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)]
    masks = [rng.integers(0, 2, (16, 16)).astype(np.uint8)]
    preds = [rng.integers(0, 2, (16, 16)).astype(np.uint8)]
    out = seg_overlay_figure(images, masks, preds, ["the red box"], tmp_path / "seg.png")
    assert out.exists() and out.stat().st_size > 1000
    with pytest.raises(ContractError):
        seg_overlay_figure(images, masks, [], ["x"], tmp_path / "bad.png")
