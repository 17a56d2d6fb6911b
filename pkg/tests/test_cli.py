"""CLI behavior: exit codes, error guidance, and the full micro pipeline."""

import os

import pytest

from pae_lab.cli import main

MICRO_CFG = """\
model.image_size = 32
model.patch_size = 16
model.enc_dim = 32
model.enc_layers = 1
model.enc_heads = 2
model.lm_dim = 32
model.lm_layers = 1
model.lm_heads = 2
model.context_len = 96
model.lora_rank = 2
train.log_every = 2
train.clip.steps = 6
train.clip.batch = 8
train.stage1.steps = 6
train.stage1.batch = 4
train.stage1.warmup = 1
train.stage2.steps = 6
train.stage2.batch = 4
train.stage2.warmup = 1
train.stage3.steps = 6
train.stage3.batch = 4
train.stage3.warmup = 1
train.seg.steps = 6
train.seg.batch = 4
train.seg.warmup = 1
data.train_scenes = 10
data.eval_scenes = 2
data.target_size = 8
eval.seg_items = 2
eval.chunk = 64
"""

GAME_CFG = """\
model.image_size = 64
model.patch_size = 32
model.enc_dim = 32
model.enc_layers = 1
model.enc_heads = 2
model.lm_dim = 32
model.lm_layers = 1
model.lm_heads = 2
model.context_len = 96
model.lora_rank = 2
train.log_every = 2
train.game.steps = 4
train.game.batch = 4
train.game.warmup = 1
game.train_episodes = 2
"""


@pytest.fixture(scope="module")
def micro_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.cfg"
    path.write_text(MICRO_CFG)
    return str(path)


def test_dump_defaults_round_trips(capsys):
    from pae_lab.config import parse_config_text

    assert main(["--dump-defaults"]) == 0
    text = capsys.readouterr().out
    cfg = parse_config_text(text)
    assert cfg.dump() == text


def test_no_command_is_user_error():
    assert main([]) == 1


def test_unknown_flag_is_user_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main(["--definitely-not-a-flag"]) == 1


def test_help_exits_zero():
    assert main(["--help"]) == 0


def test_unknown_subcommand_is_user_error():
    assert main(["launch-rockets"]) == 1


def test_stage2_without_parent_gets_guidance(capsys, tmp_path):
    code = main(["train", "--stage", "2", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 1
    assert "--parent" in err and "stage 1" in err.replace("stage-1", "stage 1")


def test_stage3_without_parent_is_user_error(tmp_path):
    assert main(["train", "--stage", "3", "--out", str(tmp_path)]) == 1


def test_missing_config_file_is_user_error(tmp_path, capsys):
    code = main(["eval-recon", "--checkpoint", "x.ckpt",
                 "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)])
    assert code == 1


def test_config_offenses_reported_one_per_line(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.patch_size = 0\nno.such.key = 1\ntrain.log_every = zero\n")
    code = main(["pretrain-clip", "--config", str(bad), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 1
    assert err.count("config error:") == 3


def test_missing_checkpoint_is_user_error(tmp_path, capsys):
    code = main(["eval-recon", "--checkpoint", str(tmp_path / "no.ckpt"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_corrupt_checkpoint_is_user_error(tmp_path, capsys):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"NOPE this is not a checkpoint")
    assert main(["inspect-checkpoint", str(junk), "--out", str(tmp_path)]) == 1


def test_thread_cap_rejects_garbage(monkeypatch, tmp_path):
    monkeypatch.setenv("PAE_LAB_THREADS", "many")
    assert main(["--dump-defaults"]) == 1


def test_thread_cap_sets_blas_env(monkeypatch):
    monkeypatch.setenv("PAE_LAB_THREADS", "2")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert main(["--dump-defaults"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"


def test_render_recon_needs_a_column(tmp_path):
    assert main(["render-recon", "--out", str(tmp_path)]) == 1


def test_micro_pipeline_end_to_end(micro_cfg_path, tmp_path, capsys):
    """clip -> stage1 -> stage2 -> stage3 -> seg, then the eval commands."""
    root = tmp_path

    def run(*argv):
        code = main(list(argv))
        out = capsys.readouterr()
        assert code == 0, f"{argv}: {out.err or out.out}"
        return out.out

    out = run("pretrain-clip", "--config", micro_cfg_path,
              "--out", str(root / "clip"))
    assert "retrieval_top1=" in out
    clip = root / "clip" / "clip.ckpt"
    assert clip.exists()
    for name in ("config.txt", "manifest.json", "metrics.log", "loss.png"):
        assert (root / "clip" / name).exists()

    run("train", "--stage", "1", "--config", micro_cfg_path,
        "--parent", str(clip), "--out", str(root / "s1"))
    s1 = root / "s1" / "stage1.ckpt"
    assert s1.exists()

    run("train", "--stage", "2", "--config", micro_cfg_path,
        "--parent", str(s1), "--out", str(root / "s2"))
    s2 = root / "s2" / "stage2.ckpt"

    run("train", "--stage", "3", "--config", micro_cfg_path,
        "--parent", str(s2), "--out", str(root / "s3"))
    s3 = root / "s3" / "stage3.ckpt"

    run("finetune-seg", "--config", micro_cfg_path,
        "--parent", str(s3), "--out", str(root / "seg"))
    seg = root / "seg" / "seg.ckpt"
    assert seg.exists()

    out = run("eval-recon", "--checkpoint", str(s3),
              "--config", micro_cfg_path, "--out", str(root / "er"))
    assert "mean_re=" in out and "parse_failures=" in out
    assert (root / "er" / "recon.jsonl").exists()

    out = run("render-recon", "--frozen", str(s1), "--adapted", str(s2),
              "--config", micro_cfg_path, "--out", str(root / "rr"))
    assert (root / "rr" / "recon_sheet.png").exists()
    assert (root / "rr" / "recon_ppm" / "ground_truth_0.ppm").exists()
    assert (root / "rr" / "recon_ppm" / "adapted_1.ppm").exists()

    out = run("eval-seg", "--checkpoint", str(seg),
              "--config", micro_cfg_path, "--out", str(root / "es"))
    assert "ciou=" in out
    assert (root / "es" / "seg.jsonl").exists()

    out = run("inspect-checkpoint", str(s2), "--out", str(root / "ins"))
    assert "body hash verified" in out
    assert "parent:" in out

    # the stage-2 checkpoint records its stage-1 parent
    from pae_lab.persist import read_checkpoint_header, checkpoint_hash

    header = read_checkpoint_header(s2)
    assert header["parent"] == read_checkpoint_header(s2)["parent"]
    assert header["parent"] == checkpoint_hash_of(s1)


def checkpoint_hash_of(path):
    from pae_lab.persist import read_checkpoint_header

    return read_checkpoint_header(path)["body_sha256"]


def test_stage2_skip_stage1_runs(micro_cfg_path, tmp_path):
    code = main(["train", "--stage", "2", "--skip-stage1",
                 "--config", micro_cfg_path, "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "stage2.ckpt").exists()


def test_game_finetune_cli(tmp_path):
    cfg = tmp_path / "game.cfg"
    cfg.write_text(GAME_CFG)
    code = main(["finetune-game", "--config", str(cfg),
                 "--out", str(tmp_path / "game")])
    assert code == 0
    assert (tmp_path / "game" / "game.ckpt").exists()


def test_grad_check_passes(capsys, tmp_path):
    code = main(["grad-check", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "all passed" in out
    assert "softmax_cross_entropy" in out
    assert "full model loss" in out
