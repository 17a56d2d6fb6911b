"""Command-line shell: every pipeline step is a subcommand, every run
directory gets a config copy, manifest, metrics log, and figures.

numpy must not be imported at module scope: PAE_LAB_THREADS has to land in
the BLAS environment variables before numpy first loads.
"""

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class CliUserError(Exception):
    """Invalid invocation or inputs; maps to exit 1."""


def _apply_thread_cap():
    cap = os.environ.get("PAE_LAB_THREADS")
    if cap is None:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise CliUserError(f"PAE_LAB_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        os.environ[var] = cap


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common.add_argument("--out", metavar="DIR", help="run directory (default runs/<command>)")

    p = argparse.ArgumentParser(
        prog="pae-lab",
        description="Desk-scale vision-language-model laboratory.",
    )
    p.add_argument("--dump-defaults", action="store_true",
                   help="print the full default config and exit")
    sub = p.add_subparsers(dest="cmd", metavar="command")

    sub.add_parser("pretrain-clip", parents=[common],
                   help="contrastive image-caption warm-up of the vision encoder")

    train = sub.add_parser("train", parents=[common],
                           help="run one pretraining stage")
    train.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    train.add_argument("--parent", metavar="CKPT",
                       help="checkpoint to start from (previous stage)")
    train.add_argument("--skip-stage1", action="store_true",
                       help="allow stage 2 without a stage-1 parent (forgetting demo)")

    seg = sub.add_parser("finetune-seg", parents=[common],
                         help="fine-tune on referring boxes and mask bits")
    seg.add_argument("--parent", metavar="CKPT", help="checkpoint to start from (scratch when omitted)")

    game = sub.add_parser("finetune-game", parents=[common],
                          help="imitation-learn the driving game from expert episodes")
    game.add_argument("--parent", metavar="CKPT", help="checkpoint to start from (scratch when omitted)")

    recon = sub.add_parser("eval-recon", parents=[common],
                           help="pixel-reconstruction error on held-out scenes")
    recon.add_argument("--checkpoint", metavar="CKPT", required=True)

    render = sub.add_parser("render-recon", parents=[common],
                            help="contact sheet: ground truth next to model reconstructions")
    render.add_argument("--frozen", metavar="CKPT", help="frozen-encoder checkpoint column")
    render.add_argument("--adapted", metavar="CKPT", help="adapted-encoder checkpoint column")

    evseg = sub.add_parser("eval-seg", parents=[common],
                           help="referring-segmentation cIoU and box precision")
    evseg.add_argument("--checkpoint", metavar="CKPT", required=True)

    play = sub.add_parser("play-game", parents=[common],
                          help="drive held-out rounds with a checkpoint policy")
    play.add_argument("--checkpoint", metavar="CKPT", required=True)
    play.add_argument("--baselines", action="store_true",
                      help="also score expert and random policies")

    sub.add_parser("grad-check", parents=[common],
                   help="finite-difference check of every op and the model loss")

    inspect = sub.add_parser("inspect-checkpoint", parents=[common],
                             help="print checkpoint header and verify its body hash")
    inspect.add_argument("path", metavar="CKPT")

    return p


# ---------------------------------------------------------------------------
# shared run plumbing
# ---------------------------------------------------------------------------

def _load_cfg(args):
    from .config import default_config, load_config

    if args.config is None:
        return default_config()
    path = Path(args.config)
    if not path.exists():
        raise CliUserError(f"config file not found: {path}")
    return load_config(path)


def _run_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / args.cmd
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_records(out: Path, cfg, manifest):
    (out / "config.txt").write_text(cfg.dump())
    manifest.save(out / "manifest.json")


def _load_checkpoint_or_die(path):
    from .errors import CheckpointError
    from .persist import load_checkpoint

    p = Path(path)
    if not p.exists():
        raise CliUserError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except CheckpointError as exc:
        raise CliUserError(f"cannot load {p}: {exc}") from exc


def _fresh_params(cfg, seed):
    from .model import init_params
    from .vocab import Vocabulary

    vocab = Vocabulary()
    # init_params attaches adapters itself when lora_rank > 0
    params = init_params(cfg.model_config(len(vocab)), seed=seed)
    return params, vocab


def _params_from_parent(args, cfg):
    """Parent checkpoint when given, else a fresh seeded model."""
    if getattr(args, "parent", None):
        params, tokens, header = _load_checkpoint_or_die(args.parent)
        from .vocab import Vocabulary

        return params, Vocabulary(tokens), header["body_sha256"]
    params, vocab = _fresh_params(cfg, args.seed)
    return params, vocab, ""


def _scene_pool(cfg, which: str):
    from .data import ScenePool

    base = cfg[f"data.{which}_seed_base"]
    count = cfg[f"data.{which}_scenes"]
    return ScenePool.build(
        seeds=range(base, base + count),
        image_size=cfg["model.image_size"],
        target_size=cfg["data.target_size"],
    )


def _render_loss_curve(out: Path):
    from .persist import MetricsLog
    from .report import loss_curve_figure

    records = MetricsLog(out / "metrics.log").read()
    if records:
        loss_curve_figure(records, out / "loss.png")


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def cmd_pretrain_clip(args) -> int:
    from .persist import MetricsLog, save_checkpoint
    from .train import RunManifest, contrastive_pretrain, retrieval_top1, window_means

    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, vocab = _fresh_params(cfg, args.seed)
    pool = _scene_pool(cfg, "train")
    metrics = MetricsLog(out / "metrics.log")
    cap_table, history = contrastive_pretrain(
        params,
        pool,
        vocab,
        steps=cfg["train.clip.steps"],
        batch=cfg["train.clip.batch"],
        lr=cfg["train.clip.lr"],
        temperature=cfg["train.clip.temperature"],
        seed=args.seed,
        metrics=metrics,
    )
    held_out = _scene_pool(cfg, "eval")
    top1 = retrieval_top1(params, cap_table, held_out, vocab)
    ckpt = out / "clip.ckpt"
    digest = save_checkpoint(params, ckpt, vocab.tokens)
    first, last = window_means(history)
    manifest = RunManifest(config_text=cfg.dump(), seed=args.seed)
    manifest.data = {"train_scenes": len(pool), "eval_scenes": len(held_out)}
    manifest.stages.append(
        {"name": "clip", "checkpoint": str(ckpt), "hash": digest,
         "parent": "", "final_loss": history[-1][1]}
    )
    _write_run_records(out, cfg, manifest)
    _render_loss_curve(out)
    print(f"clip: loss {first:.3f} -> {last:.3f} retrieval_top1={top1:.3f} checkpoint={ckpt}")
    return EXIT_OK


def _stage_guidance(stage: int) -> str:
    prev = stage - 1
    return (
        f"stage {stage} needs --parent pointing at a stage-{prev} checkpoint "
        f"(run `pae-lab train --stage {prev}` first"
        + (", or pass --skip-stage1 to adapt without it)" if stage == 2 else ")")
    )


def cmd_train(args) -> int:
    from .persist import MetricsLog
    from .train import RunManifest, make_stage_config, run_stage, window_means

    if args.stage >= 2 and not args.parent and not (args.stage == 2 and args.skip_stage1):
        raise CliUserError(_stage_guidance(args.stage))
    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, vocab, parent_hash = _params_from_parent(args, cfg)
    pool = _scene_pool(cfg, "train")
    stage = make_stage_config(cfg, f"stage{args.stage}")
    metrics = MetricsLog(out / "metrics.log")
    result = run_stage(params, stage, pool, vocab, out, seed=args.seed,
                       metrics=metrics, parent_hash=parent_hash)
    first, last = window_means(result.history)
    manifest = RunManifest(config_text=cfg.dump(), seed=args.seed)
    manifest.data = {"train_scenes": len(pool)}
    manifest.record_stage(stage.name, result, parent_hash)
    _write_run_records(out, cfg, manifest)
    _render_loss_curve(out)
    print(f"{stage.name}: loss {first:.3f} -> {last:.3f} checkpoint={result.checkpoint}")
    return EXIT_OK


def cmd_finetune_seg(args) -> int:
    from .persist import MetricsLog
    from .train import RunManifest, finetune_segmentation, window_means

    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, vocab, parent_hash = _params_from_parent(args, cfg)
    pool = _scene_pool(cfg, "train")
    metrics = MetricsLog(out / "metrics.log")
    result = finetune_segmentation(params, cfg, pool, vocab, out, seed=args.seed,
                                   metrics=metrics, parent_hash=parent_hash)
    first, last = window_means(result.history)
    manifest = RunManifest(config_text=cfg.dump(), seed=args.seed)
    manifest.data = {"train_scenes": len(pool)}
    manifest.record_stage("seg", result, parent_hash)
    _write_run_records(out, cfg, manifest)
    _render_loss_curve(out)
    print(f"seg: loss {first:.3f} -> {last:.3f} checkpoint={result.checkpoint}")
    return EXIT_OK


def cmd_finetune_game(args) -> int:
    from .evals import action_accuracy
    from .laneracer import expert_policy, run_episode
    from .persist import MetricsLog
    from .train import RunManifest, finetune_game, window_means

    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, vocab, parent_hash = _params_from_parent(args, cfg)
    base = cfg["game.train_seed_base"]
    episodes = [run_episode(s, expert_policy)
                for s in range(base, base + cfg["game.train_episodes"])]
    metrics = MetricsLog(out / "metrics.log")
    result = finetune_game(params, cfg, episodes, vocab, out, seed=args.seed,
                           metrics=metrics, parent_hash=parent_hash)
    eval_base = cfg["game.eval_seed_base"]
    held_out = [run_episode(s, expert_policy) for s in range(eval_base, eval_base + 3)]
    acc, failures = action_accuracy(params, vocab, held_out)
    first, last = window_means(result.history)
    manifest = RunManifest(config_text=cfg.dump(), seed=args.seed)
    manifest.data = {"train_episodes": len(episodes)}
    manifest.record_stage("game", result, parent_hash)
    _write_run_records(out, cfg, manifest)
    _render_loss_curve(out)
    print(f"game: loss {first:.3f} -> {last:.3f} held_out_action_acc={acc:.3f} "
          f"parse_failures={failures} checkpoint={result.checkpoint}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation commands
# ---------------------------------------------------------------------------

def cmd_eval_recon(args) -> int:
    from .evals import constant_baseline_re, evaluate_reconstruction
    from .report import write_jsonl

    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, tokens, _ = _load_checkpoint_or_die(args.checkpoint)
    from .vocab import Vocabulary

    vocab = Vocabulary(tokens)
    pool = _scene_pool(cfg, "eval")
    report = evaluate_reconstruction(params, vocab, pool.images,
                                     target_size=cfg["data.target_size"],
                                     chunk=cfg["eval.chunk"])
    _, baseline = constant_baseline_re(pool.targets)
    records = [
        {"image": i, "re": report.res[i], "re_scaled": report.res_scaled[i]}
        for i in range(len(pool))
    ]
    records.append(
        {"mean_re": report.mean_re, "mean_re_scaled": report.mean_re_scaled,
         "parse_failures": report.parse_failures, "baseline_re": baseline}
    )
    write_jsonl(out / "recon.jsonl", records)
    print(f"recon: mean_re={report.mean_re:.3f} mean_re_scaled={report.mean_re_scaled:.4f} "
          f"parse_failures={report.parse_failures} baseline_re={baseline:.3f}")
    return EXIT_OK


def cmd_render_recon(args) -> int:
    from .evals import evaluate_reconstruction
    from .report import recon_contact_sheet

    if not args.frozen and not args.adapted:
        raise CliUserError("render-recon needs --frozen and/or --adapted checkpoints")
    cfg = _load_cfg(args)
    out = _run_dir(args)
    pool = _scene_pool(cfg, "eval")
    from .vocab import Vocabulary

    columns = {}
    for label, path in (("frozen", args.frozen), ("adapted", args.adapted)):
        if not path:
            continue
        params, tokens, _ = _load_checkpoint_or_die(path)
        report = evaluate_reconstruction(params, Vocabulary(tokens), pool.images,
                                         target_size=cfg["data.target_size"],
                                         chunk=cfg["eval.chunk"])
        columns[label] = list(report.recons)
    sheet = recon_contact_sheet(list(pool.targets), columns, out / "recon_sheet.png",
                                ppm_dir=out / "recon_ppm")
    print(f"contact sheet: {sheet} ({', '.join(columns)} vs ground truth, "
          f"{len(pool)} images; tiles in {out / 'recon_ppm'})")
    return EXIT_OK


def cmd_eval_seg(args) -> int:
    from .evals import build_seg_eval_items, evaluate_segmentation
    from .report import write_jsonl
    from .vocab import Vocabulary

    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, tokens, _ = _load_checkpoint_or_die(args.checkpoint)
    vocab = Vocabulary(tokens)
    base = cfg["eval.seg_seed_base"]
    items = build_seg_eval_items(
        seeds=range(base, base + 4 * cfg["eval.seg_items"]),
        n_items=cfg["eval.seg_items"],
        image_size=cfg["model.image_size"],
        target_size=cfg["data.target_size"],
    )
    report = evaluate_segmentation(params, vocab, items, chunk=cfg["eval.chunk"])
    records = [
        {"item": i, "sentence": items[i].sentence, "iou": report.ious[i]}
        for i in range(len(items))
    ]
    records.append(
        {"ciou": report.ciou, "precision_at_50": report.precision,
         "bbox_fallbacks": report.bbox_fallbacks, "bit_failures": report.bit_failures}
    )
    write_jsonl(out / "seg.jsonl", records)
    print(f"seg: ciou={report.ciou:.4f} precision_at_50={report.precision:.4f} "
          f"items={report.n_items} bbox_fallbacks={report.bbox_fallbacks} "
          f"bit_failures={report.bit_failures}")
    return EXIT_OK


def cmd_play_game(args) -> int:
    from .evals import baseline_game_scores, eval_game
    from .report import game_score_chart, write_jsonl
    from .vocab import Vocabulary

    cfg = _load_cfg(args)
    out = _run_dir(args)
    params, tokens, _ = _load_checkpoint_or_die(args.checkpoint)
    vocab = Vocabulary(tokens)
    rounds = cfg["game.eval_rounds"]
    seed_base = cfg["game.eval_seed_base"]
    report = eval_game(params, vocab, n_rounds=rounds, seed_base=seed_base)
    scores = {"checkpoint": list(report.scores)}
    if args.baselines:
        scores["expert"] = baseline_game_scores("expert", rounds, seed_base)
        scores["random"] = baseline_game_scores("random", rounds, seed_base)
    records = [{"policy": name, "round": i, "score": s}
               for name, ss in scores.items() for i, s in enumerate(ss)]
    import numpy as np

    records.append({name + "_mean": float(np.mean(ss)) for name, ss in scores.items()})
    write_jsonl(out / "game.jsonl", records)
    game_score_chart(scores, out / "game_scores.png")
    mean = float(np.mean(scores["checkpoint"]))
    extra = "".join(
        f" {name}_mean={float(np.mean(ss)):.1f}" for name, ss in scores.items()
        if name != "checkpoint"
    )
    print(f"game: mean_reward={mean:.1f} rounds={rounds} "
          f"parse_failures={report.parse_failures}{extra}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# checks and inspection
# ---------------------------------------------------------------------------

def _op_grad_cases():
    """Small deterministic inputs for every differentiable op."""
    import numpy as np

    from . import tensor as T

    r = np.random.default_rng(7)

    def t(*shape):
        return T.Tensor(r.normal(0.0, 1.0, shape), requires_grad=True)

    def scalar(x):
        total = x
        while total.data.ndim:
            total = T.sum_axis(total, axis=0)
        return total

    labels3 = np.array([0, 2, 1])
    mask3 = np.array([True, True, False])
    w3 = np.array([0.5, 0.25, 0.25])
    ids = np.array([[1, 3], [2, 0]])
    slots = np.array([[1], [0]])
    bool_mask = np.tril(np.ones((3, 3), dtype=bool))[None, None]

    return [
        ("add", lambda a, b: scalar(T.add(a, b)), [t(3, 2), t(3, 2)]),
        ("sub", lambda a, b: scalar(T.sub(a, b)), [t(3, 2), t(3, 2)]),
        ("mul", lambda a, b: scalar(T.mul(a, b)), [t(3, 2), t(3, 2)]),
        ("scale", lambda a: scalar(T.scale(a, -1.7)), [t(4)]),
        ("reshape", lambda a: scalar(T.reshape(a, (6,))), [t(2, 3)]),
        ("transpose", lambda a: scalar(T.mul(T.transpose(a, (1, 0)), T.Tensor(np.arange(6.0).reshape(3, 2)))), [t(2, 3)]),
        ("slice_axis1", lambda a: scalar(T.slice_axis1(a, 1, 3)), [t(2, 4)]),
        ("sum_axis", lambda a: scalar(T.sum_axis(a, axis=1)), [t(2, 3)]),
        ("gelu", lambda a: scalar(T.gelu(a)), [t(5)]),
        ("layer_norm", lambda x, g, b: scalar(T.layer_norm(x, g, b)), [t(2, 4), t(4), t(4)]),
        ("l2_normalize", lambda a: scalar(T.mul(T.l2_normalize(a), T.Tensor(np.arange(6.0).reshape(2, 3)))), [t(2, 3)]),
        ("matmul", lambda a, b: scalar(T.matmul(a, b)), [t(2, 3), t(3, 2)]),
        ("bmm", lambda a, b: scalar(T.bmm(a, b)), [t(2, 2, 3), t(2, 3, 2)]),
        ("embedding_gather", lambda e: scalar(T.embedding_gather(e, ids)), [t(4, 3)]),
        ("slot_scatter", lambda x, v: scalar(T.slot_scatter(x, v, slots)), [t(2, 3, 2), t(2, 1, 2)]),
        ("masked_softmax", lambda a: scalar(T.mul(T.masked_softmax(a, bool_mask), T.Tensor(np.arange(9.0).reshape(1, 1, 3, 3)))), [t(1, 1, 3, 3)]),
        ("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, labels3, mask3, w3), [t(3, 5)]),
    ]


def _model_grad_error() -> float:
    """Finite-difference error of the full VQA loss wrt one leaf per group."""
    import numpy as np

    from . import tensor as T
    from .data import assemble_batch, sample_pvp_example, ScenePool
    from .model import ModelConfig, init_params, vqa_loss
    from .vocab import Vocabulary

    vocab = Vocabulary()
    cfg = ModelConfig(vocab_size=len(vocab), image_size=64, patch_size=32,
                      enc_dim=8, enc_layers=1, enc_heads=2, lm_dim=8,
                      lm_layers=1, lm_heads=2, context_len=96, lora_rank=2)
    params = init_params(cfg, seed=2)
    pool = ScenePool.build(seeds=range(2), image_size=64, target_size=16)
    rng = np.random.default_rng(0)
    examples = [sample_pvp_example(pool, rng, vocab, cfg) for _ in range(2)]
    batch = assemble_batch(examples, cfg, vocab.pad_id)

    leaves = [
        ("connector", "w"),
        ("encoder", "patch_b"),
        ("lm_lora", "blk0.q_a"),
        ("lm_lora", "blk0.o_b"),
        ("lm", "blk0.ln1_g"),
    ]

    def f(*tensors):
        saved = [params.groups[g][k] for g, k in leaves]
        for (g, k), t in zip(leaves, tensors):
            params.groups[g][k] = t
        try:
            return vqa_loss(params, batch.ids, batch.loss_mask, batch.pad_mask,
                            batch.images, batch.slot_positions, batch.n_images)
        finally:
            for (g, k), s in zip(leaves, saved):
                params.groups[g][k] = s

    inputs = [params.groups[g][k] for g, k in leaves]
    return T.grad_check(f, inputs, eps=1e-3)


def cmd_grad_check(args) -> int:
    from .tensor import grad_check

    worst_op = 0.0
    ok = True
    for name, f, inputs in _op_grad_cases():
        err = grad_check(f, inputs, eps=1e-3)
        worst_op = max(worst_op, err)
        flag = "ok" if err < 1e-3 else "FAIL"
        ok &= err < 1e-3
        print(f"{name:24s} max_rel_err={err:.2e}  {flag}")
    model_err = _model_grad_error()
    flag = "ok" if model_err < 5e-3 else "FAIL"
    ok &= model_err < 5e-3
    print(f"{'full model loss':24s} max_rel_err={model_err:.2e}  {flag}")
    print(f"grad-check: {'all passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_USER


def cmd_inspect_checkpoint(args) -> int:
    from .errors import CheckpointError
    from .persist import read_checkpoint_header

    path = Path(args.path)
    if not path.exists():
        raise CliUserError(f"checkpoint not found: {path}")
    try:
        header = read_checkpoint_header(path)
        params, tokens, _ = _load_checkpoint_or_die(path)
    except CheckpointError as exc:
        raise CliUserError(f"{path}: {exc}") from exc
    cfg = header["config"]
    print(f"checkpoint: {path}")
    print("format: magic PAEL, body hash verified")
    print(f"model: enc {cfg['enc_layers']}x{cfg['enc_dim']} lm {cfg['lm_layers']}x{cfg['lm_dim']} "
          f"patch {cfg['patch_size']} lora_rank {cfg['lora_rank']}")
    print(f"vocabulary: {len(tokens)} tokens")
    print(f"tensors: {len(header['tensors'])} ({params.param_count()} parameters)")
    print(f"parent: {header['parent'] or '(none)'}")
    print(f"created: {header['created']}")
    return EXIT_OK


_COMMANDS = {
    "pretrain-clip": cmd_pretrain_clip,
    "train": cmd_train,
    "finetune-seg": cmd_finetune_seg,
    "finetune-game": cmd_finetune_game,
    "eval-recon": cmd_eval_recon,
    "render-recon": cmd_render_recon,
    "eval-seg": cmd_eval_seg,
    "play-game": cmd_play_game,
    "grad-check": cmd_grad_check,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract reserves 2 for bugs
        return EXIT_OK if not exc.code else EXIT_USER
    try:
        _apply_thread_cap()
        if args.dump_defaults:
            from .config import default_config

            sys.stdout.write(default_config().dump())
            return EXIT_OK
        if not args.cmd:
            parser.print_usage()
            return EXIT_USER
        return _COMMANDS[args.cmd](args)
    except CliUserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001  (boundary: map library errors to codes)
        from .errors import ConfigError, PaeLabError

        if isinstance(exc, ConfigError):
            for offense in exc.offenses:
                print(f"config error: {offense}", file=sys.stderr)
            return EXIT_USER
        if isinstance(exc, (FileNotFoundError, PermissionError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USER
        name = type(exc).__name__
        print(f"internal error: {name}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
