"""Command-line entry points binding the pipeline together.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 check failure.
Every subcommand that writes outputs also writes its resolved configuration
as a flat key=value file next to them.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, data, fusion, metrics, nn
from .data import CheckpointError, VolumeFormatError
from .nn import ModelConfig
from .tensor import ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK = 4

PAPER_SCALE_BASE = 32
PUBLISHED_FUSE_PARAM_COUNT = 2_123_211


def _default_seed():
    env = os.environ.get("FUSESEG_SEED")
    return int(env) if env else 0


def _write_config(out_dir, args, extra=None):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if extra:
        resolved.update(extra)
    lines = [f"{k}={v}" for k, v in sorted(resolved.items())]
    Path(out_dir, "config.txt").write_text("\n".join(lines) + "\n")


def _model_config(args):
    return ModelConfig(
        base_channels=args.base_channels,
        heads=args.heads,
        dropout_p=args.dropout,
        num_classes=args.num_classes,
    )


def _parse_alpha_mode(text):
    if text == "eq5" or text == "schedule":
        return text
    if text.startswith("constant:"):
        v = float(text.split(":", 1)[1])
        if not 0.0 < v <= 1.0:
            raise ValueError(f"constant alpha must be in (0, 1], got {v}")
        return ("constant", v)
    raise ValueError(f"alpha mode must be eq5, schedule, or constant:<v>; got {text!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(1, args.count + 1):
        spec = data.PhantomSpec(dims=(args.dims,) * 3, seed=args.seed + i - 1)
        t1, t2, labels = data.generate_phantom(spec)
        data.save_subject(out, i, t1, t2, labels)
    _write_config(out, args)
    print(f"wrote {3 * args.count} volumes for {args.count} subjects to {out}")
    return EXIT_OK


def cmd_train(args):
    config = _model_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subjects = data.load_subjects(args.data)
    rng = np.random.default_rng(args.seed)
    alpha_mode = _parse_alpha_mode(args.alpha_mode)

    if args.role in ("t1", "t2"):
        weights = nn.build_model(config, rng)
        weights, rows = fusion.train_teacher(
            config,
            weights,
            subjects,
            args.role,
            epochs=args.epochs,
            patches_per_epoch=args.patches,
            patch_size=args.patch_size,
            batch=args.batch,
            lr=args.lr,
            rng=rng,
            seed=args.seed,
        )
        data.save_checkpoint(out / "checkpoint", weights, config)
    elif args.role == "fuse":
        sequential = args.tm1 is not None or args.tm2 is not None
        if sequential:
            if args.tm1 is None or args.tm2 is None:
                raise ValueError("sequential fuse training needs both --tm1 and --tm2 checkpoints")
            tm1_w, tm1_cfg = data.load_checkpoint(args.tm1)
            tm2_w, _ = data.load_checkpoint(args.tm2)
            config = tm1_cfg
            fuse_w = tm1_w.copy()  # shared shapes; starting point is immediately refused
        else:
            init = nn.build_model(config, rng)
            tm1_w, tm2_w, fuse_w = init.copy(), init.copy(), init.copy()
        fuse_w, _, rows = fusion.train_fuse(
            config,
            fuse_w,
            tm1_w,
            tm2_w,
            subjects,
            epochs=args.epochs,
            patches_per_epoch=args.patches,
            patch_size=args.patch_size,
            batch=args.batch,
            lr=args.lr,
            alpha_mode=alpha_mode,
            alpha_ramp_iters=args.alpha_ramp,
            fusion_mode=args.fusion_mode,
            teacher_step_every=args.teacher_step_every,
            joint=not sequential,
            rng=rng,
            seed=args.seed,
        )
        data.save_checkpoint(out / "checkpoint", fuse_w, config)
        if not sequential:
            data.save_checkpoint(out / "tm1", tm1_w, config)
            data.save_checkpoint(out / "tm2", tm2_w, config)
    else:
        raise ValueError(f"unknown role {args.role!r}")

    fusion.write_metrics_csv(out / "metrics.csv", rows)
    _write_config(out, args)
    print(f"trained role={args.role}; checkpoint and metrics.csv under {out}")
    return EXIT_OK


def cmd_eval(args):
    weights, config = data.load_checkpoint(args.checkpoint)
    subjects = data.load_subjects(args.data)
    if args.step > args.patch_size:
        raise ValueError(f"overlapping step {args.step} must not exceed patch size {args.patch_size}")
    all_dices = {}
    for i, subject in enumerate(subjects, start=1):
        d = fusion.evaluate_subject(
            config, weights, subject, patch_size=args.patch_size, step=args.step
        )
        all_dices[f"subj{i:02d}"] = {1: d[0], 2: d[1], 3: d[2]}
    print(metrics.format_report(all_dices))
    return EXIT_OK


def cmd_gradcheck(args):
    results = checks.run_all(args.seed)
    failed = False
    for r in results:
        status = "PASS" if r["ok"] else "FAIL"
        print(f"{status}  {r['name']:<24} max_rel_err={r['max_err']:.3e}  tol={r['tol']:.0e}")
        failed = failed or not r["ok"]
    return EXIT_CHECK if failed else EXIT_OK


def cmd_paramcount(args):
    for label, base in (("toy", args.base_channels), ("paper-scale", PAPER_SCALE_BASE)):
        config = ModelConfig(base_channels=base)
        weights = nn.build_model(config, np.random.default_rng(0))
        stages, total = nn.parameter_count(weights)
        print(f"{label} (base_channels={base}):")
        for stage, count in stages.items():
            print(f"  {stage:<8} {count:>10,}")
        print(f"  {'total':<8} {total:>10,}")
    print(
        f"published fuse-model reference count: {PUBLISHED_FUSE_PARAM_COUNT:,}. "
        "Our count differs by design: the published description fixes neither the "
        "per-block channel widths nor the exact layer composition, and its teacher "
        "and fuse counts disagree even though weight fusion requires identical shapes, "
        "so this implementation uses a documented channel schedule instead of chasing "
        "that total."
    )
    return EXIT_OK


def cmd_ablate(args):
    config = _model_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subjects = data.load_subjects(args.data)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else [
        round(0.1 * i, 1) for i in range(1, 10)
    ]
    results = fusion.ablation_alpha(
        config,
        subjects,
        alphas,
        epochs=args.epochs,
        patches_per_epoch=args.patches,
        patch_size=args.patch_size,
        batch=args.batch,
        lr=args.lr,
        fusion_mode=args.fusion_mode,
        seed=args.seed,
        teacher_patches_per_epoch=args.teacher_patches,
    )
    fusion.write_ablation_csv(out / "ablation.csv", results)
    _write_config(out, args)
    for row in results:
        print(
            f"alpha={row['alpha']:>4}  CSF={row['dice_csf']:.4f}  GM={row['dice_gm']:.4f}  "
            f"WM={row['dice_wm']:.4f}  mean={row['dice_mean']:.4f}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_model_args(p):
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--num-classes", type=int, default=4)


def _add_train_args(p):
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patches", type=int, default=2000)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser():
    parser = argparse.ArgumentParser(prog="fuseseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic phantom subjects")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a teacher or the fuse model")
    p.add_argument("--role", choices=["t1", "t2", "fuse"], required=True)
    _add_train_args(p)
    _add_model_args(p)
    p.add_argument("--alpha-mode", default="eq5")
    p.add_argument(
        "--alpha-ramp",
        type=int,
        help="schedule mode: iterations until alpha saturates at 1 (default: the whole run)",
    )
    p.add_argument("--fusion-mode", choices=["sum", "mean"], default="sum")
    p.add_argument(
        "--teacher-step-every",
        type=int,
        default=1,
        help="joint mode: teachers advance one step every N fuse iterations",
    )
    p.add_argument("--tm1", help="teacher 1 checkpoint (sequential fuse mode)")
    p.add_argument("--tm2", help="teacher 2 checkpoint (sequential fuse mode)")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="stitched full-volume evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--step", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("paramcount", help="per-stage and total parameter counts")
    p.add_argument("--base-channels", type=int, default=8)
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("ablate", help="constant-vs-dynamic alpha sweep")
    _add_train_args(p)
    _add_model_args(p)
    p.add_argument("--alphas", help="comma-separated constants (default 0.1..0.9)")
    p.add_argument("--fusion-mode", choices=["sum", "mean"], default="sum")
    p.add_argument(
        "--teacher-patches",
        type=int,
        help="teacher pretraining patches per epoch (default: same as --patches)",
    )
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VolumeFormatError, CheckpointError, FileNotFoundError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
