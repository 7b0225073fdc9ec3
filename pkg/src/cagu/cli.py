"""Command-line surface.

Subcommands: gen, train, eval, sweep-snr, sweep-beta, ablate, gradcheck,
export. Exit codes: 0 success, 2 validation failure, 1 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import TrainConfig
from .errors import CaguError, ConfigError, FormatError, ShapeError
from .hsi import SynthSpec, generate_synthetic, read_container, write_container
from .train import (evaluate_checkpoint, export_abundance_maps, gradcheck,
                    load_checkpoint, run_ablation, run_beta_sweep,
                    run_snr_sweep, train)
from . import decoder as dec


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--k-steps", type=int, default=3)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--ablation", choices=("none", "static", "dynamic"),
                   default="dynamic")
    p.add_argument("--seed", type=int, default=0)


def _config_from_args(args, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
        beta=args.beta, k_steps=args.k_steps, radius=args.radius,
        patch_size=args.patch_size, seed=args.seed,
        ablation_mode=args.ablation, **overrides)
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cagu",
        description="Hyperspectral unmixing with transformer features and "
                    "content-adaptive graph refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic scene container")
    gen.add_argument("--height", type=int, required=True)
    gen.add_argument("--width", type=int, required=True)
    gen.add_argument("--bands", type=int, required=True)
    gen.add_argument("--endmembers", type=int, required=True)
    gen.add_argument("--snr", type=float, default=30.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--alpha", type=float, default=1.0,
                     help="Dirichlet concentration for abundances")
    gen.add_argument("--no-purity", action="store_true",
                     help="skip planting pure pixels")

    tr = sub.add_parser("train", help="train on a scene container")
    tr.add_argument("--data", required=True)
    _add_train_flags(tr)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--resume", action="store_true",
                    help="continue from the checkpoint file")
    tr.add_argument("--endmembers", type=int, default=None,
                    help="override the endmember count (needed when the "
                         "scene has no ground truth)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint against a scene")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out-dir", required=True)

    sw = sub.add_parser("sweep-snr", help="train across noise levels")
    sw.add_argument("--snrs", type=_float_list, default=[10.0, 20.0, 30.0, 40.0])
    sw.add_argument("--seeds", type=int, default=3,
                    help="number of seeds per noise level")
    _add_train_flags(sw)
    sw.add_argument("--out", default=None, help="CSV path (default: stdout)")

    sb = sub.add_parser("sweep-beta", help="train across residual strengths")
    sb.add_argument("--betas", type=_float_list,
                    default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    sb.add_argument("--seeds", type=int, default=1)
    _add_train_flags(sb)
    sb.add_argument("--out", default=None)

    ab = sub.add_parser("ablate", help="compare no-graph / static / dynamic")
    ab.add_argument("--seeds", type=int, default=1)
    ab.add_argument("--snr", type=float, default=80.0)
    _add_train_flags(ab)
    ab.add_argument("--out", default=None)

    gc = sub.add_parser("gradcheck",
                        help="finite-difference check of every gradient group")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-4)

    ex = sub.add_parser("export", help="write abundance PGMs and metrics CSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--out-dir", required=True)

    return parser


def _emit(text: str, out_path):
    if out_path:
        Path(out_path).write_text(text)
        print(f"wrote {out_path}")
    else:
        print(text, end="")


def _dispatch(args) -> int:
    if args.command == "gen":
        spec = SynthSpec(height=args.height, width=args.width,
                         bands=args.bands, endmembers=args.endmembers,
                         snr_db=args.snr, seed=args.seed,
                         dirichlet_alpha=args.alpha,
                         purity_pixels=not args.no_purity)
        write_container(generate_synthetic(spec), args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "train":
        config = _config_from_args(
            args, data_path=args.data, checkpoint_path=args.checkpoint,
            n_endmembers=args.endmembers)
        result = train(config,
                       resume_from=args.checkpoint if args.resume else None)
        print(f"final loss {result.checkpoint.final_loss:.6f} "
              f"after {config.epochs} epochs; wrote {args.checkpoint}")
        return 0

    if args.command == "eval":
        ckpt = load_checkpoint(args.checkpoint)
        cube = read_container(args.data)
        outputs, result = evaluate_checkpoint(ckpt, cube)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if result is None:
            print("scene has no ground truth; writing reconstruction stats only")
            (out_dir / "metrics.csv").write_text(
                "dataset,seed,final_loss\n"
                f"{Path(args.data).stem},{ckpt.config.seed},"
                f"{ckpt.final_loss:.6f}\n")
        else:
            rows = dec.metrics_csv_rows(result, Path(args.data).stem,
                                        ckpt.config.seed)
            (out_dir / "metrics.csv").write_text("\n".join(rows) + "\n")
            print(f"mean_sad {result.mean_sad:.4f} rmse {result.rmse:.4f}")
        return 0

    if args.command == "sweep-snr":
        config = _config_from_args(args)
        report = run_snr_sweep(config, args.snrs, range(args.seeds))
        _emit(report.to_csv(), args.out)
        return 0 if report.summary["trend_ok"] else 1

    if args.command == "sweep-beta":
        config = _config_from_args(args)
        report = run_beta_sweep(config, args.betas, range(args.seeds))
        _emit(report.to_csv(), args.out)
        return 0

    if args.command == "ablate":
        config = _config_from_args(args)
        report = run_ablation(config, range(args.seeds), snr_db=args.snr)
        _emit(report.to_csv(), args.out)
        return 0

    if args.command == "gradcheck":
        report = gradcheck()
        for line in report.lines():
            print(line)
        return 0 if report.passed else 1

    if args.command == "export":
        ckpt = load_checkpoint(args.checkpoint)
        cube = read_container(args.data)
        for path in export_abundance_maps(ckpt, cube, args.out_dir):
            print(f"wrote {path}")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse validation failure
        return 2 if exc.code not in (0, None) else 0
    try:
        return _dispatch(args)
    except (ConfigError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CaguError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
