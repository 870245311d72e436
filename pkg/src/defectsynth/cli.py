"""Command-line entry points.

Subcommands: gen-data, pretrain-base, train-adapter, sample, eval,
gradcheck. Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config, serialize_config
from .errors import FrozenParameterError, NumericalError, ValidationError
from .evaluation import run_eval
from .gradcheck import run_all
from .pipeline import (
    build_components,
    cmd_gen_data,
    cmd_pretrain_base,
    cmd_sample,
    cmd_train_adapter,
    load_trained,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--threads", type=int, default=None,
                   help="cap internal parallelism (results are identical for any value)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="defectsynth",
        description="Toy mask-guided latent-diffusion pipeline for synthetic surface defects.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural dataset")
    _add_common(p)

    p = sub.add_parser("pretrain-base", help="pre-train the text-conditioned denoiser")
    _add_common(p)

    p = sub.add_parser("train-adapter", help="train the cross-modal adapter")
    _add_common(p)

    p = sub.add_parser("sample", help="sample defect images from prompt pairs")
    _add_common(p)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--per-row", type=int, default=1)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--base-only", action="store_true",
                   help="sample the base model without the adapter")

    p = sub.add_parser("eval", help="run the metric suite")
    _add_common(p)
    p.add_argument("--quick-count", type=int, default=16)
    p.add_argument("--downstream", action="store_true",
                   help="train a segmenter on synthesized pairs (slow)")
    p.add_argument("--downstream-count", type=int, default=500)
    p.add_argument("--seg-steps", type=int, default=600)
    p.add_argument("--sweep", action="store_true", help="guidance-step and gamma sweep")

    p = sub.add_parser("gradcheck", help="run all finite-difference suites")
    _add_common(p)
    p.add_argument("--configs", type=int, default=20)

    p = sub.add_parser("show-config", help="print the effective configuration")
    _add_common(p)
    return ap


def _config_from(args) -> "RunConfig":
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = max(1, args.threads)
    return load_config(args.config, **overrides)


def run(args) -> int:
    cfg = _config_from(args)
    out: Path = args.out
    if args.command == "show-config":
        sys.stdout.write(serialize_config(cfg))
        return EXIT_OK
    if args.command == "gen-data":
        manifest = cmd_gen_data(cfg, out, force=args.force)
        print(f"dataset written: {manifest}")
        return EXIT_OK
    if args.command == "pretrain-base":
        out.mkdir(parents=True, exist_ok=True)
        ckpt, logs = cmd_pretrain_base(cfg, out)
        print(f"base checkpoint: {ckpt} (final ma loss {logs[-1].ma_loss:.4f})")
        return EXIT_OK
    if args.command == "train-adapter":
        ckpt, logs = cmd_train_adapter(cfg, out)
        print(f"adapter checkpoint: {ckpt} (final ma loss {logs[-1].ma_loss:.4f}, "
              f"mean E_0 {logs[-1].e0:.4f} -> E_Tg {logs[-1].etg:.4f})")
        return EXIT_OK
    if args.command == "sample":
        sample_dir = cmd_sample(cfg, out, count=args.count, per_row=args.per_row,
                                split=args.split, base_only=args.base_only)
        print(f"samples written under {sample_dir}")
        return EXIT_OK
    if args.command == "eval":
        comp = load_trained(cfg, out, need_adapter=True)
        report = run_eval(comp, out, n_quick=args.quick_count,
                          downstream=args.downstream,
                          downstream_count=args.downstream_count,
                          sweep=args.sweep, seg_steps=args.seg_steps)
        sys.stdout.write(report.human_text())
        return EXIT_OK
    if args.command == "gradcheck":
        results = run_all(configs=args.configs, seed=cfg.seed)
        ok = True
        for r in results:
            print(r.line())
            ok = ok and r.passed
        return EXIT_OK if ok else EXIT_NUMERICAL
    raise ValidationError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FrozenParameterError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
