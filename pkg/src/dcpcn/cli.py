"""Command-line entry point: ``dcpcn <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, NumericError, ShapeError


EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def load_config(path, seed: int | None = None):
    from .model import ModelConfig

    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    config = ModelConfig.from_dict(data)
    return config if seed is None else config.replace(seed=seed).validate()


def _cmd_gen_data(args) -> int:
    from .data import build_dataset

    categories = [c.strip() for c in args.categories.split(",") if c.strip()]
    path = build_dataset(
        args.out,
        args.seed,
        categories,
        per_category=args.per_category,
        test_per_category=args.test_per_category,
        n_gt=args.n_gt,
        n_partial=args.n_partial,
        keep_ratio=args.keep_ratio,
    )
    print(f"wrote {path}")
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_split
    from .training import train

    config = load_config(args.config, args.seed)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, config)
        config = state.model.config.replace(epochs=config.epochs)
    data = load_split(args.data, "train")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("a" if state else "w", encoding="utf-8") as fh:

        def on_epoch(line: str) -> None:
            print(line, flush=True)
            fh.write(line + "\n")
            fh.flush()

        state = train(config, data, state, on_epoch)
    save_checkpoint(state, out)
    print(f"saved {out} (epoch {state.epoch}, config {config.fingerprint()})")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .evaluation import evaluate

    config = load_config(args.config) if args.config else None
    state = load_checkpoint(args.ckpt, config)
    data = load_split(args.data, args.split)
    refs = list(load_split(args.refs, None).gt) if args.refs else None
    report = evaluate(state.model, data, refs)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


def _cmd_ablate(args) -> int:
    from .data import load_split
    from .evaluation import ablate, ablation_table

    base = load_config(args.config, args.seed)
    if args.epochs is not None:
        base = base.replace(epochs=args.epochs).validate()
    train_set = load_split(args.data, "train")
    test_set = load_split(args.data, "test")
    rows = ablate(base, train_set, test_set, args.out, list(args.rows), on_epoch=lambda r, line: print(f"{r} {line}", flush=True))
    sys.stdout.write(ablation_table(rows))
    return 0


def _cmd_complete(args) -> int:
    from .analysis import complete_one
    from .checkpoint import load_checkpoint

    state = load_checkpoint(args.ckpt)
    print(complete_one(state.model, args.input, args.output))
    return 0


def _cmd_codebook_stats(args) -> int:
    from .analysis import codebook_stats, write_codebook_stats
    from .checkpoint import load_checkpoint

    state = load_checkpoint(args.ckpt)
    dims = [int(d) for d in args.dims.split(",")] if args.dims else None
    stats = codebook_stats(state.model, dims)
    paths = write_codebook_stats(stats, args.out)
    for name, usage in stats.usage.items():
        print(f"{name}: {usage['used']} codes used, dead fraction {usage['dead_fraction']:.3f}")
    if stats.tv_distance is not None:
        tv = ", ".join(f"dim {d}: {v:.4f}" for d, v in stats.tv_distance.items())
        print(f"total-variation distance between codebooks: {tv}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def _cmd_gradcheck(args) -> int:
    from .analysis import run_gradcheck

    config = load_config(args.config, args.seed)
    report = run_gradcheck(config, eps=args.eps, per_tensor=args.per_tensor, full=args.full, tol=args.tol)
    print(report.summary())
    if report.result.skipped:
        print(f"skipped (piecewise boundary crossed): {report.result.skipped[:10]}")
    ok = report.result.passed(args.tol)
    print(("PASS" if ok else "FAIL") + f": tolerance {args.tol:g}")
    return 0 if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcpcn", description="Dual-codebook point cloud completion")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bitwise reproducible runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", default="sphere,cube,cylinder,torus,plane")
    p.add_argument("--per-category", type=int, default=200)
    p.add_argument("--test-per-category", type=int, default=40)
    p.add_argument("--n-gt", type=int, default=2048)
    p.add_argument("--n-partial", type=int, default=512)
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--log", help="epoch log path (default: <out>.log)")
    p.add_argument("--resume", help="continue from this checkpoint up to the config's epoch count")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--refs", help="reference dataset for MMD")
    p.add_argument("--split", default="test")
    p.add_argument("--config", help="expected config; the checkpoint's own config wins")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate rows A-F")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override the config epoch count")
    p.add_argument("--rows", default="ABCDEF")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("complete", help="complete one XYZ file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=_cmd_complete)

    p = sub.add_parser("codebook-stats", help="codebook histograms (CSV + SVG) and usage")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", help="comma-separated dimensions (default 0-4)")
    p.set_defaults(func=_cmd_codebook_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--config", required=True)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--per-tensor", type=int, default=12, help="entries sampled per parameter tensor")
    p.add_argument("--full", action="store_true", help="check every entry (slow)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
