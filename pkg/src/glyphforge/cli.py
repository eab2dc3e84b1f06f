"""Command-line entry point: ``glyphforge {train,sample,bench,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import evaluator, gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .imageio import write_image
from .trainer import METRICS_HEADER, ConfigError, TrainConfig, TrainingError, train

log = logging.getLogger("glyphforge")

GLYPH_SAMPLES = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _coerce(key: str, value: str, kind: type):
    try:
        if kind is bool:
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        return kind(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines (``#`` comments) into typed TrainConfig overrides."""
    kinds = TrainConfig.field_types()
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in kinds:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, kinds[key])
    return out


def resolve_config(args, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Defaults, then config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        return replace(base, **values)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser, skip=()) -> None:
    helps = {
        "n": "number of symbols",
        "strokes": "strokes per symbol",
        "steps": "optimizer steps",
        "canvas": "canvas side in pixels",
        "sigma": "stroke softness, normalized units",
        "warmup": "classifier-only steps before joint training",
    }
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        p.add_argument(flag, dest=f.name, type=kind, default=None,
                       help=f"{helps.get(f.name, f.name.replace('_', ' '))} (default {f.default})")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = []

    def progress(rec):
        log.info("step %6d  val loss %.4f  val acc %.4f", rec.step, rec.loss, rec.val_acc)

    try:
        ckpt = train(config, metrics=metrics, progress=progress)
    except TrainingError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint.bin")
        _write_metrics(out / "metrics.csv", metrics)
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    save_checkpoint(ckpt, out / "checkpoint.bin")
    _write_metrics(out / "metrics.csv", metrics)
    canv = evaluator.render_samples(ckpt, range(config.n), [1.0], GLYPH_SAMPLES, seed=config.seed)
    write_image(canv[:, 0], out / f"glyphs.{args.format}", args.format)
    print(f"best checkpoint at step {ckpt.step}: validation accuracy {ckpt.val_acc:.4f}")
    return 0


def _write_metrics(path: Path, records) -> None:
    path.write_text(METRICS_HEADER + "\n" + "".join(r.to_csv() + "\n" for r in records))


def cmd_sample(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    n = ckpt.config.n
    symbols = args.symbols if args.symbols is not None else list(range(n))
    if any(not 0 <= s < n for s in symbols):
        raise UsageError(f"symbols must lie in [0, {n})")
    if any(t < 0 for t in args.temps):
        raise UsageError("temperatures must be >= 0")
    if args.rows < 1:
        raise UsageError("--rows must be >= 1")
    canv = evaluator.render_samples(ckpt, symbols, args.temps, args.rows, seed=args.seed)
    s, t, r, h, w = canv.shape
    write_image(canv.reshape(s, t * r, h, w), args.out, args.format)
    if args.stats:
        spread = np.array([[evaluator.mean_pairwise_distance(c) for c in row] for row in canv])
        sweep = evaluator.TemperatureSweep(tuple(args.temps), tuple(symbols), canv, spread)
        Path(args.stats).write_text(sweep.table())
    return 0


def cmd_bench(args) -> int:
    template = resolve_config(args)
    ns = evaluator.FULL_NS if args.full_grid else args.ns
    seeds = 7 if args.full_grid and args.seeds is None else (args.seeds or 3)

    def progress(n, seed, acc):
        log.info("N=%d seed=%d accuracy %.4f", n, seed, acc)

    report = evaluator.n_sweep(ns, seeds, template, samples=args.samples, progress=progress)
    text = report.to_csv()
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(tol=args.tol, seed=args.seed, configs=args.configs)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("gradient check FAILED: " + ", ".join(failed), file=sys.stderr)
        return 1
    print("gradient check PASSED")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyphforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator/classifier pair")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file (flags take precedence)")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="render a symbol x temperature grid from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="image path")
    p.add_argument("--temps", type=_float_list, default=[1.0], help="comma-separated temperatures")
    p.add_argument("--rows", type=int, default=4, help="samples per temperature")
    p.add_argument("--symbols", type=_int_list, default=None, help="comma-separated symbol indices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("pgm", "png"), default=None)
    p.add_argument("--stats", help="also write the per-cell spread table (CSV) here")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="accuracy vs number of symbols")
    p.add_argument("--out", required=True, help="report path (CSV)")
    p.add_argument("--config", help="key=value config file for the training template")
    p.add_argument("--n", dest="ns", type=_int_list, default=list(evaluator.DESK_NS),
                   help="comma-separated N values")
    p.add_argument("--seeds", type=int, default=None, help="seeds per N (default 3, or 7 with --full-grid)")
    p.add_argument("--samples", type=int, default=10_000, help="evaluation samples per model")
    p.add_argument("--full-grid", action="store_true", help="N in 4..512, 7 seeds")
    _add_train_flags(p, skip=("n",))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--tol", type=float, default=None, help="override every tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50, help="random configurations per suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"glyphforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
