"""Command-line entry point: gen, train, register, metrics.

Exit status is 0 on success; on failure a single line ``error: <reason>``
goes to stderr and the status is 1 (2 for usage errors, as argparse does).
Set ABPDCNET_THREADS to pin the BLAS thread count.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError
from .experiments import PRESETS, ExperimentConfig, run_generate, run_register, run_train
from .metrics import compute_metrics


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "preset", None):
        cfg = cfg.with_preset(args.preset)
    return cfg


def _read_numbers(path: str) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    try:
        return np.array([float(t) for t in text.replace(",", " ").split()])
    except ValueError:
        raise ConfigError(f"{path}: expected whitespace-separated numbers") from None


def cmd_gen(args) -> dict:
    m = run_generate(_load_config(args), args.out)
    return {"cases": len(m["cases"]), "out": args.out}


def cmd_train(args) -> dict:
    return run_train(_load_config(args), args.out)


def cmd_register(args) -> dict:
    return run_register(_load_config(args), args.out)


def cmd_metrics(args) -> dict:
    pred = _read_numbers(args.pred)
    labels = _read_numbers(args.labels)
    if np.any((pred < 0) | (pred > 1)):
        raise ConfigError("predictions must be 0/1 labels or class-1 probabilities in [0, 1]")
    scores = pred if args.scores is None else _read_numbers(args.scores)
    hard = (pred >= 0.5).astype(int)
    result = compute_metrics(hard, labels, scores)
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abpdcnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic cases as VOL5 files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    for name, func, text in (("train", cmd_train, "train the classifier (and FPRAN)"),
                             ("register", cmd_register, "fit FPRAN to one synthetic pair")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--preset", choices=sorted(PRESETS), help="ablation row")
        s.set_defaults(func=func)

    m = sub.add_parser("metrics", help="accuracy, F1 and AUC from text files")
    m.add_argument("--pred", required=True, help="0/1 predictions or class-1 probabilities")
    m.add_argument("--labels", required=True)
    m.add_argument("--scores", help="class-1 scores for the AUC (default: --pred)")
    m.add_argument("--out", help="also write the result JSON here")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (ConfigError, FormatError, ShapeError, NumericError, UsageError, ValueError, OSError) as e:
        print(f"error: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
