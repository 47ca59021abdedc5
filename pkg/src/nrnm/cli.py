"""Command-line entry point: ``nrnm <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure
(divergence or a gradient check above threshold).  Errors are printed to
stderr as one line, ``error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import diffcore as dc
from .config import ConfigError, RunConfig, load_run_config, parse_config_text
from .data import DatasetParseError, classes_for, generate, input_dim_for, load_dataset, \
    save_dataset
from .heads import DataError
from .model import gradient_check
from .trainer import CheckpointError, DivergenceError, MetricsLog, evaluate, load_checkpoint, \
    train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nrnm", description="NRNM sequence models: data, training, checks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="key = value config file")
        sp.add_argument("--seed", type=int, help="overrides model/data seeds from the config")

    g = sub.add_parser("gen-data", help="write train/eval JSON Lines datasets")
    common(g)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model; writes checkpoints and metrics")
    common(t)
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, config_required=False)
    e.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'best'/'final' inside --out")
    e.add_argument("--out", help="run directory used to resolve 'best'/'final'")
    e.add_argument("--data", help="JSON Lines dataset (default: the config's eval split)")

    c = sub.add_parser("gradcheck", help="finite-difference check of the configured model")
    common(c)
    c.add_argument("--threshold", type=float, default=1e-5)
    c.add_argument("--sample", type=int, default=200)
    c.add_argument("--steps", type=int, default=12, help="sequence length used for the check")

    x = sub.add_parser("export-metrics", help="split metrics.csv into per-metric series")
    x.add_argument("--out", required=True, help="run directory holding metrics.csv")
    x.add_argument("--metrics", help="metrics CSV (default: OUT/metrics.csv)")
    return p


# helpers -------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config, seed=args.seed)
    return _fill_dims(rc, args.config)


def _fill_dims(rc: RunConfig, path) -> RunConfig:
    """Take input width and class count from the dataset unless the config sets them."""
    given = parse_config_text(Path(path).read_text(encoding="utf-8"))["model"]
    kw = {}
    if "input_dim" not in given:
        kw["input_dim"] = input_dim_for(rc.data)
    if "num_classes" not in given:
        kw["num_classes"] = classes_for(rc.data)
    if kw:
        rc.model = rc.model.replace(**kw)
    return rc


def _datasets(rc: RunConfig):
    train_path, eval_path = rc.extra.get("train_path"), rc.extra.get("eval_path")
    tr = load_dataset(train_path) if train_path else generate(rc.data)
    ev = load_dataset(eval_path) if eval_path else generate(rc.eval_data)
    return tr, ev


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(generate(rc.data), out / "train.jsonl")
    save_dataset(generate(rc.eval_data), out / "eval.jsonl")
    _print({"train": str(out / "train.jsonl"), "eval": str(out / "eval.jsonl"),
            "train_samples": rc.data.samples, "eval_samples": rc.eval_data.samples})
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _run_config(args)
    tr, ev = _datasets(rc)
    res = train(rc.model, tr, ev, out_dir=args.out)
    _print(res.summary)
    return EXIT_OK


def _resolve_checkpoint(args) -> Path:
    if args.checkpoint in ("best", "final", "last_good"):
        if not args.out:
            raise UsageError(f"--checkpoint {args.checkpoint} needs --out")
        return Path(args.out) / f"{args.checkpoint}.ckpt"
    return Path(args.checkpoint)


def cmd_eval(args) -> int:
    ck = load_checkpoint(_resolve_checkpoint(args))
    if args.data:
        data = load_dataset(args.data)
    elif args.config:
        data = _datasets(_run_config(args))[1]
    else:
        raise UsageError("eval needs --data or --config")
    _print(evaluate(ck, data))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rc = _run_config(args)
    err = gradient_check(rc.model, sample=args.sample, T=args.steps, seed=rc.model.seed)
    _print({"max_relative_error": err, "threshold": args.threshold, "sample": args.sample})
    if not err < args.threshold:
        raise NumericFailure(f"max relative error {err:.3e} exceeds {args.threshold:g}")
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    out = Path(args.out)
    src = Path(args.metrics) if args.metrics else out / "metrics.csv"
    try:
        log = MetricsLog.from_csv(src)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{src}: {exc}") from None
    dest = out / "series"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for split, metric in sorted({(sp, m) for _, sp, m, _ in log.rows}):
        path = dest / f"{split}_{metric}.csv"
        with open(path, "w") as fh:
            fh.write(f"step,{metric}\n")
            for step, value in log.series(split, metric):
                fh.write(f"{step},{value!r}\n")
        written.append(str(path))
    _print({"series": written})
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "export-metrics": cmd_export_metrics}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {' '.join(str(exc).split())}", file=sys.stderr)
        print(parser.format_usage().strip(), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, DatasetParseError, CheckpointError, dc.DimensionError) as exc:
        return _fail("config" if isinstance(exc, ConfigError) else "data", exc, EXIT_DATA)
    except OSError as exc:
        return _fail("io", exc, EXIT_DATA)
    except (DivergenceError, dc.GradientCheckError, NumericFailure) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
