"""Command line entry point: ``m3s <command> --config <file> [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 for configuration errors and 2 for anything
that goes wrong at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evalstats
from .dataproc import ConfigInvalid, save_csv
from .experiment import (
    compare,
    format_table,
    load_config,
    load_dataset,
    p_value,
    parse_level,
    sweep,
    to_json,
    train_single,
    write_atomic,
)
from .masking import MissingSpec

log = logging.getLogger("m3s")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="TOML experiment config")
    p.add_argument("--seed", type=int, help="override run.seeds with a single seed")
    p.add_argument("--out", help="override run.out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3s", description="Meta-sampling training for missing-modality prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("generate", help="write the synthetic dataset as CSV"))
    _common(sub.add_parser("train", help="train one method at one seed"))
    _common(sub.add_parser("compare", help="run all methods over the seed list"))

    p = sub.add_parser("sweep", help="compare at several missing-rate levels")
    _common(p)
    p.add_argument("--levels", help="comma-separated lo-hi pairs, e.g. 0.2-0.4,0.4-0.6")

    p = sub.add_parser("adapt", help="train at one missing-rate range, test at another")
    _common(p)
    p.add_argument("--train-miss", help="lo-hi for training, e.g. 0.4-0.6")
    p.add_argument("--test-miss", help="lo-hi for evaluation, e.g. 0.6-0.8")

    p = sub.add_parser("significance", help="two-tailed Welch t-test")
    _common(p, config_required=False)
    p.add_argument("--report", help="results.json from compare/adapt")
    p.add_argument("--a", help="comma-separated values of sample A")
    p.add_argument("--b", help="comma-separated values of sample B")
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigInvalid(f"not a list of numbers: {text!r}") from None


def cmd_generate(cfg, args) -> int:
    if cfg.data_source != "synthetic":
        raise ConfigInvalid("generate needs data.source = 'synthetic'")
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    dataset = load_dataset(replace(cfg, data=data))
    path = Path(cfg.data_path) if cfg.data_path and args.out is None else Path(cfg.out) / "dataset.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_csv(dataset, path)
    tr, va, te = dataset.sizes
    print(f"wrote {path}: train={tr} valid={va} test={te}")
    return 0


def cmd_train(cfg, args) -> int:
    dataset = load_dataset(cfg)
    seed = cfg.seeds[0]
    result = train_single(cfg, dataset, seed, cfg.out)
    print(json.dumps({"method": cfg.method, "seed": seed, "test": result.metrics}, indent=2))
    return 0


def cmd_compare(cfg, args) -> int:
    report = compare(cfg, load_dataset(cfg), cfg.out)
    print(format_table(report), end="")
    return 0


def cmd_sweep(cfg, args) -> int:
    levels = [parse_level(x) for x in args.levels.split(",")] if args.levels else list(cfg.levels)
    reports = sweep(cfg, load_dataset(cfg), levels, cfg.out)
    for rep in reports.values():
        print(format_table(rep))
    return 0


def cmd_adapt(cfg, args) -> int:
    if args.train_miss:
        cfg = replace(cfg, train_missing=MissingSpec.uniform(*parse_level(args.train_miss)))
    if args.test_miss:
        cfg = replace(cfg, test_missing=MissingSpec.uniform(*parse_level(args.test_miss)))
    report = compare(cfg, load_dataset(cfg), cfg.out)
    print(format_table(report), end="")
    return 0


def cmd_significance(args) -> int:
    if args.report:
        with open(args.report, encoding="utf-8") as fh:
            report = json.load(fh)
        seeds = [str(s) for s in report["protocol"]["seeds"]]
        if "orig" not in report["methods"] or len(seeds) < 2:
            raise ConfigInvalid("report needs an orig run and at least two seeds")
        out = {}
        for m in report["methods"]:
            if m == "orig":
                continue
            out[m] = {
                k: p_value([report["runs"][m][s][k] for s in seeds], [report["runs"]["orig"][s][k] for s in seeds])
                for k in report["metrics"]
            }
        text = to_json(out)
        if args.out:
            write_atomic(Path(args.out) / "significance.json", text)
        print(text, end="")
        return 0
    if not (args.a and args.b):
        raise ConfigInvalid("significance needs --report or both --a and --b")
    a, b = _floats(args.a), _floats(args.b)
    try:
        t, df = evalstats.welch_t(a, b)
    except evalstats.DegenerateSample as exc:
        raise ConfigInvalid(str(exc)) from None
    print(json.dumps({"t": t, "df": df, "p": evalstats.t_test_two_tailed(a, b)}))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "adapt": cmd_adapt,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "significance":
            return cmd_significance(args)
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map every runtime failure to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
