"""Command-line entry point: ``ctrcl {gen-data,train,eval,gradcheck,oracle-test}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import harness
from .data import make_dataset, save_dataset, load_dataset

OVERRIDES = ("mode", "seed", "epochs", "beta", "gamma1", "gamma2", "out")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma1", type=float)
    p.add_argument("--gamma2", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any other config key (repeatable)",
    )


def config_from_args(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    if args.set:
        cfg = harness.parse_config_text("\n".join(args.set), cfg)
    for key in OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrcl", description="CNN/transformer collaborative segmentation at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/test splits in the CTRS format")
    _add_run_flags(g)

    t = sub.add_parser("train", help="jointly train both students")
    _add_run_flags(t)
    t.add_argument("--resume", help="continue from a checkpoint.bin")
    t.add_argument("--diag", action="store_true", help="dump lambda maps and prototypes to OUT/diag")

    e = sub.add_parser("eval", help="score a checkpoint's students")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="CTRS file (default: the checkpoint config's test split)")
    e.add_argument("--out", help="directory for report.json / report.csv")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seeds", type=int, default=5)

    sub.add_parser("oracle-test", help="compare vectorised kernels against scalar references")
    return parser


def _gen_data(args) -> int:
    cfg = config_from_args(args)
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    train = make_dataset(cfg.num_train, cfg.height, cfg.width, cfg.num_classes, cfg.data_seed)
    test = make_dataset(cfg.num_test, cfg.height, cfg.width, cfg.num_classes, cfg.data_seed + 1)
    save_dataset(out / "train.ctrs", train)
    save_dataset(out / "test.ctrs", test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def _train(args) -> int:
    cfg = config_from_args(args)
    if args.diag:
        cfg.diag = True
    if not cfg.out:
        raise SystemExit("train needs an output directory (--out or out = ... in the config)")
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.txt").write_text(harness.config_to_text(cfg))
    result = harness.train(cfg, resume=args.resume)
    final = [lg for lg in result.logs if lg.metrics is not None]
    for lg in final[-2:]:
        print(f"{lg.student:<12s} epoch {lg.epoch}  dsc {lg.metrics.mean_dsc:.4f}  jac {lg.metrics.mean_jac:.4f}")
    return 0


def _eval(args) -> int:
    dataset = load_dataset(args.data) if args.data else None
    reports = harness.evaluate_cmd(args.checkpoint, dataset, args.out)
    print(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gen-data":
            return _gen_data(args)
        if args.command == "train":
            return _train(args)
        if args.command == "eval":
            return _eval(args)
        if args.command == "gradcheck":
            from .gradcheck import gradcheck_cmd

            return gradcheck_cmd(range(args.seeds))
        if args.command == "oracle-test":
            from .oracle import oracle_cmd

            return oracle_cmd()
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"ctrcl {args.command}: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
