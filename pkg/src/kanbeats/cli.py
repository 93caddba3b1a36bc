"""Command-line entry point: ``kanbeats {synth,train,evaluate,matrix,dump-activations}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import synth_markets
from .errors import ConfigError, KanBeatsError
from .experiment import (
    CHECKPOINT_NAME,
    KEY_DOCS,
    ExperimentConfig,
    format_table,
    run_evaluate,
    run_matrix,
    run_train,
)
from .layers import KanLayerParams, dump_activations
from .model import load_model

log = logging.getLogger("kanbeats")

EPILOG = "config keys (flat `key = value` file):\n" + "\n".join(
    f"  {key:24s} {doc}" for key, doc in KEY_DOCS.items()
) + "\n\nexit codes: 0 success, 2 config error, 3 data error, 4 numeric failure"


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg.out_dir = Path(args.out)
    if args.seed is not None:
        cfg.training = replace(cfg.training, seed=args.seed)
        if cfg.matrix_seeds == [0]:
            cfg.matrix_seeds = [args.seed]
    return cfg


def cmd_synth(args) -> int:
    out = Path(args.out or "synthetic")
    seed = 7 if args.seed is None else args.seed
    markets = synth_markets(seed, args.n_markets, args.hours, noise=args.noise)
    for m in markets:
        m.to_csv(out / f"{m.market_id}.csv")
    print(f"wrote {len(markets)} markets to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = run_train(cfg, cfg.out_dir, on_epoch=lambda row: log.info(
        "epoch %(epoch)d forecast_loss=%(forecast_loss).4f domain_loss=%(domain_loss).4f "
        "domain_acc=%(domain_accuracy).3f lambda=%(lambda).3f val_mae=%(val_mae).4f", row))
    print(json.dumps({k: v for k, v in result.items() if k != "history"}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    checkpoint = Path(args.checkpoint or cfg.out_dir / CHECKPOINT_NAME)
    market = args.target_market or cfg.target_market
    if market is None:
        raise ConfigError("target market not given (--target-market or target_market)")
    target_csv = Path(args.target_csv) if args.target_csv else cfg.csv_for(market)
    test_range = None
    if args.test_start or args.test_end:
        if not (args.test_start and args.test_end):
            raise ConfigError("--test-start and --test-end must be given together")
        test_range = (args.test_start, args.test_end)
    expect = cfg.model if args.config else None
    report = run_evaluate(checkpoint, target_csv, market, cfg.out_dir, test_range, expect, cfg)
    print(json.dumps({k: v for k, v in report.items() if k != "per_window"}, indent=2))
    return 0


def cmd_matrix(args) -> int:
    cfg = _load_config(args)
    legs, rows, ok = run_matrix(cfg, cfg.out_dir)
    print(format_table(rows, cfg.matrix_variants))
    if ok:
        return 0
    return max(leg.get("exit_code", 1) for leg in legs if leg["status"] != "ok")


def cmd_dump_activations(args) -> int:
    cfg = _load_config(args)
    checkpoint = Path(args.checkpoint or cfg.out_dir / CHECKPOINT_NAME)
    model = load_model(checkpoint)
    selected = []
    for i, j, block in model.blocks():
        for li, layer in enumerate(block.trunk):
            name = f"stack{i}.block{j}.trunk{li}"
            if isinstance(layer, KanLayerParams) and (args.layer == "all" or name.startswith(args.layer)):
                selected.append((name, layer))
    if not selected:
        raise ConfigError(f"no KAN layer matches {args.layer!r} in {checkpoint}")
    out = Path(args.output) if args.output else cfg.out_dir / "activations.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "edge_out", "edge_in", "x", "phi"])
        for name, layer in selected:
            table = dump_activations(layer, args.n_samples)
            for o, i, x, phi in zip(table["edge_out"], table["edge_in"], table["x"], table["phi"]):
                writer.writerow([name, int(o), int(i), repr(float(x)), repr(float(phi))])
    print(f"wrote {out} ({len(selected)} layers)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="kanbeats", parents=[common], epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Zero-shot day-ahead price forecasting with a doubly residual KAN network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic market CSVs")
    p.add_argument("--n-markets", type=int, default=3)
    p.add_argument("--hours", type=int, default=2 * 8760)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="adversarial training on primary/secondary markets",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="zero-shot day-ahead evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--target-csv")
    p.add_argument("--target-market")
    p.add_argument("--test-start")
    p.add_argument("--test-end")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", parents=[common], help="primary x variant comparison table")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("dump-activations", parents=[common], help="sample learned edge functions to CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--layer", default="all", help="layer name prefix, e.g. stack0.block0.trunk0, or 'all'")
    p.add_argument("--n-samples", type=int, default=101)
    p.add_argument("--output")
    p.set_defaults(func=cmd_dump_activations)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except KanBeatsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
