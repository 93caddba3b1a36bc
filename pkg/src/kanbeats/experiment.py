"""Flat key/value experiment configuration and the train / evaluate / matrix runners."""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .data import (
    HOUR,
    MarketSeries,
    PAPER_SPLITS,
    Scaler,
    SplitSpec,
    default_test_range,
    ingest_csv,
    make_eval_windows,
    make_windows,
)
from .errors import ConfigError, DataError, KanBeatsError
from .model import ModelConfig, load_model, save_model
from .training import TrainConfig, evaluate, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.kbc"

KEY_DOCS = {
    "csv_<MARKET>": "path to the timestamp,price CSV of market <MARKET> (relative to the config file)",
    "primary_market": "market supplying the supervised forecast loss",
    "secondary_market": "market supplying only the domain-confusion signal",
    "target_market": "unseen market evaluated zero-shot (never read by train)",
    "train_start_<MARKET>": "first day of the training range (default: paper range or whole series)",
    "train_end_<MARKET>": "last day of the training range",
    "test_start": "first day of the target test range (default: paper range or second half)",
    "test_end": "last day of the target test range",
    "out_dir": "output directory (overridden by --out)",
    "matrix_primaries": "list of primary markets for the matrix command",
    "matrix_secondaries": "list of candidate secondary markets (default: the other primaries)",
    "matrix_seeds": "list of seeds per matrix cell",
    "matrix_variants": "subset of [kan, nbeats, proposed]",
    **{f.name: f"model: {f.name} (default {f.default!r})" for f in fields(ModelConfig)},
    **{f.name: f"training: {f.name} (default {f.default!r})" for f in fields(TrainConfig)},
}

VARIANTS = {
    # name -> (trunk, adversarial)
    "kan": ("kan", False),
    "nbeats": ("mlp", False),
    "proposed": ("kan", True),
}


@dataclass
class ExperimentConfig:
    csv_paths: dict[str, Path] = field(default_factory=dict)
    primary_market: str | None = None
    secondary_market: str | None = None
    target_market: str | None = None
    train_ranges: dict[str, list] = field(default_factory=dict)
    test_start: str | None = None
    test_end: str | None = None
    out_dir: Path = Path("out")
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    matrix_primaries: list[str] = field(default_factory=list)
    matrix_secondaries: list[str] = field(default_factory=list)
    matrix_seeds: list[int] = field(default_factory=lambda: [0])
    matrix_variants: list[str] = field(default_factory=lambda: ["kan", "proposed"])

    @classmethod
    def from_mapping(cls, raw: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        cfg = cls()
        model_kw, train_kw = {}, {}
        for key, value in raw.items():
            if isinstance(value, dict):
                raise ConfigError(f"config must be flat; key {key!r} is a table")
            if key.startswith("csv_"):
                path = Path(value)
                cfg.csv_paths[key[4:]] = path if path.is_absolute() else base_dir / path
            elif key.startswith("train_start_") or key.startswith("train_end_"):
                which, market = ("start", key[12:]) if key.startswith("train_start_") else ("end", key[10:])
                cfg.train_ranges.setdefault(market, [None, None])[0 if which == "start" else 1] = str(value)
            elif key in ("primary_market", "secondary_market", "target_market", "test_start", "test_end"):
                setattr(cfg, key, str(value))
            elif key == "out_dir":
                cfg.out_dir = Path(value) if Path(value).is_absolute() else base_dir / value
            elif key in ("matrix_primaries", "matrix_secondaries", "matrix_variants"):
                setattr(cfg, key, [str(v) for v in _as_list(key, value)])
            elif key == "matrix_seeds":
                cfg.matrix_seeds = [int(v) for v in _as_list(key, value)]
            elif key in model_keys:
                model_kw[key] = value
            elif key in train_keys:
                train_kw[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg.model = ModelConfig(**model_kw)
        cfg.training = TrainConfig(**train_kw)
        unknown = set(cfg.matrix_variants) - set(VARIANTS)
        if unknown:
            raise ConfigError(f"unknown matrix variants {sorted(unknown)}")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_mapping(raw, path.parent)

    def csv_for(self, market: str) -> Path:
        if market not in self.csv_paths:
            raise ConfigError(f"no csv_{market} entry for market {market!r}")
        path = self.csv_paths[market]
        if not path.exists():
            raise ConfigError(f"csv for market {market!r} not found: {path}")
        return path

    def validate_roles(self, need_target: bool = False) -> None:
        roles = [self.primary_market, self.secondary_market]
        if self.primary_market is None:
            raise ConfigError("primary_market is required")
        if self.training.adversarial and self.secondary_market is None:
            raise ConfigError("adversarial training requires secondary_market")
        if self.secondary_market is not None and self.secondary_market == self.primary_market:
            raise ConfigError("primary and secondary markets must differ")
        if self.target_market is not None and self.target_market in roles:
            raise ConfigError("the target market must differ from the training markets (zero-shot)")
        if need_target and self.target_market is None:
            raise ConfigError("target_market is required")

    def train_range(self, market: str) -> tuple[str | None, str | None]:
        if market in self.train_ranges:
            return tuple(self.train_ranges[market])
        return SplitSpec.for_market(market).train_range or (None, None)

    def test_range(self, series: MarketSeries) -> tuple[str, str]:
        if self.test_start or self.test_end:
            if not (self.test_start and self.test_end):
                raise ConfigError("test_start and test_end must be given together")
            return self.test_start, self.test_end
        return SplitSpec.for_market(series.market_id).test_range or default_test_range(series)


def _as_list(key, value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(value, list):
        return value
    raise ConfigError(f"{key} must be a list")


# ---------------------------------------------------------------- training


def training_windows(cfg: ExperimentConfig, market: str, label: int):
    series = ingest_csv(cfg.csv_for(market), market)
    start, end = cfg.train_range(market)
    series = series.slice(start, end)
    if len(series) == 0:
        raise DataError(f"{market}: no data in training range {start}..{end}")
    scaler = Scaler.fit(series.prices)
    m = cfg.model
    windows = make_windows(series, scaler, m.lookback, m.horizon, cfg.training.train_stride, label)
    return windows, scaler


def run_train(cfg: ExperimentConfig, out_dir: Path, on_epoch=None) -> dict:
    """Train on primary (+ secondary) market data and write checkpoint and log."""
    cfg.validate_roles()
    primary, p_scaler = training_windows(cfg, cfg.primary_market, 1)
    secondary, s_scaler = None, None
    uses_secondary = cfg.training.adversarial or cfg.training.secondary_supervised
    if cfg.secondary_market is not None and uses_secondary:
        secondary, s_scaler = training_windows(cfg, cfg.secondary_market, 0)

    result = train(cfg.model, cfg.training, primary, secondary, on_epoch=on_epoch)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"
    columns = ["epoch", "forecast_loss", "domain_loss", "domain_accuracy", "lambda", "val_mae"]
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in result.history:
            writer.writerow({k: row[k] for k in columns})

    scalers = {cfg.primary_market: [p_scaler.mu, p_scaler.sigma]}
    if s_scaler is not None:
        scalers[cfg.secondary_market] = [s_scaler.mu, s_scaler.sigma]
    metadata = {
        "primary_market": cfg.primary_market,
        "secondary_market": cfg.secondary_market if secondary is not None else None,
        "training": cfg.training.to_dict(),
        "scalers": scalers,
        "best_epoch": result.best_epoch,
    }
    extras = {}
    if result.classifier is not None:
        extras = {f"classifier.{k}": v for k, v in result.classifier.parameters().items()}
    ckpt = out_dir / CHECKPOINT_NAME
    save_model(result.model, ckpt, extras, metadata)
    log.info("wrote %s (best epoch %d)", ckpt, result.best_epoch)
    return {"checkpoint": str(ckpt), "log": str(log_path), "best_epoch": result.best_epoch,
            "history": result.history}


# -------------------------------------------------------------- evaluation


def run_evaluate(checkpoint, target_csv, target_market: str, out_dir: Path,
                 test_range: tuple[str, str] | None = None, expect: ModelConfig | None = None,
                 cfg: ExperimentConfig | None = None) -> dict:
    """Zero-shot day-ahead evaluation of a checkpoint on one target market."""
    model = load_model(checkpoint)
    mc = model.config
    if expect is not None and (expect.lookback, expect.horizon) != (mc.lookback, mc.horizon):
        raise ConfigError(
            f"checkpoint was trained with lookback={mc.lookback}, horizon={mc.horizon} but the "
            f"config asks for lookback={expect.lookback}, horizon={expect.horizon}"
        )
    series = ingest_csv(target_csv, target_market)
    if test_range is None:
        test_range = (cfg or ExperimentConfig()).test_range(series)
    test_start = pd.Timestamp(test_range[0], tz="UTC")
    history = series.slice(None, test_start - HOUR)
    if len(history) == 0:
        raise DataError(f"{target_market}: no history before {test_range[0]} to fit the scaler")
    scaler = Scaler.fit(history.prices)
    batch = make_eval_windows(series, scaler, mc.lookback, mc.horizon, test_range)
    ev = evaluate(model, batch)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for w, start in enumerate(batch.target_start):
        for h in range(mc.horizon):
            ts = start + h * HOUR
            rows.append((ts.strftime("%Y-%m-%d"), ts.hour, ev.actual[w, h], ev.predicted[w, h]))
    forecast_path = out_dir / "forecast.csv"
    pd.DataFrame(rows, columns=["date", "hour", "actual", "predicted"]).to_csv(
        forecast_path, index=False, float_format="%.6f")

    report = {
        "target_market": target_market,
        "test_range": list(test_range),
        "checkpoint": str(checkpoint),
        **ev.report.to_dict(decimals=4),
        "naive_persistence": {k: v for k, v in ev.naive.to_dict(decimals=4).items() if k != "per_window"},
        "scaler": {"mu": scaler.mu, "sigma": scaler.sigma},
    }
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    return report


# ------------------------------------------------------------------ matrix


def _legs(cfg: ExperimentConfig):
    primaries = cfg.matrix_primaries or ([cfg.primary_market] if cfg.primary_market else [])
    if not primaries:
        raise ConfigError("matrix needs matrix_primaries or primary_market")
    pool = cfg.matrix_secondaries or primaries
    for primary in primaries:
        for variant in cfg.matrix_variants:
            _, adversarial = VARIANTS[variant]
            if adversarial:
                secondaries = [m for m in pool if m != primary and m != cfg.target_market]
                if not secondaries and cfg.secondary_market and cfg.secondary_market != primary:
                    secondaries = [cfg.secondary_market]
                if not secondaries:
                    raise ConfigError(f"no secondary market available for primary {primary}")
            else:
                secondaries = [None]
            for secondary in secondaries:
                for seed in cfg.matrix_seeds:
                    yield primary, variant, secondary, seed


def aggregate(legs: list[dict]) -> list[dict]:
    """mean and population std of MAE/SMAPE per (primary, variant) cell."""
    cells: dict[tuple[str, str], list[dict]] = {}
    for leg in legs:
        cells.setdefault((leg["primary"], leg["variant"]), []).append(leg)
    rows = []
    for (primary, variant), group in cells.items():
        ok = [g for g in group if g.get("status") == "ok"]
        mae_v = np.array([g["mae"] for g in ok])
        smape_v = np.array([g["smape"] for g in ok])
        rows.append({
            "primary": primary,
            "variant": variant,
            "n_runs": len(ok),
            "n_failed": len(group) - len(ok),
            "mae_mean": float(mae_v.mean()) if len(ok) else float("nan"),
            "mae_std": float(mae_v.std()) if len(ok) else float("nan"),
            "smape_mean": float(smape_v.mean()) if len(ok) else float("nan"),
            "smape_std": float(smape_v.std()) if len(ok) else float("nan"),
        })
    return rows


def format_table(rows: list[dict], variants: list[str]) -> str:
    """Text table: one row per primary market, MAE then SMAPE per variant."""
    def cell(row, metric, digits):
        if row is None:
            return "-"
        if row["n_runs"] == 0:
            return "FAILED"
        text = f"{row[metric + '_mean']:.4f} ± {row[metric + '_std']:.{digits}f}"
        return text + (" (partial)" if row["n_failed"] else "")

    by_key = {(r["primary"], r["variant"]): r for r in rows}
    primaries = list(dict.fromkeys(r["primary"] for r in rows))
    header = ["Primary"] + [f"MAE {v}" for v in variants] + [f"SMAPE {v}" for v in variants]
    lines = [header]
    for p in primaries:
        lines.append([p] + [cell(by_key.get((p, v)), "mae", 2) for v in variants]
                     + [cell(by_key.get((p, v)), "smape", 3) for v in variants])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in lines)


def run_matrix(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[dict], list[dict], bool]:
    """Train and evaluate every leg; returns (legs, aggregated rows, all_ok)."""
    if cfg.target_market is None:
        raise ConfigError("matrix needs target_market")
    target_csv = cfg.csv_for(cfg.target_market)
    legs = []
    for primary, variant, secondary, seed in _legs(cfg):
        trunk, adversarial = VARIANTS[variant]
        name = f"{primary}_{variant}" + (f"_{secondary}" if secondary else "") + f"_seed{seed}"
        leg_dir = Path(out_dir) / "legs" / name
        leg_cfg = replace(
            cfg,
            primary_market=primary,
            secondary_market=secondary,
            model=replace(cfg.model, trunk=trunk),
            training=replace(cfg.training, adversarial=adversarial, seed=seed),
        )
        leg = {"leg": name, "primary": primary, "variant": variant, "secondary": secondary, "seed": seed}
        try:
            run_train(leg_cfg, leg_dir)
            report = run_evaluate(leg_dir / CHECKPOINT_NAME, target_csv, cfg.target_market, leg_dir,
                                  cfg=leg_cfg)
            leg.update(status="ok", mae=report["mae"], smape=report["smape"],
                       naive_mae=report["naive_persistence"]["mae"],
                       naive_smape=report["naive_persistence"]["smape"])
        except KanBeatsError as exc:
            log.error("leg %s failed: %s", name, exc)
            leg.update(status="failed", error=str(exc), exit_code=exc.exit_code)
        legs.append(leg)

    rows = aggregate(legs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out_dir / "matrix.csv", index=False, float_format="%.6f")
    pd.DataFrame(legs).to_csv(out_dir / "matrix_legs.csv", index=False)
    (out_dir / "matrix.json").write_text(json.dumps({"legs": legs, "cells": rows}, indent=2))
    (out_dir / "matrix.txt").write_text(format_table(rows, cfg.matrix_variants) + "\n")
    return legs, rows, all(leg["status"] == "ok" for leg in legs)
