"""Point-forecast accuracy metrics (MAE, SMAPE) and a per-window report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMAPE_ZERO_CONVENTION = "terms with |y|+|yhat| = 0 contribute 0"


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} actuals vs {y_hat.size} forecasts")
    if y.size == 0:
        raise ValueError("metrics need at least one observation")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def smape(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    denom = np.abs(y) + np.abs(y_hat)
    num = 2.0 * np.abs(y - y_hat)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(np.mean(terms))


@dataclass
class MetricReport:
    mae: float
    smape: float
    n_windows: int
    per_window: list[dict] = field(default_factory=list)

    def to_dict(self, decimals: int | None = None) -> dict:
        r = (lambda v: round(v, decimals)) if decimals is not None else (lambda v: v)
        return {
            "mae": r(self.mae),
            "smape": r(self.smape),
            "n_windows": self.n_windows,
            "smape_convention": SMAPE_ZERO_CONVENTION,
            "per_window": self.per_window,
        }


def metric_report(actual, predicted, labels=None) -> MetricReport:
    """Pooled MAE/SMAPE over all windows plus a per-window breakdown.

    ``actual`` and ``predicted`` are ``(n_windows, horizon)`` arrays in
    price units; ``labels`` names each window (e.g. its forecast date).
    """
    actual = np.atleast_2d(np.asarray(actual, dtype=np.float64))
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    if actual.shape != predicted.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {predicted.shape}")
    labels = labels if labels is not None else list(range(len(actual)))
    rows = [
        {"window": str(lab), "mae": mae(a, p), "smape": smape(a, p)}
        for lab, a, p in zip(labels, actual, predicted)
    ]
    return MetricReport(mae(actual, predicted), smape(actual, predicted), len(actual), rows)
