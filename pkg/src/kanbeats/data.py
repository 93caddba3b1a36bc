"""Market price ingestion, calendar splits, scaling, windowing and synthetic data."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

HOUR = pd.Timedelta(hours=1)
_OFFSET_RE = re.compile(r"(?:Z|[+-]\d{2}(?::?\d{2})?)$")

# inclusive calendar ranges used in the published experiments
PAPER_SPLITS = {
    "NP": {"test": ("2018-01-01", "2018-12-24")},
    "PJM": {"train": ("2013-01-01", "2018-12-24")},
    "BE": {"train": ("2011-01-09", "2016-12-31")},
    "FR": {"train": ("2011-01-09", "2016-12-31")},
}


@dataclass
class MarketSeries:
    market_id: str
    timestamps: pd.DatetimeIndex  # hourly, UTC
    prices: np.ndarray

    def __post_init__(self):
        self.timestamps = pd.DatetimeIndex(self.timestamps)
        if self.timestamps.tz is None:
            raise DataError(f"{self.market_id}: timestamps must be timezone-aware")
        self.timestamps = self.timestamps.tz_convert("UTC")
        self.prices = np.asarray(self.prices, dtype=np.float64)
        if len(self.timestamps) != len(self.prices):
            raise DataError(f"{self.market_id}: {len(self.timestamps)} timestamps vs {len(self.prices)} prices")
        if len(self.prices) and not np.all(np.isfinite(self.prices)):
            raise DataError(f"{self.market_id}: non-finite prices")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps.asi8) == HOUR.value).all():
            raise DataError(f"{self.market_id}: timestamps are not strictly hourly")

    def __len__(self) -> int:
        return len(self.prices)

    def slice(self, start=None, end=None) -> "MarketSeries":
        """Rows with ``start <= t <= end``. Date-only bounds cover whole days."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.timestamps >= _bound(start, end=False)
        if end is not None:
            mask &= self.timestamps <= _bound(end, end=True)
        return MarketSeries(self.market_id, self.timestamps[mask], self.prices[mask])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "timestamp": self.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "price": self.prices,
        })

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


def _bound(value, end: bool) -> pd.Timestamp:
    ts = pd.Timestamp(value)
    ts = ts.tz_localize("UTC") if ts.tz is None else ts.tz_convert("UTC")
    if end and isinstance(value, str) and len(value) == 10:
        ts = ts + pd.Timedelta(hours=23)
    return ts


# ---------------------------------------------------------------- ingestion


def ingest_csv(path, market_id: str, max_gap_hours: int = 3) -> MarketSeries:
    """Read a ``timestamp,price`` CSV into a clean hourly UTC series.

    Exact duplicate timestamps keep the last row. Distinct timestamps that
    fall in the same UTC hour (repeated wall-clock hours) are averaged.
    Runs of up to ``max_gap_hours`` missing hours are filled linearly;
    longer runs raise :class:`DataError`.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: cannot read CSV ({exc})") from exc
    if [c.strip().lower() for c in frame.columns] != ["timestamp", "price"]:
        raise DataError(f"{path}: expected header 'timestamp,price', got {','.join(frame.columns)}")
    frame.columns = ["timestamp", "price"]
    raw_ts = frame["timestamp"].str.strip()
    lines = np.arange(len(frame)) + 2  # header is line 1

    stamps = pd.to_datetime(raw_ts, utc=True, format="ISO8601", errors="coerce")
    bad = stamps.isna().to_numpy() | ~raw_ts.str.contains(_OFFSET_RE).to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"{path}:{lines[i]}: unparseable or offset-less timestamp {raw_ts.iloc[i]!r}")
    prices = pd.to_numeric(frame["price"], errors="coerce")
    bad = prices.isna().to_numpy() | ~np.isfinite(prices.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"{path}:{lines[i]}: unparseable price {frame['price'].iloc[i]!r}")
    if len(frame) == 0:
        raise DataError(f"{path}: no rows")

    df = pd.DataFrame({"raw": raw_ts.to_numpy(), "ts": stamps, "price": prices.to_numpy(dtype=float)})
    df = df.drop_duplicates(subset="ts", keep="last")
    df["hour"] = df["ts"].dt.floor("h")
    hourly = df.groupby("hour", sort=True)["price"].mean()

    full = pd.date_range(hourly.index[0], hourly.index[-1], freq="h", tz="UTC")
    missing = ~full.isin(hourly.index)
    if missing.any():
        # run-length of consecutive missing hours
        edges = np.flatnonzero(np.diff(np.concatenate([[0], missing.astype(np.int8), [0]])))
        for s, e in zip(edges[::2], edges[1::2]):
            if e - s > max_gap_hours:
                raise DataError(
                    f"{path}: gap of {e - s} hours from {full[s].isoformat()} to {full[e - 1].isoformat()} "
                    f"exceeds {max_gap_hours}h"
                )
    series = hourly.reindex(full).interpolate(method="linear")
    return MarketSeries(market_id, full, series.to_numpy())


# ------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    train_range: tuple[str, str] | None = None
    test_range: tuple[str, str] | None = None

    def __post_init__(self):
        for rng in (self.train_range, self.test_range):
            if rng is not None and _bound(rng[0], False) > _bound(rng[1], True):
                raise DataError(f"empty date range {rng}")
        if self.train_range and self.test_range:
            a0, a1 = _bound(self.train_range[0], False), _bound(self.train_range[1], True)
            b0, b1 = _bound(self.test_range[0], False), _bound(self.test_range[1], True)
            if a0 <= b1 and b0 <= a1:
                raise DataError(f"train range {self.train_range} overlaps test range {self.test_range}")

    @classmethod
    def for_market(cls, market_id: str) -> "SplitSpec":
        known = PAPER_SPLITS.get(market_id.upper(), {})
        return cls(known.get("train"), known.get("test"))


def default_test_range(series: MarketSeries) -> tuple[str, str]:
    """Second half of the complete days in ``series`` (used when no split is known)."""
    days = pd.DatetimeIndex(series.timestamps.normalize().unique())
    counts = pd.Series(series.timestamps.normalize()).value_counts()
    full_days = days[counts.reindex(days).to_numpy() == 24]
    if len(full_days) < 2:
        raise DataError(f"{series.market_id}: not enough complete days for a test split")
    half = full_days[len(full_days) // 2:]
    return half[0].strftime("%Y-%m-%d"), half[-1].strftime("%Y-%m-%d")


# ------------------------------------------------------------------ scaling


@dataclass
class Scaler:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)) or self.sigma <= 0:
            raise DataError(f"invalid scaler (mu={self.mu}, sigma={self.sigma})")

    @classmethod
    def fit(cls, prices) -> "Scaler":
        """z-score statistics; a constant series gets sigma = 1."""
        prices = np.asarray(prices, dtype=np.float64)
        if prices.size == 0:
            raise DataError("cannot fit a scaler on an empty series")
        sigma = float(np.std(prices))
        return cls(float(np.mean(prices)), sigma if sigma > 0 else 1.0)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.sigma + self.mu


# ---------------------------------------------------------------- windowing


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (n, lookback), normalized
    targets: np.ndarray  # (n, horizon), normalized
    domain_labels: np.ndarray  # (n,) in {0, 1}
    market_ids: np.ndarray  # (n,) str
    window_start: pd.DatetimeIndex  # first input hour
    target_start: pd.DatetimeIndex  # first forecast hour
    mu: np.ndarray  # (n,) scaler mean per row
    sigma: np.ndarray  # (n,) scaler std per row

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(
            self.inputs[idx], self.targets[idx], self.domain_labels[idx], self.market_ids[idx],
            self.window_start[idx], self.target_start[idx], self.mu[idx], self.sigma[idx],
        )

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values) * self.sigma[:, None] + self.mu[:, None]

    @staticmethod
    def concat(batches) -> "WindowBatch":
        batches = list(batches)
        return WindowBatch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]),
            np.concatenate([b.domain_labels for b in batches]),
            np.concatenate([b.market_ids for b in batches]),
            batches[0].window_start.append([b.window_start for b in batches[1:]]),
            batches[0].target_start.append([b.target_start for b in batches[1:]]),
            np.concatenate([b.mu for b in batches]),
            np.concatenate([b.sigma for b in batches]),
        )


def _build(series, scaler, lookback, horizon, starts, domain_label) -> WindowBatch:
    z = scaler.transform(series.prices)
    starts = np.asarray(starts, dtype=np.int64)
    span = np.arange(lookback + horizon)
    block = z[starts[:, None] + span] if len(starts) else np.zeros((0, lookback + horizon))
    n = len(starts)
    return WindowBatch(
        inputs=block[:, :lookback].copy(),
        targets=block[:, lookback:].copy(),
        domain_labels=np.full(n, domain_label, dtype=np.int64),
        market_ids=np.full(n, series.market_id, dtype=object),
        window_start=series.timestamps[starts],
        target_start=series.timestamps[starts + lookback],
        mu=np.full(n, scaler.mu),
        sigma=np.full(n, scaler.sigma),
    )


def make_windows(series: MarketSeries, scaler: Scaler, lookback: int, horizon: int,
                 stride: int = 1, domain_label: int = 1, anchor_midnight: bool = False) -> WindowBatch:
    """Sliding (input, target) windows of normalized prices.

    With ``anchor_midnight`` only windows whose forecast starts at 00:00 UTC
    are kept, one per day (``stride`` is then ignored).
    """
    if stride < 1:
        raise DataError("stride must be positive")
    n_total = len(series) - lookback - horizon + 1
    if n_total < 1:
        raise DataError(
            f"{series.market_id}: series of {len(series)} hours is shorter than "
            f"lookback+horizon = {lookback + horizon}"
        )
    starts = np.arange(n_total)
    if anchor_midnight:
        starts = starts[series.timestamps[starts + lookback].hour == 0]
    else:
        starts = starts[::stride]
    return _build(series, scaler, lookback, horizon, starts, domain_label)


def make_eval_windows(series: MarketSeries, scaler: Scaler, lookback: int, horizon: int,
                      test_range: tuple[str, str]) -> WindowBatch:
    """One day-ahead window per calendar day of ``test_range``.

    Each forecast starts at 00:00 UTC of its day and its input is the
    preceding ``lookback`` hours, which may reach back before the range.
    """
    days = pd.date_range(_bound(test_range[0], False).normalize(),
                         _bound(test_range[1], True).normalize(), freq="D")
    pos = series.timestamps.get_indexer(days)
    if (pos < 0).any():
        raise DataError(f"{series.market_id}: no data for test day {days[np.argmax(pos < 0)].date()}")
    starts = pos - lookback
    if (starts < 0).any():
        raise DataError(
            f"{series.market_id}: test day {days[np.argmax(starts < 0)].date()} lacks {lookback}h of history"
        )
    if (pos + horizon > len(series)).any():
        raise DataError(
            f"{series.market_id}: test day {days[np.argmax(pos + horizon > len(series))].date()} "
            f"lacks {horizon}h of actuals"
        )
    return _build(series, scaler, lookback, horizon, starts, 1)


# ---------------------------------------------------------------- synthetic


def synth_markets(seed: int, n_markets: int, n_hours: int, noise: float = 1.0,
                  start: str = "2016-01-04T00:00:00Z", amplitudes=None, phases=None,
                  offsets=None) -> list[MarketSeries]:
    """Sinusoidal price markets sharing daily/weekly structure.

    price(t) = 20 + 8 sin(2 pi t/24) + 3 sin(2 pi t/168)
               + a_m sin(2 pi t/24 + phi_m) + b_m + noise * N(0, 1)

    with per-market amplitude a_m, phase phi_m and offset b_m drawn from the
    seed unless given explicitly. Phases are spread evenly around the daily
    cycle (plus seeded jitter) so that the markets have distinct daily shapes.
    """
    rng = np.random.default_rng(seed)
    drawn_a = rng.uniform(2.0, 6.0, n_markets)
    spread = 2.0 * np.pi * np.arange(n_markets) / n_markets
    drawn_phi = spread + rng.uniform(-np.pi / 8, np.pi / 8, n_markets)
    drawn_b = rng.uniform(5.0, 20.0, n_markets)
    a = drawn_a if amplitudes is None else np.broadcast_to(np.asarray(amplitudes, float), (n_markets,))
    phi = drawn_phi if phases is None else np.broadcast_to(np.asarray(phases, float), (n_markets,))
    b = drawn_b if offsets is None else np.broadcast_to(np.asarray(offsets, float), (n_markets,))

    t = np.arange(n_hours, dtype=np.float64)
    stamps = pd.date_range(pd.Timestamp(start), periods=n_hours, freq="h")
    stamps = stamps.tz_localize("UTC") if stamps.tz is None else stamps.tz_convert("UTC")
    shared = 20.0 + 8.0 * np.sin(2 * np.pi * t / 24) + 3.0 * np.sin(2 * np.pi * t / 168)
    out = []
    for m in range(n_markets):
        eps = rng.standard_normal(n_hours)
        price = shared + a[m] * np.sin(2 * np.pi * t / 24 + phi[m]) + b[m] + noise * eps
        out.append(MarketSeries(f"m{m + 1}", stamps, price))
    return out


def autocorrelation(x, lag: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))
