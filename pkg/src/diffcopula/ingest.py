"""OHLCV ingestion, resampling, returns, features and conditioning windows."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Mapping, Sequence

import numpy as np

REQUIRED_COLUMNS = ("timestamp", "open", "high", "low", "close", "volume")
N_FEATURES = 4


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class PriceBar:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass
class AlignedPanel:
    """Timestamp-aligned closes and simple returns for ``d`` assets.

    ``closes`` has one row per timestamp; ``returns`` has one row fewer and
    row ``j`` is the return realised at ``timestamps[j + 1]``.
    """

    asset_ids: list[str]
    timestamps: np.ndarray
    closes: np.ndarray
    returns: np.ndarray

    @property
    def n_assets(self) -> int:
        return len(self.asset_ids)

    @property
    def return_timestamps(self) -> np.ndarray:
        return self.timestamps[1:]

    def to_csv(self) -> str:
        """Panel cache format: timestamp plus one return column per asset."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["timestamp", *self.asset_ids])
        for ts, row in zip(self.return_timestamps, self.returns):
            writer.writerow([int(ts), *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_returns(cls, asset_ids: Sequence[str], timestamps, returns,
                     start_price: float = 100.0) -> "AlignedPanel":
        """Build a panel from returns, reconstructing closes from ``start_price``.

        ``timestamps`` label the returns; the implied opening timestamp is one
        interval earlier.
        """
        returns = np.asarray(returns, dtype=np.float64)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        if returns.ndim != 2 or returns.shape[0] != timestamps.shape[0]:
            raise DataError("returns must be N x d with one timestamp per row")
        step = int(timestamps[1] - timestamps[0]) if len(timestamps) > 1 else 60
        closes = start_price * np.vstack([np.ones((1, returns.shape[1])),
                                          np.cumprod(1.0 + returns, axis=0)])
        ts = np.concatenate([[timestamps[0] - step], timestamps])
        return cls(list(asset_ids), ts, closes, returns.copy())

    @classmethod
    def from_csv(cls, text: str) -> "AlignedPanel":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0].strip().lower() != "timestamp":
            raise DataError("panel CSV must start with a timestamp header")
        assets = [c.strip() for c in rows[0][1:]]
        body = [r for r in rows[1:] if r]
        ts = np.array([int(r[0]) for r in body], dtype=np.int64)
        rets = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
        return cls.from_returns(assets, ts, rets.reshape(len(body), len(assets)))


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        stamp = datetime.fromisoformat(text.replace("Z", "+00:00"))
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        return int(stamp.timestamp())
    if value > 1e11:  # milliseconds
        value /= 1000.0
    return int(round(value))


def parse_ohlcv(csv_text: str, asset_id: str = "") -> list[PriceBar]:
    """Parse an OHLCV CSV. Rows are sorted by time; duplicate stamps keep the last row."""
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{asset_id}: empty CSV") from None
    cols = [h.strip().lower() for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in cols]
    if missing:
        raise DataError(f"{asset_id}: missing columns {missing}")
    idx = [cols.index(c) for c in REQUIRED_COLUMNS]
    bars: dict[int, PriceBar] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            ts = _parse_timestamp(row[idx[0]])
            o, h, lo, c, v = (float(row[i]) for i in idx[1:])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{asset_id}: line {lineno}: cannot parse row ({exc})") from None
        if min(o, h, lo, c) <= 0:
            raise DataError(f"{asset_id}: line {lineno}: non-positive price")
        if not all(np.isfinite([o, h, lo, c, v])):
            raise DataError(f"{asset_id}: line {lineno}: non-finite value")
        bars[ts] = PriceBar(ts, o, h, lo, c, v)
    return [bars[t] for t in sorted(bars)]


def resample(bars: Sequence[PriceBar], interval_seconds: int) -> list[PriceBar]:
    """Aggregate bars into ``interval_seconds`` buckets aligned to the epoch."""
    if interval_seconds <= 0:
        raise DataError("interval must be positive")
    if len(bars) >= 2:
        spacing = int(np.min(np.diff([b.timestamp for b in bars])))
        if interval_seconds < spacing or interval_seconds % spacing:
            raise DataError(
                f"interval {interval_seconds}s is not a positive multiple of source spacing {spacing}s")
    out: list[PriceBar] = []
    bucket: list[PriceBar] = []
    current = None
    for bar in bars:
        start = bar.timestamp - bar.timestamp % interval_seconds
        if current is not None and start != current:
            out.append(_merge(current, bucket))
            bucket = []
        current = start
        bucket.append(bar)
    if bucket:
        out.append(_merge(current, bucket))
    return out


def _merge(start: int, bucket: list[PriceBar]) -> PriceBar:
    return PriceBar(
        timestamp=int(start),
        open=bucket[0].open,
        high=max(b.high for b in bucket),
        low=min(b.low for b in bucket),
        close=bucket[-1].close,
        volume=float(sum(b.volume for b in bucket)),
    )


def compute_returns(closes) -> np.ndarray:
    """Simple returns (P[t+1] - P[t]) / P[t]."""
    closes = np.asarray(closes, dtype=np.float64)
    if closes.shape[0] < 2:
        raise DataError("need at least two prices")
    if np.any(closes <= 0):
        raise DataError("prices must be positive")
    return (closes[1:] - closes[:-1]) / closes[:-1]


def align_panel(series: Mapping[str, Sequence[PriceBar]]) -> AlignedPanel:
    """Intersect timestamps across assets and compute returns on the aligned closes."""
    if len(series) < 2:
        raise DataError("need at least two assets")
    common = None
    for bars in series.values():
        stamps = {b.timestamp for b in bars}
        common = stamps if common is None else common & stamps
    if not common or len(common) < 2:
        raise DataError("timestamp intersection across assets is empty")
    ts = np.array(sorted(common), dtype=np.int64)
    closes = np.empty((len(ts), len(series)))
    for j, bars in enumerate(series.values()):
        lookup = {b.timestamp: b.close for b in bars}
        closes[:, j] = [lookup[t] for t in ts]
    return AlignedPanel(list(series), ts, closes, compute_returns(closes))


@dataclass(frozen=True)
class FeatureVector:
    volatility: float
    drawdown: float
    trend: float
    path_length: float

    def as_array(self) -> np.ndarray:
        return np.array([self.volatility, self.drawdown, self.trend, self.path_length])


def _features_array(lagged: np.ndarray) -> np.ndarray:
    """Vectorised features for an (n, k) array of lagged returns."""
    vol = lagged.std(axis=1)
    path = np.abs(lagged).sum(axis=1)
    trend = lagged.sum(axis=1) / (path + 1e-12)
    prices = np.cumprod(np.hstack([np.ones((lagged.shape[0], 1)), 1.0 + lagged]), axis=1)
    peak = np.maximum.accumulate(prices, axis=1)
    drawdown = np.clip(((peak - prices) / peak).max(axis=1), 0.0, 1.0)
    return np.column_stack([vol, drawdown, trend, path])


def build_features(lagged_returns) -> FeatureVector:
    """Rolling volatility, max drawdown, trend strength and path length of a window."""
    lagged = np.asarray(lagged_returns, dtype=np.float64)
    if lagged.ndim != 1 or lagged.size == 0:
        raise DataError("expected a 1-D window of returns")
    if not np.all(np.isfinite(lagged)):
        raise DataError("window contains non-finite values")
    return FeatureVector(*_features_array(lagged[None, :])[0])


@dataclass(frozen=True)
class ConditioningWindow:
    lagged: np.ndarray
    features: FeatureVector
    target: float
    timestamp: int


@dataclass
class WindowSet:
    """Columnar batch of conditioning windows for one asset."""

    lagged: np.ndarray      # (n, k)
    features: np.ndarray    # (n, 4)
    targets: np.ndarray     # (n,)
    timestamps: np.ndarray  # (n,) target timestamps

    def __len__(self) -> int:
        return self.targets.shape[0]

    def __getitem__(self, index) -> "WindowSet":
        if isinstance(index, (int, np.integer)):
            index = slice(index, index + 1)
        return WindowSet(self.lagged[index], self.features[index],
                         self.targets[index], self.timestamps[index])

    def window(self, i: int) -> ConditioningWindow:
        return ConditioningWindow(self.lagged[i].copy(), FeatureVector(*self.features[i]),
                                  float(self.targets[i]), int(self.timestamps[i]))

    @classmethod
    def from_series(cls, returns, timestamps=None, k: int = 14) -> "WindowSet":
        returns = np.asarray(returns, dtype=np.float64)
        n = returns.shape[0] - k
        if n < 1:
            raise DataError(f"need more than k={k} returns, got {returns.shape[0]}")
        if timestamps is None:
            timestamps = np.arange(returns.shape[0])
        lagged = np.lib.stride_tricks.sliding_window_view(returns, k)[:n].copy()
        return cls(lagged, _features_array(lagged), returns[k:].copy(),
                   np.asarray(timestamps)[k:].copy())


def make_windows(panel: AlignedPanel, k: int = 14, split_fraction: float = 0.8,
                 purge: bool = True) -> tuple[list[WindowSet], list[WindowSet]]:
    """Chronologically split per-asset windows at index ``round(split_fraction * n)``.

    With ``purge`` (the default) the first ``k`` windows after the cut are
    dropped so that no test window's lags overlap a training target.
    """
    if not 0.0 < split_fraction < 1.0:
        raise DataError("split_fraction must lie in (0, 1)")
    if panel.timestamps.shape[0] <= k + 1:
        raise DataError(f"panel too short for k={k}: {panel.timestamps.shape[0]} rows")
    train, test = [], []
    for j in range(panel.n_assets):
        ws = WindowSet.from_series(panel.returns[:, j], panel.return_timestamps, k)
        cut = int(round(split_fraction * len(ws)))
        train.append(ws[:cut])
        test.append(ws[cut + (k if purge else 0):])
    return train, test
