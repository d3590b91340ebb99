"""Point, probabilistic and joint-tail forecast diagnostics.

Forecast samples are arrays of shape (T, m, d): T timesteps, m draws per
timestep, d assets.  Observed panels are (T, d).
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .normal import std_normal_inv_cdf


@dataclass
class EvalConfig:
    tail_threshold: float = 0.005
    quantiles: tuple[float, ...] = (0.03, 0.05, 0.10)
    samples: int = 100
    side: str = "both"
    seed: int = 0

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if any(not 0.0 < q < 0.5 for q in self.quantiles):
            raise ValueError("quantiles must lie in (0, 0.5)")
        if self.tail_threshold <= 0:
            raise ValueError("tail threshold must be positive")
        if self.samples < 2:
            raise ValueError("need at least 2 samples per timestep")
        if self.side not in ("lower", "upper", "both"):
            raise ValueError("side must be lower, upper or both")


def _pair(observed, predicted) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(observed, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, yhat


def rmse(observed, predicted) -> float:
    y, yhat = _pair(observed, predicted)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(observed, predicted) -> float:
    y, yhat = _pair(observed, predicted)
    return float(np.mean(np.abs(y - yhat)))


def crps_sample(samples, y) -> float:
    """mean|x_i - y| - 0.5 mean_{i,j}|x_i - x_j|, i.e. the CRPS of the ensemble's empirical CDF."""
    return float(crps_ensemble(np.asarray(samples, dtype=np.float64)[None, :], np.atleast_1d(y))[0])


def crps_ensemble(samples, y) -> np.ndarray:
    """Row-wise sample CRPS for samples (n, m) and observations (n,)."""
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=-1)
    m = x.shape[-1]
    if m < 2:
        raise ValueError("CRPS needs at least 2 samples")
    y = np.asarray(y, dtype=np.float64)
    term1 = np.abs(x - y[..., None]).mean(axis=-1)
    # sum_{i,j}|x_i - x_j| = 2 sum_i (2i - m - 1) x_(i) for sorted x, i = 1..m
    w = 2.0 * np.arange(1, m + 1) - m - 1
    term2 = 2.0 * (x * w).sum(axis=-1) / (m * m)
    return term1 - 0.5 * term2


def tail_accuracy(observed, predicted, tau: float) -> float:
    """Recall of exceedances y > tau by predictions; NaN when no observation exceeds tau."""
    y, yhat = _pair(observed, predicted)
    events = y > tau
    if not events.any():
        return math.nan
    return float(np.sum(events & (yhat > tau)) / np.sum(events))


def pit_cdf_curve(u, grid) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of PIT values evaluated on ``grid``."""
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    grid = np.asarray(grid, dtype=np.float64)
    return grid, np.searchsorted(u, grid, side="right") / u.size


def qq_points(u) -> tuple[np.ndarray, np.ndarray]:
    """(Phi^{-1}(i/(n+1)), sorted Phi^{-1}(u)) pairs."""
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size < 2:
        raise ValueError("QQ plot needs at least 2 values")
    eps = 1e-12
    if np.any((u <= 0) | (u >= 1)):
        warnings.warn("PIT values outside (0, 1) clamped for the QQ plot", stacklevel=2)
        u = np.clip(u, eps, 1 - eps)
    n = u.size
    theoretical = std_normal_inv_cdf(np.arange(1, n + 1) / (n + 1))
    return theoretical, np.sort(std_normal_inv_cdf(u))


@dataclass
class CorrelationEntry:
    q: float
    frobenius: float
    bias: float
    n_observed: int
    sufficient: bool = True
    sigma_obs: np.ndarray | None = field(default=None, repr=False)
    sigma_model: np.ndarray | None = field(default=None, repr=False)


def _offdiag_mean(mat: np.ndarray) -> float:
    d = mat.shape[0]
    return float((mat.sum() - np.trace(mat)) / (d * (d - 1)))


def corr_extremes(observed, samples, q: float, mode: str = "event") -> CorrelationEntry:
    """Correlation structure on market-down extremes.

    Observed: timesteps whose cross-asset mean return is below its q-quantile.
    Model, ``mode="event"``: pooled forecast draws whose cross-asset mean is
    below the q-quantile of all pooled draw means, so both sides condition on
    the same event.  ``mode="subset"`` instead pools every draw made at the
    selected observed timesteps.
    """
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    d = y.shape[1]
    obs_mean = y.mean(axis=1)
    sel = obs_mean < np.quantile(obs_mean, q)
    if d < 2 or sel.sum() < d + 2:
        return CorrelationEntry(q, math.nan, math.nan, int(sel.sum()), sufficient=False)
    if mode == "subset":
        x = x[sel].reshape(-1, d)
        mod_sel = np.ones(x.shape[0], dtype=bool)
    elif mode == "event":
        x = x.reshape(-1, d)
        mod_mean = x.mean(axis=1)
        mod_sel = mod_mean < np.quantile(mod_mean, q)
    else:
        raise ValueError("mode must be 'event' or 'subset'")
    if mod_sel.sum() < d + 2:
        return CorrelationEntry(q, math.nan, math.nan, int(sel.sum()), sufficient=False)
    s_obs = np.corrcoef(y[sel], rowvar=False)
    s_mod = np.corrcoef(x[mod_sel], rowvar=False)
    diff = s_mod - s_obs
    return CorrelationEntry(q, float(np.linalg.norm(diff, "fro")), _offdiag_mean(diff),
                            int(sel.sum()), True, s_obs, s_mod)


def tail_thresholds(observed, q: float) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(observed, dtype=np.float64)
    return np.quantile(y, q, axis=0), np.quantile(y, 1.0 - q, axis=0)


def in_tail(values, lower, upper, side: str = "both") -> np.ndarray:
    if side == "lower":
        return values < lower
    if side == "upper":
        return values > upper
    return (values < lower) | (values > upper)


def systemic_fractions(observed, samples, q: float, side: str = "both") -> tuple[np.ndarray, np.ndarray]:
    """Observed severity per timestep and per-timestep fraction of draws with exactly k tail assets.

    Returns (severity (T,), fractions (T, d+1)); each fractions row sums to one.
    """
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    lo, hi = tail_thresholds(y, q)
    d = y.shape[1]
    severity = in_tail(y, lo, hi, side).sum(axis=1)
    counts = in_tail(x, lo, hi, side).sum(axis=2)  # (T, m)
    fractions = np.stack([(counts == k).mean(axis=1) for k in range(d + 1)], axis=1)
    return severity, fractions


def systemic_event_prob(observed, samples, q: float, side: str = "both") -> dict[int, float]:
    """Average model probability of exactly k tail assets, grouped by observed severity k.

    k runs over 1..d; groups with no observations are omitted.
    """
    severity, fractions = systemic_fractions(observed, samples, q, side)
    out = {}
    for k in range(1, fractions.shape[1]):
        rows = severity == k
        if rows.any():
            out[k] = float(fractions[rows, k].mean())
    return out


@dataclass
class BlackSwanPoint:
    magnitude: float
    surprise: float
    timestamp: int = 0


def mahalanobis_surprise(y, draws, ridge: float = 1e-10) -> float:
    """Mahalanobis distance of ``y`` under the sample mean/covariance of ``draws`` (m, d)."""
    draws = np.asarray(draws, dtype=np.float64)
    m, d = draws.shape
    if m < d + 2:
        raise ValueError("need at least d + 2 draws")
    mu = draws.mean(axis=0)
    cov = np.atleast_2d(np.cov(draws, rowvar=False)) + ridge * np.eye(d)
    diff = np.asarray(y, dtype=np.float64) - mu
    sol = np.linalg.solve(cov, diff)
    return float(math.sqrt(max(float(diff @ sol), 0.0)))


def black_swan_map(observed, samples, timestamps=None, ridge: float = 1e-10) -> list[BlackSwanPoint]:
    """Event magnitude (sum |y|) versus model surprise per timestep; singular steps skipped."""
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    if timestamps is None:
        timestamps = np.arange(y.shape[0])
    points = []
    for t in range(y.shape[0]):
        try:
            surprise = mahalanobis_surprise(y[t], x[t], ridge)
        except np.linalg.LinAlgError:
            continue
        if not np.isfinite(surprise):
            continue
        points.append(BlackSwanPoint(float(np.abs(y[t]).sum()), surprise, int(timestamps[t])))
    return points


def joint_tail_crps(observed, samples, q: float = 0.05, min_assets: int = 3) -> float:
    """Pooled sample CRPS over timesteps with at least ``min_assets`` assets in two-sided q tails.

    NaN when no timestep qualifies.
    """
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    lo, hi = tail_thresholds(y, q)
    rows = in_tail(y, lo, hi, "both").sum(axis=1) >= min_assets
    if not rows.any():
        return math.nan
    yy = y[rows]                               # (n, d)
    xx = np.moveaxis(x[rows], 2, 1)            # (n, d, m)
    return float(crps_ensemble(xx.reshape(-1, xx.shape[-1]), yy.reshape(-1)).mean())


@dataclass
class MetricsReport:
    rows: list[dict]
    pit: np.ndarray
    qq: tuple[np.ndarray, np.ndarray]


def point_and_crps(observed, samples, tau: float, rng: np.random.Generator, asset_ids) -> list[dict]:
    """Per-asset and pooled RMSE/MAE (vs sample mean), CRPS and Tail accuracy (vs one seeded draw)."""
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    T, m, d = x.shape
    mean = x.mean(axis=1)
    pick = rng.integers(0, m, size=T)
    draw = x[np.arange(T), pick]  # (T, d)
    crps = crps_ensemble(np.moveaxis(x, 1, 2), y)  # (T, d)
    rows = []
    for j, name in enumerate(asset_ids):
        rows.append({"asset": name, "rmse": rmse(y[:, j], mean[:, j]), "mae": mae(y[:, j], mean[:, j]),
                     "crps": float(crps[:, j].mean()),
                     "tail": tail_accuracy(y[:, j], draw[:, j], tau)})
    rows.append({"asset": "pooled", "rmse": rmse(y, mean), "mae": mae(y, mean),
                 "crps": float(crps.mean()), "tail": tail_accuracy(y, draw, tau)})
    return rows


# -- CSV emission -----------------------------------------------------------------

def to_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def read_csv(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def pit_ks(u) -> float:
    """Kolmogorov-Smirnov distance of PIT values from Uniform(0, 1)."""
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    n = u.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - u), np.max(u - (i - 1) / n)))


REPORT_FILES = ("metrics.csv", "pit_curve.csv", "qq.csv", "corr_extremes.csv",
                "systemic.csv", "black_swan.csv", "joint_tail_crps.csv")

PIT_GRID = np.linspace(0.0, 1.0, 101)


def build_reports(observed, samples, pit, asset_ids, timestamps, config: EvalConfig,
                  rng: np.random.Generator) -> dict[str, str]:
    """Every report table as CSV text, keyed by file name.

    observed (T, d), samples (T, m, d), pit (T, d) marginal PIT values.
    """
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    pit = np.asarray(pit, dtype=np.float64)
    d = y.shape[1]
    out = {}

    rows = point_and_crps(y, x, config.tail_threshold, rng, asset_ids)
    ks = [pit_ks(pit[:, j]) for j in range(d)] + [pit_ks(pit)]
    out["metrics.csv"] = to_csv(
        ["asset", "rmse", "mae", "crps", "tail_accuracy", "pit_ks"],
        [[r["asset"], r["rmse"], r["mae"], r["crps"], r["tail"], k] for r, k in zip(rows, ks)])

    curve, qq = [], []
    for j, name in enumerate(asset_ids):
        grid, ecdf = pit_cdf_curve(pit[:, j], PIT_GRID)
        curve += [[name, g, e] for g, e in zip(grid, ecdf)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            theo, emp = qq_points(pit[:, j])
        qq += [[name, a, b] for a, b in zip(theo, emp)]
    out["pit_curve.csv"] = to_csv(["asset", "x", "ecdf"], curve)
    out["qq.csv"] = to_csv(["asset", "theoretical", "empirical"], qq)

    corr = [corr_extremes(y, x, q) for q in config.quantiles]
    out["corr_extremes.csv"] = to_csv(
        ["q", "frobenius", "bias", "n_observed", "sufficient"],
        [[c.q, c.frobenius, c.bias, c.n_observed, int(c.sufficient)] for c in corr])

    sys_rows = []
    for q in config.quantiles:
        severity, _ = systemic_fractions(y, x, q, config.side)
        for k, p in systemic_event_prob(y, x, q, config.side).items():
            sys_rows.append([q, k, p, int(np.sum(severity == k))])
    out["systemic.csv"] = to_csv(["q", "k", "model_prob", "n_timesteps"], sys_rows)

    swans = black_swan_map(y, x, timestamps) if x.shape[1] >= d + 2 else []
    out["black_swan.csv"] = to_csv(["timestamp", "magnitude", "surprise"],
                                   [[p.timestamp, p.magnitude, p.surprise] for p in swans])

    lo, hi = tail_thresholds(y, 0.05)
    n_joint = int(np.sum(in_tail(y, lo, hi, "both").sum(axis=1) >= 3))
    out["joint_tail_crps.csv"] = to_csv(["q", "crps", "n_timesteps"],
                                        [[0.05, joint_tail_crps(y, x, 0.05), n_joint]])
    return out


# -- minimal SVG rendering ------------------------------------------------------

def svg_plot(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str, kind: str = "line",
             xlabel: str = "", ylabel: str = "", diagonal: bool = False) -> str:
    """Self-contained SVG line or scatter chart; one colour per series."""
    width, height, pad = 480, 360, 48
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
    finite = [(np.asarray(a, float), np.asarray(b, float)) for a, b in series.values()]
    xs = np.concatenate([a[np.isfinite(a) & np.isfinite(b)] for a, b in finite] or [np.zeros(1)])
    ys = np.concatenate([b[np.isfinite(a) & np.isfinite(b)] for a, b in finite] or [np.zeros(1)])
    if xs.size == 0:
        xs = ys = np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
             f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})"'
             f' text-anchor="middle">{ylabel}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}"'
             ' fill="none" stroke="black"/>']
    for v, anchor in ((x0, "start"), (x1, "end")):
        parts.append(f'<text x="{px(v):.1f}" y="{height - pad + 14}" font-size="10"'
                     f' text-anchor="{anchor}">{v:.3g}</text>')
    for v in (y0, y1):
        parts.append(f'<text x="{pad - 4}" y="{py(v):.1f}" font-size="10" text-anchor="end">{v:.3g}</text>')
    if diagonal:
        lo, hi = max(x0, y0), min(x1, y1)
        parts.append(f'<line x1="{px(lo):.1f}" y1="{py(lo):.1f}" x2="{px(hi):.1f}" y2="{py(hi):.1f}"'
                     ' stroke="grey" stroke-dasharray="4"/>')
    for i, (name, (a, b)) in enumerate(series.items()):
        colour = colours[i % len(colours)]
        a, b = np.asarray(a, float), np.asarray(b, float)
        ok = np.isfinite(a) & np.isfinite(b)
        if kind == "line":
            pts = " ".join(f"{px(u):.1f},{py(v):.1f}" for u, v in zip(a[ok], b[ok]))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}"/>')
        else:
            parts += [f'<circle cx="{px(u):.1f}" cy="{py(v):.1f}" r="2" fill="{colour}"/>'
                      for u, v in zip(a[ok], b[ok])]
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 * (i + 1)}" font-size="10"'
                     f' text-anchor="end" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
