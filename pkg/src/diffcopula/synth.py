"""Synthetic panels with known dependence and conditional laws."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cdc import DiffusionSchedule, gaussianize
from .ingest import AlignedPanel
from .normal import std_normal_cdf

DEFAULT_INTERVAL = 600
DEFAULT_START = 1_640_995_200  # 2022-01-01T00:00:00Z


def unit_t(nu: float = 5.0, scale: float = 1.0):
    """Student-t frozen distribution rescaled to standard deviation ``scale``."""
    return stats.t(df=nu, scale=scale * math.sqrt((nu - 2.0) / nu))


def equicorrelation(rho: float, d: int) -> np.ndarray:
    corr = np.full((d, d), float(rho))
    np.fill_diagonal(corr, 1.0)
    return corr


def _cholesky(corr: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ValueError("correlation matrix is not positive definite") from None


def _timestamps(n: int) -> np.ndarray:
    return DEFAULT_START + DEFAULT_INTERVAL * np.arange(1, n + 1, dtype=np.int64)


def _asset_ids(d: int) -> list[str]:
    return [f"A{i}" for i in range(d)]


def gaussian_copula_u(rho: float, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if not -1.0 < rho < 1.0:
        raise ValueError("|rho| must be < 1")
    if d > 1 and rho <= -1.0 / (d - 1):
        raise ValueError("equicorrelation matrix is not positive definite")
    chol = _cholesky(equicorrelation(rho, d))
    return std_normal_cdf(rng.standard_normal((n, d)) @ chol.T)


def gen_gaussian_copula(rho: float, marginals=None, n: int = 10_000, seed: int = 0, d: int = 2
                        ) -> tuple[AlignedPanel, np.ndarray]:
    """Returns panel with y = F_i^{-1}(u_i) and the true copula sample u.

    ``marginals`` is a list of frozen scipy distributions (anything with
    ``ppf``); by default each asset is a unit-variance t5 scaled to 1%.
    """
    if marginals is not None:
        d = len(marginals)
    else:
        marginals = [unit_t(5.0, 0.01)] * d
    rng = np.random.default_rng(seed)
    u = gaussian_copula_u(rho, d, n, rng)
    y = np.column_stack([m.ppf(u[:, i]) for i, m in enumerate(marginals)])
    return AlignedPanel.from_returns(_asset_ids(d), _timestamps(n), y), u


def t_copula_u(rho: float, nu: float, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if nu <= 2:
        raise ValueError("t-copula requires nu > 2")
    if not -1.0 < rho < 1.0:
        raise ValueError("|rho| must be < 1")
    chol = _cholesky(equicorrelation(rho, d))
    z = rng.standard_normal((n, d)) @ chol.T
    w = np.sqrt(rng.chisquare(nu, size=(n, 1)) / nu)
    return stats.t.cdf(z / w, df=nu)


def gen_clayton(theta: float, d: int = 2, n: int = 10_000, seed: int = 0) -> np.ndarray:
    """Marshall-Olkin sampling with a Gamma(1/theta) frailty."""
    if theta <= 0:
        raise ValueError("Clayton theta must be positive")
    rng = np.random.default_rng(seed)
    v = rng.gamma(1.0 / theta, 1.0, size=(n, 1))
    e = rng.exponential(size=(n, d))
    return np.power(1.0 + e / v, -1.0 / theta)


def clayton_lower_tail(theta: float) -> float:
    return 2.0 ** (-1.0 / theta)


@dataclass
class ArVolPanel:
    """GARCH(1,1) panel with t innovations and its exact conditional law."""

    panel: AlignedPanel
    sigma: np.ndarray      # (N, d) conditional standard deviations
    innovations_u: np.ndarray
    nu: float

    def conditional_log_density(self) -> np.ndarray:
        """log p(y_t | past) for every cell of the panel."""
        dist = unit_t(self.nu)
        return dist.logpdf(self.panel.returns / self.sigma) - np.log(self.sigma)

    def conditional_cdf(self) -> np.ndarray:
        return unit_t(self.nu).cdf(self.panel.returns / self.sigma)


def gen_ar_vol_panel(d: int = 1, n: int = 10_000, seed: int = 0, *, omega: float = 1e-6,
                     a: float = 0.1, b: float = 0.85, nu: float = 5.0, rho: float = 0.0,
                     copula: str = "gaussian", burn_in: int = 500) -> ArVolPanel:
    """sigma_t^2 = omega + a y_{t-1}^2 + b sigma_{t-1}^2, y_t = sigma_t eps_t.

    Innovations are unit-variance t_nu coupled across assets by a Gaussian
    (or t, or independence when rho = 0) copula.
    """
    if n < 1000:
        raise ValueError("need N >= 1000")
    if a < 0 or b < 0 or a + b >= 1:
        raise ValueError("nonstationary GARCH parameters (a + b must be < 1)")
    rng = np.random.default_rng(seed)
    total = n + burn_in
    if copula == "gaussian":
        u = gaussian_copula_u(rho, d, total, rng) if d > 1 else rng.uniform(size=(total, 1))
    elif copula == "t":
        u = t_copula_u(rho, nu, d, total, rng)
    else:
        raise ValueError(f"unknown copula {copula!r}")
    eps = unit_t(nu).ppf(u)
    var = np.full(d, omega / (1.0 - a - b))
    y = np.empty((total, d))
    sig = np.empty((total, d))
    prev = np.zeros(d)
    for t in range(total):
        var = omega + a * prev**2 + b * var
        sig[t] = np.sqrt(var)
        prev = sig[t] * eps[t]
        y[t] = prev
    keep = slice(burn_in, None)
    panel = AlignedPanel.from_returns(_asset_ids(d), _timestamps(n), y[keep])
    return ArVolPanel(panel, sig[keep], u[keep], nu)


@dataclass
class SynthSpec:
    kind: str = "gaussian-copula"
    d: int = 2
    rho: float = 0.7
    theta: float = 2.0
    nu_copula: float = 5.0
    marginal_nu: float = 5.0
    marginal_scale: float = 0.01
    n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        kinds = ("gaussian-copula", "clayton-copula", "t-copula", "ar-vol-panel")
        if self.kind not in kinds:
            raise ValueError(f"kind must be one of {kinds}")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("|rho| must be < 1")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.nu_copula <= 2 or self.marginal_nu <= 2:
            raise ValueError("degrees of freedom must exceed 2")
        if self.d < 1 or self.n < 2:
            raise ValueError("need d >= 1 and n >= 2")


@dataclass
class SynthResult:
    panel: AlignedPanel
    truth: dict = field(default_factory=dict)
    u: np.ndarray | None = None


def generate(spec: SynthSpec) -> SynthResult:
    """Dispatch a :class:`SynthSpec` to its generator."""
    marg = unit_t(spec.marginal_nu, spec.marginal_scale)
    truth = {"kind": spec.kind, "d": spec.d, "n": spec.n, "seed": spec.seed,
             "marginal": {"family": "student_t_unit_variance", "nu": spec.marginal_nu,
                          "scale": spec.marginal_scale}}
    if spec.kind == "ar-vol-panel":
        ar = gen_ar_vol_panel(spec.d, spec.n, spec.seed, rho=spec.rho, nu=spec.marginal_nu)
        truth.update({"omega": 1e-6, "a": 0.1, "b": 0.85, "rho": spec.rho})
        truth.pop("marginal")
        return SynthResult(ar.panel, truth, ar.innovations_u)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian-copula":
        u = gaussian_copula_u(spec.rho, spec.d, spec.n, rng)
        truth["rho"] = spec.rho
    elif spec.kind == "t-copula":
        u = t_copula_u(spec.rho, spec.nu_copula, spec.d, spec.n, rng)
        truth.update({"rho": spec.rho, "nu_copula": spec.nu_copula})
    else:
        u = gen_clayton(spec.theta, spec.d, spec.n, spec.seed)
        truth.update({"theta": spec.theta, "lower_tail_dependence": clayton_lower_tail(spec.theta)})
    y = marg.ppf(u)
    return SynthResult(AlignedPanel.from_returns(_asset_ids(spec.d), _timestamps(spec.n), y), truth, u)


# -- analytic references ---------------------------------------------------------

def gaussian_spearman(rho: float) -> float:
    return 6.0 / math.pi * math.asin(rho / 2.0)


def gaussian_copula_log_density(u, corr) -> np.ndarray:
    z = gaussianize(np.atleast_2d(u))
    corr = np.asarray(corr, dtype=np.float64)
    inv = np.linalg.inv(corr)
    _, logdet = np.linalg.slogdet(corr)
    quad = np.einsum("ni,ij,nj->n", z, inv - np.eye(corr.shape[0]), z)
    return -0.5 * logdet - 0.5 * quad


class AnalyticGaussianClassifier:
    """Bayes-optimal time classifier for Gaussian-copula data.

    With balanced classes the logits equal log p_s(z) up to a shared
    constant, where p_s = N(0, a_s^2 C + sigma_s^2 I).  Exposes the same
    ``score`` interface as a trained copula model.
    """

    def __init__(self, corr, schedule: DiffusionSchedule | None = None):
        self.corr = np.asarray(corr, dtype=np.float64)
        self.dim = self.corr.shape[0]
        self.schedule = schedule or DiffusionSchedule.geometric()
        a, s = self.schedule.decay, self.schedule.sigma
        eye = np.eye(self.dim)
        covs = [a[i] ** 2 * self.corr + s[i] ** 2 * eye for i in range(self.schedule.K + 1)]
        self._prec = np.array([np.linalg.inv(c) for c in covs])
        self._logdet = np.array([np.linalg.slogdet(c)[1] for c in covs])

    def logits(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        quad = np.einsum("ni,sij,nj->ns", z, self._prec, z)
        return -0.5 * quad - 0.5 * self._logdet

    def score(self, z, s) -> np.ndarray:
        z = np.atleast_2d(z)
        K = self.schedule.K
        return -z @ self._prec[s] + z @ self._prec[K] - z

    def log_density(self, u) -> np.ndarray:
        lg = self.logits(gaussianize(np.atleast_2d(u)))
        return lg[:, 0] - lg[:, self.schedule.K]
