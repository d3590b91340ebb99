"""Standard normal CDF and quantile function."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc

# Acklam's rational approximation coefficients.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def std_normal_cdf(x):
    """Phi(x) via the complementary error function (accurate in both tails)."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / _SQRT2PI


def _horner(coefs, x):
    acc = np.zeros_like(x) + coefs[0]
    for c in coefs[1:]:
        acc = acc * x + c
    return acc


def std_normal_inv_cdf(p):
    """Phi^{-1}(p) for p in (0, 1).

    Rational approximation followed by one Halley refinement step, which
    brings the result to full double precision.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise ValueError("std_normal_inv_cdf requires p strictly inside (0, 1)")
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    x = np.empty_like(p)

    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)

    q = np.sqrt(-2.0 * np.log(p[lo]))
    x[lo] = _horner(_C, q) / (_horner(_D + (1.0,), q))
    q = np.sqrt(-2.0 * np.log1p(-p[hi]))
    x[hi] = -_horner(_C, q) / (_horner(_D + (1.0,), q))
    q = p[mid] - 0.5
    r = q * q
    x[mid] = _horner(_A, r) * q / _horner(_B + (1.0,), r)

    # Halley step on the tail nearest to p keeps relative accuracy.
    upper = p > 0.5
    err = np.where(upper, 0.5 * erfc(x / _SQRT2) - (1.0 - p), std_normal_cdf(x) - p)
    err = np.where(upper, -err, err)
    u = err * _SQRT2PI * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    return x[0] if scalar else x
