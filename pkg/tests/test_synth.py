import numpy as np
import pytest
from scipy import stats

from diffcopula.synth import (SynthSpec, clayton_lower_tail, gaussian_spearman, gen_ar_vol_panel, gen_clayton,
                              gen_gaussian_copula, generate, unit_t)


def test_gaussian_copula_independence_and_spearman():
    panel, u = gen_gaussian_copula(0.0, n=10_000, seed=0)
    assert abs(np.corrcoef(panel.returns.T)[0, 1]) < 0.03
    panel, u = gen_gaussian_copula(0.7, n=100_000, seed=1)
    assert abs(stats.spearmanr(u[:, 0], u[:, 1])[0] - gaussian_spearman(0.7)) < 0.02
    assert gaussian_spearman(0.7) == pytest.approx(0.6829, abs=1e-4)
    for j in range(2):
        assert stats.kstest(u[:, j], "uniform").statistic < 0.01
    np.testing.assert_allclose(panel.returns, unit_t(5, 0.01).ppf(u), rtol=1e-12)


def test_gaussian_copula_rejects_non_pd():
    with pytest.raises(ValueError):
        gen_gaussian_copula(-0.6, d=3, n=100)
    with pytest.raises(ValueError):
        SynthSpec(rho=1.2)


def test_clayton_tail_dependence():
    u = gen_clayton(2.0, 2, 1_000_000, seed=0)
    q = 0.02
    lam = np.mean((u[:, 0] < q) & (u[:, 1] < q)) / q
    assert abs(lam - clayton_lower_tail(2.0)) < 0.08
    for j in range(2):
        assert stats.kstest(u[:100_000, j], "uniform").statistic < 0.01
    near = gen_clayton(0.01, 2, 100_000, seed=1)
    assert abs(stats.spearmanr(near[:, 0], near[:, 1])[0]) < 0.05


def test_ar_vol_panel_properties():
    iid = gen_ar_vol_panel(1, 20_000, seed=0, a=0.0, b=0.0, omega=1e-4)
    assert stats.kurtosis(iid.panel.returns[:, 0], fisher=False) > 3
    ar = gen_ar_vol_panel(1, 10_000, seed=1)
    y2 = ar.panel.returns[:, 0] ** 2
    assert np.corrcoef(y2[:-1], y2[1:])[0, 1] > 0.05
    nll = -ar.conditional_log_density().mean()
    entropy = np.mean(np.log(ar.sigma)) + unit_t(5.0).entropy()
    assert abs(nll - entropy) < 0.05
    u = ar.conditional_cdf()
    assert stats.kstest(u[:, 0], "uniform").statistic < 0.02
    with pytest.raises(ValueError):
        gen_ar_vol_panel(1, 2000, a=0.5, b=0.5)
    with pytest.raises(ValueError):
        gen_ar_vol_panel(1, 500)


def test_ar_vol_panel_recursion():
    ar = gen_ar_vol_panel(2, 1000, seed=3, rho=0.5)
    y, s = ar.panel.returns, ar.sigma
    np.testing.assert_allclose(s[1:] ** 2, 1e-6 + 0.1 * y[:-1] ** 2 + 0.85 * s[:-1] ** 2, rtol=1e-12)


@pytest.mark.parametrize("kind", ["gaussian-copula", "clayton-copula", "t-copula", "ar-vol-panel"])
def test_generate_is_deterministic(kind):
    spec = SynthSpec(kind=kind, d=3, n=1500, seed=4)
    a, b = generate(spec), generate(spec)
    assert a.panel.to_csv() == b.panel.to_csv()
    assert a.truth == b.truth and a.truth["kind"] == kind
    c = generate(SynthSpec(kind=kind, d=3, n=1500, seed=5))
    assert c.panel.to_csv() != a.panel.to_csv()
