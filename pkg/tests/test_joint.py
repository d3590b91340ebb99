import numpy as np
import pytest
from scipy import stats

from diffcopula.cdc import CdcTrainConfig, copula_log_density, independence_sample, init_cdc, train_cdc
from diffcopula.ingest import make_windows
from diffcopula.joint import ModelBundle, joint_log_density, joint_sample, pit_panel
from diffcopula.marginal import MdnConfig, init_mdn, mdn_forward, mixture_cdf, mixture_inverse_cdf, mixture_log_pdf
from diffcopula.synth import gen_gaussian_copula

CFG = MdnConfig(hidden=4, layers=1, feature_hidden=3)


def small_bundle(d=2, copula=None, seed=0):
    rng = np.random.default_rng(seed)
    marginals = [init_mdn(CFG, rng, y_scale=0.01) for _ in range(d)]
    copula = copula or init_cdc(d, hidden=(8, 8), rng=rng)
    return ModelBundle(marginals, copula, [f"A{i}" for i in range(d)])


def windows(d=2, n=600, rho=0.7, seed=0):
    panel, _ = gen_gaussian_copula(rho, n=n, seed=seed, d=d)
    train, test = make_windows(panel, 14, 0.5)
    return train, test


def test_bundle_validates_dimensions():
    with pytest.raises(ValueError):
        ModelBundle([init_mdn(CFG)], init_cdc(2, hidden=(4,)), ["A"])


def test_pit_panel_range_and_median():
    bundle = small_bundle()
    train, _ = windows()
    u = pit_panel(bundle, train)
    assert u.shape == (len(train[0]), 2) and np.all((u > 0) & (u < 1))
    p = mdn_forward(bundle.marginals[0], train[0][:5])
    med = mixture_inverse_cdf(p, np.full(5, 0.5))
    np.testing.assert_allclose(mixture_cdf(p, med), 0.5, atol=1e-9)


def test_pit_panel_rejects_misaligned_windows():
    bundle = small_bundle()
    train, _ = windows()
    with pytest.raises(ValueError):
        pit_panel(bundle, [train[0], train[1][1:]])
    with pytest.raises(ValueError):
        pit_panel(bundle, [train[0]])


def test_sklar_assembly_identity():
    rng = np.random.default_rng(1)
    copula = init_cdc(2, hidden=(8, 8), rng=rng)
    for t in copula.parameters():
        t.data[:] = rng.normal(0, 0.3, t.shape)
    bundle = small_bundle(copula=copula)
    _, test = windows()
    total, marg, log_c = joint_log_density(bundle, test, return_parts=True)
    np.testing.assert_allclose(total - marg.sum(axis=1) - log_c, 0.0, atol=1e-12)
    p0 = mdn_forward(bundle.marginals[0], test[0])
    np.testing.assert_allclose(marg[:, 0], mixture_log_pdf(p0, test[0].targets), rtol=1e-14)


def test_independence_copula_joint_equals_marginal_sum():
    bundle = small_bundle()
    _, test = windows()
    total, marg, log_c = joint_log_density(bundle, test, return_parts=True)
    assert np.max(np.abs(log_c)) < 0.1
    np.testing.assert_allclose(total, marg.sum(axis=1), atol=0.1)


def test_trained_copula_beats_independence_on_dependent_data():
    _, u = gen_gaussian_copula(0.7, n=4000, seed=2)
    cfg = CdcTrainConfig(steps=400, hidden=(32, 32), batch_size=256)
    model, _ = train_cdc(u[:3000], cfg, np.random.default_rng(0))
    assert copula_log_density(model, u[3000:]).mean() > 0.0  # independence scores exactly 0


def test_joint_sample_marginals_exact_and_independent():
    bundle = small_bundle()
    _, test = windows()
    one = [w[:1] for w in test]
    dist = joint_sample(bundle, one, 10_000, np.random.default_rng(3))
    assert dist.samples.shape == (1, 10_000, 2) and np.all(np.isfinite(dist.samples))
    assert abs(np.corrcoef(dist.samples[0].T)[0, 1]) < 0.05
    for j in range(2):
        pit = mixture_cdf(dist.params[j][0], dist.samples[0, :, j])
        assert stats.kstest(pit, "uniform").statistic < 0.02
    rank_y = stats.spearmanr(dist.samples[0])[0]
    rank_u = stats.spearmanr(dist.u[0])[0]
    assert rank_y == pytest.approx(rank_u, abs=1e-12)


def test_joint_sample_custom_sampler_and_empty():
    bundle = small_bundle(3)
    _, test = windows(d=3)
    dist = joint_sample(bundle, test, 0, np.random.default_rng(0))
    assert dist.samples.shape == (len(test[0]), 0, 3) and len(dist.params) == 3
    dist = joint_sample(bundle, test, 5, np.random.default_rng(0),
                        copula_sampler=lambda n, r: independence_sample(3, n, r))
    assert dist.samples.shape == (len(test[0]), 5, 3)


def test_bundle_save_load_roundtrip(tmp_path):
    bundle = small_bundle()
    bundle.save(tmp_path / "b")
    back = ModelBundle.load(tmp_path / "b")
    assert back.asset_ids == bundle.asset_ids and back.interval == 600
    assert back.copula.to_json() == bundle.copula.to_json()
    assert [m.to_json() for m in back.marginals] == [m.to_json() for m in bundle.marginals]
    assert sorted(p.name for p in (tmp_path / "b").iterdir()) == [
        "copula.json", "manifest.json", "marginal_0.json", "marginal_1.json"]
