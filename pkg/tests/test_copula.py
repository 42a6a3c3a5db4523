import numpy as np
import pytest
from scipy.stats import kstest, skewnorm

from semlaplace.copula import (
    CopulaModel,
    build_copula,
    defined_samples,
    draw_normals,
    nearest_pd_correlation,
    norta_adjust,
    norta_attained,
    posterior_vcov,
    quantile_spline,
    sample_prior_predictive,
    sample_summary,
    sample_theta,
)
from semlaplace.marginals import SkewNormalMarginal
from semlaplace.partable import build_parameter_table
from semlaplace.skewnorm import qsn_fast, sn_moments
from semlaplace.syntax import parse_model


def sn(alpha, xi=0.0, omega=1.0):
    return SkewNormalMarginal(xi, omega, alpha, 0.0, 0.0)


def test_quantile_spline_accuracy():
    m = sn(4.0, 0.2, 1.3)
    sp = quantile_spline(m)
    u = np.linspace(0.001, 0.999, 97)
    np.testing.assert_allclose(sp(u), qsn_fast(u, 0.2, 1.3, 4.0), atol=1e-4)


def test_attained_identity_for_gaussian():
    f = lambda z: z
    r = np.array([-0.8, -0.2, 0.3, 0.9])
    np.testing.assert_allclose(norta_attained(f, f, r), r, atol=1e-12)


def test_attained_is_monotone_and_shrinks():
    sp = quantile_spline(sn(8.0))
    from scipy.special import ndtr

    f = lambda z: sp(ndtr(z))
    r = np.linspace(-0.9, 0.9, 19)
    a = norta_attained(f, f, r)
    assert np.all(np.diff(a) > 0)
    # a skewed pair can only lose correlation magnitude relative to the copula
    assert np.all(np.abs(a) <= np.abs(r) + 1e-9)


def test_gaussian_pairs_pass_through():
    R = np.array([[1.0, 0.4, -0.2], [0.4, 1.0, 0.1], [-0.2, 0.1, 1.0]])
    Rs, ncl = norta_adjust(R, [sn(0.0), sn(0.001), sn(0.0)])
    np.testing.assert_array_equal(Rs, R)
    assert ncl == 0


def test_spearman_mode_keeps_target():
    R = np.array([[1.0, 0.5], [0.5, 1.0]])
    Rs, _ = norta_adjust(R, [sn(5.0), sn(5.0)], spearman=True)
    np.testing.assert_array_equal(Rs, R)


def test_adjusted_correlation_reproduces_target():
    R = np.array([[1.0, 0.5], [0.5, 1.0]])
    ms = [sn(5.0), sn(-3.0)]
    Rs, _ = norta_adjust(R, ms)
    sp = [quantile_spline(m) for m in ms]
    from scipy.special import ndtr

    fs = [lambda z, s=s: s(ndtr(z)) for s in sp]
    assert norta_attained(fs[0], fs[1], Rs[0, 1])[0] == pytest.approx(0.5, abs=1e-6)
    assert abs(Rs[0, 1]) > 0.5


def test_unattainable_target_is_clamped():
    R = np.array([[1.0, -0.999], [-0.999, 1.0]])
    Rs, ncl = norta_adjust(R, [sn(10.0), sn(10.0)])
    assert ncl == 1
    assert np.all(np.linalg.eigvalsh(Rs) > 0)


def test_nearest_pd():
    R = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    Rp = nearest_pd_correlation(R)
    assert np.all(np.linalg.eigvalsh(Rp) > 0)
    np.testing.assert_allclose(np.diag(Rp), 1.0)


def test_draw_normals_chunk_invariance():
    a = draw_normals(600, 3, seed=4)
    b = draw_normals(256, 3, seed=4)
    np.testing.assert_array_equal(a[:256], b)
    assert not np.array_equal(a[:256], a[256:512])
    np.testing.assert_array_equal(a, draw_normals(600, 3, seed=4))


def test_sample_theta_marginals():
    ms = [sn(3.0, 0.1, 1.2), sn(0.0)]
    omega = np.array([[0.04, 0.01], [0.01, 0.09]])
    cop = build_copula(np.array([1.0, -2.0]), omega, ms)
    th = sample_theta(cop, 20000, seed=1)
    z = (th[:, 0] - 1.0) / 0.2
    assert kstest(z, skewnorm(3.0, 0.1, 1.2).cdf).pvalue > 1e-3
    m, s, _ = sn_moments(0.1, 1.2, 3.0)
    assert th[:, 0].mean() == pytest.approx(1.0 + 0.2 * m, abs=0.01)
    assert np.corrcoef(th.T)[0, 1] == pytest.approx(cop.R[0, 1], abs=0.03)


def test_sample_summary_and_sn_fit(rng):
    v = skewnorm.rvs(4.0, size=5000, random_state=rng)
    s = sample_summary(v)
    assert s["mean"] == pytest.approx(v.mean())
    s2 = sample_summary(v, sn_fit=True)
    assert "sn" in s2
    np.testing.assert_allclose(s2["quantiles"], s["quantiles"], atol=0.05)


def test_defined_samples():
    t = build_parameter_table(parse_model("y ~ a*x\nz ~ b*y\nab := a*b"), ["x", "y", "z"])
    rng = np.random.default_rng(0)
    xs = np.array([t.pars_to_x(t.theta_start + rng.normal(0, 0.1, t.m)) for _ in range(10)])
    d = defined_samples(t, xs)
    a = xs[:, t.row_by_name("y~x").full_index]
    b = xs[:, t.row_by_name("z~y").full_index]
    np.testing.assert_allclose(d["ab"], a * b)


def test_posterior_vcov(rng):
    xs = rng.normal(size=(100, 3))
    np.testing.assert_allclose(posterior_vcov(xs), np.cov(xs, rowvar=False))
    om = np.eye(2)
    assert posterior_vcov(omega=om, type="theta") is not om


def test_prior_predictive_shapes():
    t = build_parameter_table(parse_model("f =~ a + b + c"), list("abc"))
    sims = sample_prior_predictive(t, 50, nsamp=4, seed=3)
    assert len(sims) == 4
    assert sims[0].shape == (50, 3)
    again = sample_prior_predictive(t, 50, nsamp=4, seed=3)
    np.testing.assert_array_equal(sims[2], again[2])


def test_copula_model_cholesky():
    cm = CopulaModel(np.zeros(2), np.ones(2), [sn(0), sn(0)], np.eye(2), np.eye(2))
    np.testing.assert_array_equal(cm.L_star, np.eye(2))
