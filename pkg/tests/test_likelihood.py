import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from oracles.dense import casewise_loglik, cluster_loglik
from scenarios import KINDS, posterior_for, random_admissible, scenario
from semlaplace.likelihood import (
    SingularStructure,
    _dense_cluster,
    _woodbury_cluster,
    gaussian_kernel,
    implied_moments,
)
from semlaplace.partable import ModelMatrices


def random_spd(rng, p, ridge=0.5):
    A = rng.normal(size=(p, p))
    return A @ A.T / p + ridge * np.eye(p)


def test_gaussian_kernel_matches_scipy(rng):
    p, n = 4, 30
    sigma = random_spd(rng, p)
    mu = rng.normal(size=p)
    Y = rng.multivariate_normal(mu + 0.3, sigma, n)
    ybar = Y.mean(0)
    S = (Y - ybar).T @ (Y - ybar) / n
    ll, G, g = gaussian_kernel(n, S, ybar - mu, sigma)
    assert ll == pytest.approx(multivariate_normal.logpdf(Y, mu, sigma).sum(), rel=1e-12)
    h = 1e-6
    for i in range(p):
        e = np.zeros(p)
        e[i] = h
        fd = (gaussian_kernel(n, S, ybar - mu - e, sigma)[0] - gaussian_kernel(n, S, ybar - mu + e, sigma)[0]) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-6)
    E = np.zeros((p, p))
    E[0, 1] = E[1, 0] = h
    fd = (gaussian_kernel(n, S, ybar - mu, sigma + E)[0] - gaussian_kernel(n, S, ybar - mu, sigma - E)[0]) / (2 * h)
    assert 2 * G[0, 1] == pytest.approx(fd, rel=1e-6)


def test_kernel_not_pd_is_minus_inf():
    ll, G, g = gaussian_kernel(5, np.eye(2), None, np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert ll == -np.inf


def test_implied_moments_formula(rng):
    p, q = 5, 2
    L = rng.normal(size=(p, q))
    B = np.array([[0.0, 0.0], [0.6, 0.0]])
    Psi = np.diag([1.0, 0.5])
    Theta = np.diag(rng.uniform(0.2, 1.0, p))
    nu, alpha = rng.normal(size=p), np.array([0.3, -0.2])
    im = implied_moments(ModelMatrices(nu, L, B, alpha, Theta, Psi))
    A = np.linalg.inv(np.eye(q) - B)
    np.testing.assert_allclose(im.sigma, L @ A @ Psi @ A.T @ L.T + Theta, atol=1e-12)
    np.testing.assert_allclose(im.mu, nu + L @ A @ alpha, atol=1e-12)


def test_singular_structure_raises():
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    mats = ModelMatrices(np.zeros(2), np.eye(2), B, np.zeros(2), np.eye(2), np.eye(2))
    with pytest.raises(SingularStructure):
        implied_moments(mats)


def test_complete_data_equals_casewise(pd_frame, rng):
    table, data, lik = scenario("complete", pd_frame)
    x = table.pars_to_x(table.theta_start + rng.normal(0, 0.2, table.m))
    mu, sigma = lik.group_moments(table.matrices(x), 1)
    Y = data.raw[0]
    ref = multivariate_normal.logpdf(Y, Y.mean(0), sigma).sum()
    assert lik.evaluate(x, need_grad=False)[0] == pytest.approx(ref, rel=1e-12)


def test_missing_patterns_equal_casewise(pd_frame, rng):
    table, data, lik = scenario("missing", pd_frame)
    for _ in range(5):
        x = table.pars_to_x(table.theta_start + rng.normal(0, 0.2, table.m))
        mu, sigma = lik.group_moments(table.matrices(x), 1)
        ref = casewise_loglik(data.raw[0], mu, sigma)
        assert abs(lik.evaluate(x, need_grad=False)[0] - ref) < 1e-10 * max(1.0, abs(ref))


@pytest.mark.parametrize("kind", ["two_level", "two_level_missing"])
def test_two_level_equals_dense(pd_frame, rng, kind):
    table, data, lik = scenario(kind, pd_frame)
    for _ in range(5):
        x = table.pars_to_x(table.theta_start + rng.normal(0, 0.2, table.m))
        mu, SW, SB = lik.group_moments(table.matrices(x), 1)
        ref = cluster_loglik(data.raw[0], data.clusters[0], mu, SW, SB)
        assert abs(lik.evaluate(x, need_grad=False)[0] - ref) < 1e-8 * max(1.0, abs(ref))


def test_woodbury_matches_dense_with_singular_between(rng):
    p = 4
    SW = random_spd(rng, p)
    SB = np.zeros((p, p))
    SB[:3, :3] = random_spd(rng, 3, 0.1)
    mu = rng.normal(size=p)

    class B:
        pass

    for n in (1, 3, 6):
        Y = rng.normal(size=(n, p))
        Y[rng.random((n, p)) < 0.3] = np.nan
        Y[np.isnan(Y).all(axis=1), 0] = 0.5
        b = B()
        b.Y = Y
        w = _woodbury_cluster(b, mu, SW, SB)
        d = _dense_cluster(Y, mu, SW, SB)
        for a_, d_ in zip(w, d):
            np.testing.assert_allclose(a_, d_, rtol=1e-10, atol=1e-12)


def test_multigroup_is_sum_of_groups(pd_frame, rng):
    table, data, lik = scenario("multigroup", pd_frame)
    x = table.pars_to_x(table.theta_start + rng.normal(0, 0.2, table.m))
    mats = table.matrices(x)
    ref = 0.0
    for g in (1, 2):
        mu, sigma = lik.group_moments(mats, g)
        ref += multivariate_normal.logpdf(data.raw[g - 1], mu, sigma).sum()
    assert lik.evaluate(x, need_grad=False)[0] == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_posterior_gradient_fd(pd_frame, rng, kind):
    table, data, lik, post = posterior_for(kind, pd_frame)
    for _ in range(3):
        th = random_admissible(table, post, rng)
        _, g = post.value_and_grad(th)
        h = 1e-5
        fd = np.array([(post(th + h * e) - post(th - h * e)) / (2 * h) for e in np.eye(table.m)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd).max()))


def test_listwise_drops_incomplete(pd_frame):
    from scenarios import PD_MODEL_ML, punch_holes
    from semlaplace.fit import FitConfig, build_model

    fr = punch_holes(pd_frame, 0.05, 2)
    table, data, lik = build_model(PD_MODEL_ML, fr, FitConfig())
    assert data.n_obs == int((~fr.isna().any(axis=1)).sum())
    assert data.n_dropped == len(fr) - data.n_obs


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_cluster_kernel_property(n, p, seed):
    rng = np.random.default_rng(seed)
    SW = random_spd(rng, p)
    SB = random_spd(rng, p, 0.05)
    mu = rng.normal(size=p)

    class B:
        pass

    Y = rng.normal(size=(n, p))
    Y[rng.random((n, p)) < 0.25] = np.nan
    Y[np.isnan(Y).all(axis=1), -1] = 0.0
    b = B()
    b.Y = Y
    ll = _woodbury_cluster(b, mu, SW, SB, need_grad=False)[0]
    big = np.kron(np.eye(n), SW) + np.kron(np.ones((n, n)), SB)
    y = Y.ravel()
    o = ~np.isnan(y)
    ref = multivariate_normal.logpdf(y[o], np.tile(mu, n)[o], big[np.ix_(o, o)])
    assert ll == pytest.approx(ref, rel=1e-10, abs=1e-10)
