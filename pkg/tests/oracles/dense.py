"""Brute-force likelihoods: one multivariate normal density per case or per cluster."""

import numpy as np
from scipy.stats import multivariate_normal


def casewise_loglik(Y, mu, sigma):
    """Sum over rows of the MVN log-density of the observed entries."""
    total = 0.0
    for y in np.asarray(Y, dtype=float):
        o = ~np.isnan(y)
        if not o.any():
            continue
        total += multivariate_normal.logpdf(y[o], mu[o], sigma[np.ix_(o, o)])
    return total


def cluster_loglik(Y, clusters, mu, sigma_w, sigma_b):
    """Stacked cluster vectors with covariance I x Sigma_W + J x Sigma_B."""
    Y = np.asarray(Y, dtype=float)
    total = 0.0
    for c in np.unique(clusters):
        Yc = Y[clusters == c]
        n, p = Yc.shape
        big = np.kron(np.eye(n), sigma_w) + np.kron(np.ones((n, n)), sigma_b)
        y = Yc.ravel()
        o = ~np.isnan(y)
        total += multivariate_normal.logpdf(y[o], np.tile(mu, n)[o], big[np.ix_(o, o)])
    return total


def conditional_normal(mean, cov, obs_index, values):
    """Mean and covariance of the unobserved block of N(mean, cov) given observed values."""
    k = mean.size
    o = np.asarray(obs_index)
    u = np.setdiff1d(np.arange(k), o)
    Soo = cov[np.ix_(o, o)]
    Suo = cov[np.ix_(u, o)]
    A = Suo @ np.linalg.inv(Soo)
    return mean[u] + A @ (values - mean[o]), cov[np.ix_(u, u)] - A @ Suo.T


def em_saturated(Y, iters=5000, tol=1e-12):
    """ML mean and covariance of incomplete MVN data by plain EM."""
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    mu = np.nanmean(Y, axis=0)
    S = np.diag(np.nanvar(Y, axis=0))
    prev = -np.inf
    for _ in range(iters):
        T1 = np.zeros(p)
        T2 = np.zeros((p, p))
        for y in Y:
            o = ~np.isnan(y)
            m = ~o
            yh = y.copy()
            C = np.zeros((p, p))
            if m.any():
                cm, cc = conditional_normal(mu, S, np.flatnonzero(o), y[o])
                yh[m] = cm
                C[np.ix_(m, m)] = cc
            T1 += yh
            T2 += np.outer(yh, yh) + C
        mu = T1 / n
        S = T2 / n - np.outer(mu, mu)
        ll = casewise_loglik(Y, mu, S)
        if ll - prev < tol:
            break
        prev = ll
    return mu, S, ll
