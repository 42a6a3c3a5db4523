"""Adaptive random-walk Metropolis with split-R-hat, used as ground truth."""

from __future__ import annotations

import numpy as np


class NotConverged(RuntimeError):
    pass


def adaptive_metropolis(logp, x0, n_iter=50_000, burn=10_000, seed=0, cov0=None, adapt_start=1000):
    """Single chain; proposal 2.38^2/d times the running covariance once adaptation starts.

    Adaptation stops at the end of burn-in so the retained draws come from a
    fixed Markov kernel.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float)
    d = x.size
    lp = logp(x)
    if not np.isfinite(lp):
        raise ValueError("starting point has zero posterior density")
    cov = np.eye(d) * 0.01 if cov0 is None else np.array(cov0, dtype=float)
    scale = 2.38**2 / d
    chol = np.linalg.cholesky(scale * cov)
    mean = x.copy()
    M2 = np.zeros((d, d))
    out = np.empty((n_iter - burn, d))
    acc = 0
    for t in range(n_iter):
        prop = x + chol @ rng.standard_normal(d)
        lq = logp(prop)
        if np.log(rng.random()) < lq - lp:
            x, lp = prop, lq
            if t >= burn:
                acc += 1
        if t < burn:
            # Welford update of the running covariance
            k = t + 1
            delta = x - mean
            mean += delta / k
            M2 += np.outer(delta, x - mean)
            if t >= adapt_start and t % 100 == 0:
                emp = M2 / k + 1e-10 * np.eye(d)
                try:
                    chol = np.linalg.cholesky(scale * emp)
                except np.linalg.LinAlgError:
                    pass
        else:
            out[t - burn] = x
    return out, acc / max(1, n_iter - burn)


def split_rhat(chains):
    """Split-R-hat per coordinate; chains has shape (n_chains, n_draws, dim)."""
    chains = np.asarray(chains, dtype=float)
    c, n, d = chains.shape
    half = n // 2
    parts = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    m = parts.shape[0]
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    var_hat = (half - 1) / half * W + B / half
    return np.sqrt(var_hat / W)


def mcmc_sample(logp, x0, n_iter=50_000, seed=0, n_chains=4, burn=10_000, cov0=None, spread=1.0, rhat_max=1.05):
    """Pooled post-burn-in draws of ``n_chains`` chains started around ``x0``.

    Raises NotConverged when any coordinate has split-R-hat >= ``rhat_max``.
    """
    rng = np.random.default_rng([seed, 99])
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    C = np.eye(d) if cov0 is None else np.asarray(cov0)
    Lc = np.linalg.cholesky(C)
    chains = []
    for k in range(n_chains):
        start = x0 + spread * Lc @ rng.standard_normal(d)
        while not np.isfinite(logp(start)):
            start = x0 + 0.5 * spread * Lc @ rng.standard_normal(d)
        draws, _ = adaptive_metropolis(logp, start, n_iter, burn, seed=[seed, k], cov0=C)
        chains.append(draws)
    chains = np.array(chains)
    rh = split_rhat(chains)
    if np.any(rh >= rhat_max):
        raise NotConverged(f"split R-hat up to {rh.max():.3f}")
    return chains.reshape(-1, d), rh


def chains_to_csv(draws, path, names=None):
    import pandas as pd

    pd.DataFrame(draws, columns=names).to_csv(path, index=False)
