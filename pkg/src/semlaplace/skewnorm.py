"""Skew-normal distribution: density, CDF, moments and a fast quantile.

``qsn_fast`` evaluates the quantile without iteration. For each shape
``alpha`` a table of piecewise Chebyshev polynomials of

    q(w) = Q_SN(Phi(w); 0, 1, |alpha|),   w in [-W, W]

is built once (cached). A call maps ``u`` to ``w = Phi^-1(u)``, picks the
piece and runs a Clenshaw recurrence. Negative shapes use
``Q(u; -a) = -Q(1 - u; a)``, i.e. ``q_{-a}(w) = -q_a(-w)``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri, owens_t

__all__ = [
    "sn_logpdf",
    "sn_pdf",
    "sn_cdf",
    "sn_sf",
    "sn_log_cdf",
    "sn_moments",
    "sn_delta",
    "sn_mean",
    "sn_var",
    "sn_from_moments",
    "qsn_fast",
    "qsn_bisect",
    "sn_fit_mle",
    "QSN_W",
    "MAX_SKEW",
]

LOG2 = math.log(2.0)
HALF_LOG2PI = 0.5 * math.log(2.0 * math.pi)
MAX_SKEW = 0.99527174643048  # sup of |skewness| over the SN family
QSN_W = 8.5
_NPIECE = 40
_DEG = 16

_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


def sn_delta(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return alpha / np.sqrt(1.0 + alpha**2)


def sn_logpdf(x, xi=0.0, omega=1.0, alpha=0.0):
    t = (np.asarray(x, dtype=float) - xi) / omega
    return LOG2 - np.log(omega) - 0.5 * t * t - HALF_LOG2PI + log_ndtr(alpha * t)


def sn_pdf(x, xi=0.0, omega=1.0, alpha=0.0):
    return np.exp(sn_logpdf(x, xi, omega, alpha))


def _std_log_cdf(t, a):
    """log F(t; 0, 1, a) for a >= 0, accurate in the short left tail."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    direct = ndtr(t) - 2.0 * owens_t(t, a)
    # cancellation: fall back to quadrature when F << Phi(t)
    bad = (t < 0) & (direct < 1e-3 * ndtr(t))
    ok = ~bad
    out[ok] = np.log(np.maximum(direct[ok], 1e-300))
    if bad.any():
        out[bad] = _left_tail_log_cdf(t[bad], a)
    return out


def _std_logpdf(t, a):
    return LOG2 - 0.5 * t * t - HALF_LOG2PI + log_ndtr(a * t)


def _psi(u):
    """phi(u) / Phi(u), stable for very negative u."""
    return np.exp(-0.5 * u * u - HALF_LOG2PI - log_ndtr(u))


def _left_tail_log_cdf(t, a):
    # F(t) = f(t)/k * int_0^inf exp(log f(t - x/k) - log f(t)) dx, k = -(log f)'(t)
    lf = _std_logpdf(t, a)
    k = -t + a * _psi(a * t)
    k = np.maximum(k, 1e-3)
    total = np.zeros_like(t)
    for lo, hi in ((0.0, 2.0), (2.0, 8.0), (8.0, 24.0), (24.0, 60.0)):
        x = 0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * _GL_W
        s = t[:, None] - x[None, :] / k[:, None]
        total += np.sum(w * np.exp(_std_logpdf(s, a) - lf[:, None]), axis=1)
    return lf - np.log(k) + np.log(total)


def _std_log_sf(t, a):
    """log(1 - F(t; 0, 1, a)) for a >= 0 (no cancellation: both terms are positive)."""
    t = np.asarray(t, dtype=float)
    return np.log(ndtr(-t) + 2.0 * owens_t(t, a))


def sn_cdf(x, xi=0.0, omega=1.0, alpha=0.0):
    t = (np.asarray(x, dtype=float) - xi) / omega
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), np.shape(t))
    out = ndtr(t) - 2.0 * owens_t(t, alpha)
    return np.clip(out, 0.0, 1.0)


def sn_sf(x, xi=0.0, omega=1.0, alpha=0.0):
    t = (np.asarray(x, dtype=float) - xi) / omega
    return np.clip(ndtr(-t) + 2.0 * owens_t(t, alpha), 0.0, 1.0)


def sn_log_cdf(x, xi=0.0, omega=1.0, alpha=0.0):
    """Log CDF, accurate in both tails."""
    t = np.atleast_1d((np.asarray(x, dtype=float) - xi) / omega)
    if alpha >= 0:
        return _std_log_cdf(t, alpha)
    return _std_log_sf(-t, -alpha)


def sn_mean(xi, omega, alpha):
    return xi + omega * sn_delta(alpha) * math.sqrt(2.0 / math.pi)


def sn_var(omega, alpha):
    d = sn_delta(alpha)
    return omega**2 * (1.0 - 2.0 * d**2 / math.pi)


def sn_moments(xi, omega, alpha):
    """(mean, sd, skewness)."""
    d = float(sn_delta(alpha))
    b = d * math.sqrt(2.0 / math.pi)
    mean = xi + omega * b
    var = omega**2 * (1.0 - b * b)
    skew = 0.5 * (4.0 - math.pi) * b**3 / (1.0 - b * b) ** 1.5
    return mean, math.sqrt(var), skew


def sn_from_moments(mean, sd, skew):
    """Method-of-moments SN parameters via the skewness-delta relation.

    Skewness is clamped to 0.995 of the attainable bound.
    """
    g = float(np.clip(skew, -0.995 * MAX_SKEW, 0.995 * MAX_SKEW))
    r = (2.0 * abs(g) / (4.0 - math.pi)) ** (2.0 / 3.0)
    b2 = r / (1.0 + r)  # b = delta * sqrt(2/pi)
    delta = math.copysign(math.sqrt(0.5 * math.pi * b2), g)
    delta = float(np.clip(delta, -0.9999, 0.9999))
    alpha = delta / math.sqrt(1.0 - delta**2)
    omega = sd / math.sqrt(1.0 - 2.0 * delta**2 / math.pi)
    xi = mean - omega * delta * math.sqrt(2.0 / math.pi)
    return xi, omega, alpha


def sn_fit_mle(x):
    """Maximum-likelihood SN fit to a sample, started from the moment solution.

    Returns (xi, omega, alpha). Degenerate samples give (mean, 0, 0).
    """
    from scipy.optimize import minimize
    from scipy.stats import skew as _skew

    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    sd = float(np.std(x))
    mu = float(np.mean(x))
    if x.size < 3 or not sd > 1e-12 * max(1.0, abs(mu)):
        return mu, 0.0, 0.0
    z = (x - mu) / sd
    xi0, om0, al0 = sn_from_moments(0.0, 1.0, float(_skew(z)))

    def nll(p):
        xi, s, a = p
        t = (z - xi) * np.exp(-s)
        u = a * t
        ll = LOG2 - s - 0.5 * t * t - HALF_LOG2PI + log_ndtr(u)
        ps = np.exp(-0.5 * u * u - HALF_LOG2PI - log_ndtr(u))
        g_xi = np.sum((t - a * ps)) * np.exp(-s)
        g_s = np.sum(-1.0 + t * t - a * t * ps)
        g_a = np.sum(t * ps)
        return -float(np.sum(ll)), -np.array([g_xi, g_s, g_a])

    res = minimize(nll, [xi0, math.log(om0), al0], jac=True, method="L-BFGS-B",
                   bounds=[(None, None), (None, None), (-50.0, 50.0)])
    xi, s, a = res.x
    return mu + sd * float(xi), sd * math.exp(float(s)), float(a)


# --------------------------------------------------------------------------
# quantile
# --------------------------------------------------------------------------


def _solve_std_quantile(w, a):
    """Solve F(q; 0,1,a) = Phi(w) for a >= 0 by safeguarded Newton in log space."""
    w = np.asarray(w, dtype=float)
    d = a / math.sqrt(1.0 + a * a)
    b = d * math.sqrt(2.0 / math.pi)
    q = b + math.sqrt(1.0 - b * b) * w  # moment-matched normal start
    lower = w <= 0
    target = np.where(lower, log_ndtr(w), log_ndtr(-w))
    active = np.arange(q.size)
    for _ in range(100):
        qa, lo, ta = q[active], lower[active], target[active]
        lf = _std_logpdf(qa, a)
        val = np.empty_like(qa)
        slope = np.empty_like(qa)
        if lo.any():
            lc = _std_log_cdf(qa[lo], a)
            val[lo] = lc - ta[lo]
            slope[lo] = np.exp(lf[lo] - lc)
        up = ~lo
        if up.any():
            ls = _std_log_sf(qa[up], a)
            val[up] = ls - ta[up]
            slope[up] = -np.exp(lf[up] - ls)
        step = np.clip(val / slope, -2.0, 2.0)
        q[active] = qa - step
        keep = np.abs(step) > 4e-15 * np.maximum(1.0, np.abs(qa))
        active = active[keep]
        if active.size == 0:
            break
    return q


@lru_cache(maxsize=4096)
def _table(a):
    """Chebyshev coefficient table for shape a >= 0: (edges, coeffs[npiece, deg+1])."""
    edges = np.linspace(-QSN_W, QSN_W, _NPIECE + 1)
    k = np.arange(_DEG + 1)
    cheb = np.cos(np.pi * (k + 0.5) / (_DEG + 1))  # Chebyshev points of the first kind
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    W = mid[:, None] + half[:, None] * cheb[None, :]
    if a == 0.0:
        Q = W.copy()
    else:
        Q = _solve_std_quantile(W.ravel(), a).reshape(W.shape)
    # interpolate on first-kind nodes: coefficients by discrete cosine sums
    T = np.cos(np.outer(np.arccos(cheb), k))  # (deg+1) x (deg+1)
    coef = (2.0 / (_DEG + 1)) * Q @ T
    coef[:, 0] *= 0.5
    return edges, coef


@lru_cache(maxsize=4096)
def _table_rows(a):
    edges, coef = _table(a)
    return float(edges[0]), float(edges[1] - edges[0]), coef.tolist()


def _qsn_scalar(u, xi, omega, a):
    w = float(ndtri(u))
    if a < 0:
        w = -w
    if abs(w) > QSN_W:
        return None
    lo, width, rows = _table_rows(abs(a))
    k = min(int((w - lo) // width), _NPIECE - 1)
    x = (w - lo - k * width) / width * 2.0 - 1.0
    c = rows[k]
    b1 = b2 = 0.0
    for j in range(len(c) - 1, 0, -1):
        b1, b2 = 2.0 * x * b1 - b2 + c[j], b1
    q = x * b1 - b2 + c[0]
    return xi + omega * (-q if a < 0 else q)


def _clenshaw(coef, x):
    b1 = np.zeros_like(x)
    b2 = np.zeros_like(x)
    for j in range(coef.shape[1] - 1, 0, -1):
        b1, b2 = 2.0 * x * b1 - b2 + coef[:, j], b1
    return x * b1 - b2 + coef[:, 0]


def qsn_fast(u, xi=0.0, omega=1.0, alpha=0.0):
    """Skew-normal quantile from cached piecewise Chebyshev tables.

    Raises ValueError for u outside (0, 1).
    """
    if isinstance(u, (float, int, np.floating)) and 0.0 < u < 1.0:
        q = _qsn_scalar(float(u), xi, omega, float(alpha))
        if q is not None:
            return q
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    if np.any(~((u > 0) & (u < 1))):
        raise ValueError("u must lie strictly inside (0, 1)")
    a = float(alpha)
    w = ndtri(u)
    if a < 0:
        w = -w
    edges, coef = _table(abs(a))
    width = edges[1] - edges[0]
    idx = np.clip(((w - edges[0]) // width).astype(int), 0, _NPIECE - 1)
    x = (w - edges[idx]) / width * 2.0 - 1.0
    q = _clenshaw(coef[idx], x)
    out_rng = np.abs(w) > QSN_W
    if out_rng.any():
        q[out_rng] = _solve_std_quantile(w[out_rng], abs(a))
    if a < 0:
        q = -q
    q = xi + omega * q
    return q[0] if scalar else q


def qsn_bisect(u, xi=0.0, omega=1.0, alpha=0.0, tol=1e-15):
    """Reference quantile: bisection on the exact CDF (slow; used as an oracle)."""
    u = float(u)
    lo, hi = -40.0, 40.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if sn_cdf(mid, 0.0, 1.0, alpha) < u:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(mid)):
            break
    return xi + omega * 0.5 * (lo + hi)
