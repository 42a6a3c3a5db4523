"""Gaussian copula over skew-normal marginals (NORTA) and posterior sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr, ndtri

from .skewnorm import qsn_fast, sn_fit_mle, sn_from_moments

log = logging.getLogger(__name__)

__all__ = [
    "CopulaModel",
    "quantile_spline",
    "norta_attained",
    "norta_adjust",
    "nearest_pd_correlation",
    "build_copula",
    "draw_normals",
    "sample_theta",
    "x_samples",
    "sample_summary",
    "defined_samples",
    "posterior_vcov",
    "sample_prior_predictive",
    "GAUSS_TOL",
]

GAUSS_TOL = 0.01  # |alpha| below this: marginal treated as Gaussian
_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(9)
_GH_W = _GH_W / _GH_W.sum()
_ROW_CHUNK = 256


def _knots(n=512):
    # uniform in w = Phi^-1(u) so both tails get log-spaced u knots
    w = np.linspace(-5.5, 5.5, n)
    return ndtr(w)


def quantile_spline(sn, n=512):
    """Monotone cubic Hermite spline of the SN quantile over u (n knots)."""
    u = _knots(n)
    q = qsn_fast(u, sn.xi, sn.omega, sn.alpha)
    return PchipInterpolator(u, q, extrapolate=True)


def _gh_values(spline):
    return spline(ndtr(_GH_X))


def norta_attained(fj, fk, rho):
    """Correlation of f_j(Z1), f_k(Z2) for corr(Z1, Z2) = rho by the 9 x 9 Gauss-Hermite rule.

    ``fj``/``fk`` are callables of standard normal scores. ``rho`` may be an array.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    a = fj(_GH_X)
    ma = _GH_W @ a
    sa = math.sqrt(max(_GH_W @ (a - ma) ** 2, 1e-300))
    z2 = rho[:, None, None] * _GH_X[None, :, None] + np.sqrt(1 - rho**2)[:, None, None] * _GH_X[None, None, :]
    b = fk(z2)
    mb = _GH_W @ fk(_GH_X)
    sb = math.sqrt(max(_GH_W @ (fk(_GH_X) - mb) ** 2, 1e-300))
    W2 = np.outer(_GH_W, _GH_W)
    cov = np.einsum("ij,i,rij->r", W2, a - ma, b - mb)
    return cov / (sa * sb)


def nearest_pd_correlation(R, floor=1e-8):
    """Symmetrise and clip eigenvalues, then rescale to unit diagonal."""
    R = 0.5 * (R + R.T)
    w, V = np.linalg.eigh(R)
    if w.min() >= floor:
        return R
    w = np.maximum(w, floor)
    R = (V * w) @ V.T
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return 0.5 * (R + R.T)


def norta_adjust(R, marginals, tol=1e-6, spearman=False):
    """Copula correlation R* whose transformed Pearson correlations reproduce R.

    Pairs where both marginals have |alpha| < GAUSS_TOL are copied unchanged.
    With ``spearman=True`` the target is read as a rank correlation; a Gaussian
    copula's rank correlation does not depend on the marginals, so R* = R.
    """
    R = np.asarray(R, dtype=float)
    m = R.shape[0]
    Rs = R.copy()
    if spearman or m < 2:
        return nearest_pd_correlation(Rs), 0
    skewed = np.array([abs(s.alpha) >= GAUSS_TOL for s in marginals])
    if not skewed.any():
        return nearest_pd_correlation(Rs), 0
    # quantile values at the GH nodes are all that the 81-point rule needs for f_j(Z1);
    # f_k(Z2) needs the spline at arbitrary scores
    splines = [quantile_spline(s) for s in marginals]
    fs = [(lambda sp: (lambda zz: sp(ndtr(zz))))(sp) for sp in splines]
    pairs = [(j, k) for j in range(m) for k in range(j + 1, m) if skewed[j] or skewed[k]]
    nclamp = 0
    for j, k in pairs:
        target = R[j, k]
        if target == 0.0:
            continue
        f = lambda r: norta_attained(fs[j], fs[k], r)
        lo, hi = -0.999, 0.999
        flo, fhi = f(np.array([lo, hi]))
        if target <= flo or target >= fhi:
            nclamp += 1
            log.warning("NORTA target %.4f for pair (%d, %d) outside attainable range; clamped", target, j, k)
            Rs[j, k] = Rs[k, j] = lo if target <= flo else hi
            continue
        # safeguarded secant / bisection on a monotone function
        a, b, fa, fb = lo, hi, flo - target, fhi - target
        x = target
        for _ in range(100):
            fx = f(x)[0] - target
            if abs(fx) < tol:
                break
            if fx < 0:
                a, fa = x, fx
            else:
                b, fb = x, fx
            xs = a - fa * (b - a) / (fb - fa)
            x = xs if a < xs < b and abs(xs - x) < 0.5 * (b - a) else 0.5 * (a + b)
        Rs[j, k] = Rs[k, j] = x
    return nearest_pd_correlation(Rs), nclamp


@dataclass
class CopulaModel:
    center: np.ndarray
    sd: np.ndarray
    marginals: list
    R: np.ndarray
    R_star: np.ndarray
    L_star: np.ndarray = field(default=None)
    n_clamped: int = 0

    def __post_init__(self):
        if self.L_star is None:
            self.L_star = np.linalg.cholesky(self.R_star)


def build_copula(center, omega, marginals, spearman=False):
    sd = np.sqrt(np.diag(omega))
    R = omega / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    Rs, ncl = norta_adjust(R, marginals, spearman=spearman)
    return CopulaModel(np.asarray(center, dtype=float), sd, list(marginals), R, Rs, None, ncl)


def draw_normals(nsamp, dim, seed):
    """Standard normals with per-chunk counter streams keyed by (seed, chunk)."""
    out = np.empty((nsamp, dim))
    for c0 in range(0, nsamp, _ROW_CHUNK):
        c1 = min(nsamp, c0 + _ROW_CHUNK)
        rng = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), c0 // _ROW_CHUNK]))
        out[c0:c1] = rng.standard_normal((c1 - c0, dim))
    return out


def sample_theta(cop: CopulaModel, nsamp=1000, seed=0):
    """Copula draws on the unconstrained scale (nsamp x m)."""
    m = cop.center.size
    Z = draw_normals(nsamp, m, seed) @ cop.L_star.T
    U = np.clip(ndtr(Z), 1e-16, 1 - 1e-16)
    T = np.empty_like(Z)
    for j, sn in enumerate(cop.marginals):
        T[:, j] = qsn_fast(U[:, j], sn.xi, sn.omega, sn.alpha)
    return cop.center + cop.sd * T


def x_samples(table, theta_samp):
    return np.array([table.pars_to_x(t) for t in theta_samp])


def _summ(v, sn_fit=False, probs=(0.025, 0.5, 0.975)):
    v = np.asarray(v, dtype=float)
    out = {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0}
    out["quantiles"] = np.quantile(v, probs)
    if sn_fit and out["sd"] > 0:
        from .skewnorm import qsn_fast as q

        xi, om, al = sn_fit_mle(v)
        if om > 0:
            out["quantiles"] = np.array([q(p, xi, om, al) for p in probs])
            out["sn"] = (xi, om, al)
    return out


def sample_summary(v, sn_fit=False):
    return _summ(v, sn_fit)


def defined_samples(table, x_samp):
    """Evaluate ``:=`` rows column-wise on a sample matrix. Returns {name: vector}."""
    env = {}
    n = x_samp.shape[0]
    for r in table.rows:
        if r.mat == "defined":
            continue
        v = x_samp[:, r.full_index] if r.full_index >= 0 else np.full(n, r.fixed_value, dtype=float)
        if r.label and r.label not in env:
            env[r.label] = v
        env.setdefault(r.name, v)
    out = {}
    for r in table.defined:
        val = np.broadcast_to(np.asarray(r.expression.evaluate(env), dtype=float), (n,)).copy()
        out[r.lhs] = val
        env[r.lhs] = val
    return out


def posterior_vcov(x_samp=None, omega=None, type="lavaan"):
    if type == "theta":
        return np.array(omega)
    return np.atleast_2d(np.cov(x_samp, rowvar=False))


def sample_prior_predictive(table, n, nsamp=100, seed=0, group=1):
    """Datasets simulated from parameters drawn from their priors.

    Returns a list of ``nsamp`` arrays of shape n x p (observed variables of
    the level-1 block of ``group``).
    """
    from .likelihood import implied_moments

    rng = np.random.default_rng(seed)
    th = table.sample_prior_theta(nsamp, rng)
    bidx = next(i for i, b in enumerate(table.blocks) if b.group == group and b.level == 1)
    blk = table.blocks[bidx]
    out = []
    for t in th:
        x = table.pars_to_x(t)
        mats = table.matrices(x)[bidx]
        p, q = blk.p, blk.q
        # generative draw: eta = (I - B)^-1 (alpha + zeta), y = nu + Lambda eta + eps
        IB = np.linalg.inv(np.eye(q) - mats.beta) if q else np.zeros((0, 0))
        zeta = _mvn(rng, mats.psi, n)
        eta = (mats.alpha[None, :] + zeta) @ IB.T if q else np.zeros((n, 0))
        eps = _mvn(rng, mats.theta, n)
        y = mats.nu[None, :] + eta @ mats.lambda_.T + eps
        out.append(y)
    return out


def _mvn(rng, S, n):
    k = S.shape[0]
    if k == 0:
        return np.zeros((n, 0))
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    A = V * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((n, k)) @ A.T
