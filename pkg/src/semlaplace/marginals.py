"""Marginal posteriors: axis scans, volume (tilt) correction and skew-normal fits."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_ndtr

from .skewnorm import HALF_LOG2PI, LOG2, qsn_fast, sn_from_moments, sn_logpdf, sn_moments

log = logging.getLogger(__name__)

__all__ = [
    "ProfileRecord",
    "SkewNormalMarginal",
    "z_grid",
    "scan_profile",
    "TiltEstimator",
    "fit_skew_normal",
    "nmad",
    "marginal_to_natural",
    "profile_all",
    "METHODS",
]

METHODS = ("shortcut", "shortcut_fd", "hessian", "none")
_EDGE_DROP = 30.0
_GL129 = np.polynomial.legendre.leggauss(129)


def z_grid(n=21, half_width=4.0):
    return np.linspace(-half_width, half_width, n)


@dataclass
class ProfileRecord:
    j: int
    z: np.ndarray
    raw: np.ndarray
    tilt: float
    clamped: int = 0

    @property
    def adjusted(self):
        a = self.raw + self.tilt * self.z
        return a - a.max()


@dataclass
class SkewNormalMarginal:
    xi: float
    omega: float
    alpha: float
    c: float
    nmad: float
    fallback: bool = False

    def logpdf(self, z):
        return sn_logpdf(z, self.xi, self.omega, self.alpha)

    def moments(self):
        return sn_moments(self.xi, self.omega, self.alpha)

    def quantile(self, u):
        return qsn_fast(u, self.xi, self.omega, self.alpha)

    def to_dict(self):
        return {"xi": self.xi, "omega": self.omega, "alpha": self.alpha, "c": self.c, "nmad": self.nmad,
                "fallback": self.fallback}


# --------------------------------------------------------------------------
# scans
# --------------------------------------------------------------------------


def scan_profile(j, center, omega, logpost: Callable, z=None):
    """Log-posterior along v_j = Omega[:, j] / sqrt(Omega_jj), shifted to max 0."""
    z = z_grid() if z is None else np.asarray(z, dtype=float)
    v = omega[:, j] / math.sqrt(omega[j, j])
    raw = np.array([logpost(center + v * zk) for zk in z], dtype=float)
    bad = ~np.isfinite(raw)
    if bad.all():
        raise ValueError(f"log-posterior not finite anywhere on the scan of parameter {j}")
    if bad.any():
        log.warning("parameter %d: %d non-finite scan points clamped", j, int(bad.sum()))
        raw[bad] = raw[~bad].min() - _EDGE_DROP
    return raw - raw.max(), int(bad.sum())


class TiltEstimator:
    """Slope of the volume correction, gamma'_j = -1/2 d/dz log|H_cond(z)| along v_j.

    With H_c the negative Hessian at the centre, H_c^-1 = L_c L_c^T and u_j the
    normalised j-th column of H_c^-1,

        d/dz log|H_cond| = -sum_k T(l_k, l_k, v) + T(u_j, u_j, v)

    where T is the third-derivative tensor of the log-posterior and l_k are the
    columns of L_c. ``shortcut`` gets H_c and the trace term from second
    differences of the gradient (shared across parameters) and the Schur term
    from two more calls per parameter.
    """

    def __init__(self, grad: Callable, theta_star, center, omega, L, H, method="shortcut", h=None):
        if method not in METHODS:
            raise ValueError(f"unknown marginal correction {method!r}")
        self.grad = grad
        self.theta_star = np.asarray(theta_star, dtype=float)
        self.center = np.asarray(center, dtype=float)
        self.omega = omega
        self.L = L
        self.H = H
        self.method = method
        self.m = self.center.size
        self._w = None
        self._g0 = None
        self.h = h
        self.n_grad = 0

    def _g(self, t):
        self.n_grad += 1
        return self.grad(t)

    def _shared(self):
        if self._w is not None:
            return
        h = self.h or 5e-3
        c = self.center
        m = self.m
        g0 = self._g(c)
        gp = np.array([self._g(c + h * self.L[:, k]) for k in range(m)])
        gm = np.array([self._g(c - h * self.L[:, k]) for k in range(m)])
        # local curvature at the centre, whitened by L: A = L' H_c L
        M = -(gp - gm).T / (2.0 * h)
        A = self.L.T @ M
        A = 0.5 * (A + A.T)
        try:
            Lc = self.L @ np.linalg.cholesky(np.linalg.inv(A))
            self.omega_c = Lc @ Lc.T
        except np.linalg.LinAlgError:
            log.warning("local Hessian at the centre not positive definite; using the Laplace factor")
            Lc = None
            self.omega_c = self.omega
        if Lc is None:
            W = np.sum(gp + gm - 2.0 * g0, axis=0) / (h * h)
        else:
            W = np.zeros(m)
            for k in range(m):
                lk = Lc[:, k]
                W += (self._g(c + h * lk) + self._g(c - h * lk) - 2.0 * g0) / (h * h)
        self._g0, self._w = g0, W

    def slope(self, j):
        if self.method == "none":
            return 0.0
        v = self.omega[:, j] / math.sqrt(self.omega[j, j])
        try:
            if self.method == "shortcut":
                out = self._shortcut(j, v)
            elif self.method == "shortcut_fd":
                out = self._shortcut_fd(v)
            else:
                out = self._hessian(j, v)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.warning("parameter %d: tilt estimate failed (%s); no correction", j, exc)
            return 0.0
        if not np.isfinite(out):
            log.warning("parameter %d: non-finite tilt; no correction", j)
            return 0.0
        return float(out)

    def _shortcut(self, j, v):
        self._shared()
        h = self.h or 5e-3
        c = self.center
        # Schur term: direction of the j-th column of the local inverse Hessian
        u = self.omega_c[:, j] / math.sqrt(self.omega_c[j, j])
        wu = (self._g(c + h * u) + self._g(c - h * u) - 2.0 * self._g0) / (h * h)
        return 0.5 * float(v @ (self._w - wu))

    def _shortcut_fd(self, v):
        # forward differences at the mode shifted by h along v; tr(Omega H) = m and v'Hv = 1 at the mode
        h = self.h or 1e-2
        eps = 1e-4
        base = self.theta_star + h * v
        g1 = self._g(base)
        tr = 0.0
        for k in range(self.m):
            lk = self.L[:, k]
            tr += -lk @ (self._g(base + eps * lk) - g1) / eps
        vhv = -v @ (self._g(base + eps * v) - g1) / eps
        d = (tr - self.m) / h - (vhv - 1.0) / h
        return -0.5 * d

    def _cond_logdet(self, t, j):
        H = _fd_hessian(self._g, t)
        sign, ld = np.linalg.slogdet(H)
        if sign <= 0:
            raise np.linalg.LinAlgError("conditional Hessian not positive definite")
        Hinv_jj = np.linalg.solve(H, np.eye(self.m)[:, j])[j]
        if not Hinv_jj > 0:
            raise np.linalg.LinAlgError("conditional Hessian not positive definite")
        return ld + math.log(Hinv_jj)

    def _hessian(self, j, v):
        lp = self._cond_logdet(self.center + v, j)
        lm = self._cond_logdet(self.center - v, j)
        return -0.5 * (lp - lm) / 2.0


def _fd_hessian(grad, t):
    m = t.size
    H = np.empty((m, m))
    for k in range(m):
        h = np.finfo(float).eps ** (1 / 3) * max(1.0, abs(t[k]))
        e = np.zeros(m)
        e[k] = h
        H[:, k] = -(grad(t + e) - grad(t - e)) / (2 * h)
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# skew-normal fit
# --------------------------------------------------------------------------


def _psi(u):
    return np.exp(-0.5 * u * u - HALF_LOG2PI - log_ndtr(u))


def _sn_obj(p, z, y, w):
    """Weighted SSE between y = exp(adj) and exp(c) f_SN, with gradient and Hessian."""
    xi, s, a, c = p
    om = math.exp(s)
    t = (z - xi) / om
    u = a * t
    lf = c + LOG2 - s - 0.5 * t * t - HALF_LOG2PI + log_ndtr(u)
    F = np.exp(lf)
    r = y - F
    ps = _psi(u)
    dps = -ps * (u + ps)
    n = z.size
    # first derivatives of t and u w.r.t. (xi, s, a, c)
    tg = np.zeros((n, 4))
    tg[:, 0] = -1.0 / om
    tg[:, 1] = -t
    ug = a * tg
    ug[:, 2] = t
    G = np.zeros((n, 4))  # d log F
    G[:, 0] = (t - a * ps) / om
    G[:, 1] = -1.0 + t * t - a * t * ps
    G[:, 2] = t * ps
    G[:, 3] = 1.0
    # second derivatives of log F: -tg tg - t t'' + psi' ug ug + psi u''
    t2 = np.zeros((n, 4, 4))
    t2[:, 0, 1] = t2[:, 1, 0] = 1.0 / om
    t2[:, 1, 1] = t
    u2 = a * t2
    u2[:, 0, 2] = u2[:, 2, 0] = tg[:, 0]
    u2[:, 1, 2] = u2[:, 2, 1] = tg[:, 1]
    Hl = (
        -np.einsum("ni,nj->nij", tg, tg)
        - t[:, None, None] * t2
        + dps[:, None, None] * np.einsum("ni,nj->nij", ug, ug)
        + ps[:, None, None] * u2
    )
    f = float(np.sum(w * r * r))
    dF = F[:, None] * G
    grad = -2.0 * np.sum((w * r)[:, None] * dF, axis=0)
    d2F = F[:, None, None] * (np.einsum("ni,nj->nij", G, G) + Hl)
    hess = 2.0 * (np.einsum("n,ni,nj->ij", w, dF, dF) - np.einsum("n,nij->ij", w * r, d2F))
    return f, grad, hess


def _trapz_moments(z, y):
    mass = np.trapezoid(y, z)
    mean = np.trapezoid(z * y, z) / mass
    var = np.trapezoid((z - mean) ** 2 * y, z) / mass
    sd = math.sqrt(max(var, 1e-12))
    skew = np.trapezoid((z - mean) ** 3 * y, z) / mass / sd**3
    return mass, mean, sd, skew


def nmad(z, adjusted, sn: SkewNormalMarginal):
    y = np.exp(adjusted)
    fit = np.exp(sn.c + sn_logpdf(z, sn.xi, sn.omega, sn.alpha))
    return float(np.max(np.abs(y - fit)) / np.max(y))


_RETRY_NMAD = 1e-3


def _sn_search(p0, z, y, w, s_max):
    """trust-exact from p0; stops if log omega runs past s_max. Returns (p, ok)."""

    def stop(intermediate_result):
        if intermediate_result.x[1] > s_max:
            raise StopIteration

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(
                lambda p: _sn_obj(p, z, y, w)[0],
                p0,
                jac=lambda p: _sn_obj(p, z, y, w)[1],
                hess=lambda p: _sn_obj(p, z, y, w)[2],
                method="trust-exact",
                callback=stop,
                options={"gtol": 1e-12, "maxiter": 200},
            )
    except (ValueError, np.linalg.LinAlgError, FloatingPointError):
        return p0, False
    p = res.x
    ok = bool(np.all(np.isfinite(p)) and p[1] <= s_max and res.fun <= _sn_obj(p0, z, y, w)[0] + 1e-15)
    return p, ok


def _start_with_shape(mean, sd, alpha, mass):
    d = alpha / math.sqrt(1.0 + alpha * alpha)
    om = sd / math.sqrt(1.0 - 2.0 * d * d / math.pi)
    return np.array([mean - om * d * math.sqrt(2.0 / math.pi), math.log(om), alpha, math.log(mass)])


def _nmad_at(p, z, adjusted):
    sn = SkewNormalMarginal(float(p[0]), float(math.exp(p[1])), float(p[2]), float(p[3]), 0.0)
    return nmad(z, adjusted, sn)


def fit_skew_normal(z, adjusted):
    """Weighted least-squares skew-normal fit to an adjusted log-profile."""
    z = np.asarray(z, dtype=float)
    a = np.asarray(adjusted, dtype=float)
    a = a - a.max()
    y = np.exp(a)
    w = np.maximum(y, math.exp(-20.0))
    if np.sum(a > -10.0) < 5:
        log.warning("profile has fewer than 5 points within 10 log-units of its peak")
    mass, mean, sd, skew = _trapz_moments(z, y)
    xi0, om0, al0 = sn_from_moments(mean, sd, skew)
    p0 = np.array([xi0, math.log(om0), al0, math.log(mass)])
    fallback = False
    ok = False
    span = float(z[-1] - z[0])
    if a[0] > -2.0 and a[-1] > -2.0:
        # the grid does not reach either tail: nothing to fit a shape to
        log.warning("profile is nearly flat over the scan; using a moment fit")
    else:
        p, ok = _sn_search(p0, z, y, w, math.log(4.0 * span))
        if ok and _nmad_at(p, z, a) > _RETRY_NMAD:
            # a symmetric local minimum is common when the grid truncates the skew;
            # retry from skewed starts with the same mean and sd
            best = (_sn_obj(p, z, y, w)[0], p)
            for a0 in (-4.0, -1.5, 1.5, 4.0):
                q, okq = _sn_search(_start_with_shape(mean, sd, a0, mass), z, y, w, math.log(4.0 * span))
                if okq:
                    fq = _sn_obj(q, z, y, w)[0]
                    if fq < best[0]:
                        best = (fq, q)
            p = best[1]
    if not ok:
        fallback = True
        p = np.array([mean, math.log(sd), 0.0, math.log(mass)])
    sn = SkewNormalMarginal(float(p[0]), float(math.exp(p[1])), float(p[2]), float(p[3]), 0.0, fallback)
    sn.nmad = nmad(z, a, sn)
    return sn


# --------------------------------------------------------------------------
# natural-scale summaries
# --------------------------------------------------------------------------


def marginal_to_natural(sn: SkewNormalMarginal, center_j, sd_j, g_inv: Callable, probs=(0.025, 0.5, 0.975)):
    """Mean, SD and quantiles of x = g_inv(center + sd * T), T ~ SN, by Gauss-Legendre over u."""
    lo, hi = 1e-6, 1.0 - 1e-6
    nodes, weights = _GL129
    u = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights
    x = g_inv(center_j + sd_j * sn.quantile(u))
    tot = w.sum()
    mean = float(np.sum(w * x) / tot)
    var = float(np.sum(w * (x - mean) ** 2) / tot)
    qs = g_inv(center_j + sd_j * sn.quantile(np.asarray(probs)))
    return {"mean": mean, "sd": math.sqrt(max(var, 0.0)), "quantiles": np.asarray(qs, dtype=float)}


@dataclass
class MarginalResult:
    profiles: list
    marginals: list
    n_grad: int = 0
    n_eval: int = 0


def _one(j, center, omega, logpost, tilt, z):
    raw, ncl = scan_profile(j, center, omega, logpost, z)
    g = tilt.slope(j)
    rec = ProfileRecord(j, np.asarray(z), raw, g, ncl)
    sn = fit_skew_normal(rec.z, rec.adjusted)
    return rec, sn


def profile_all(logpost, grad, theta_star, center, omega, L, H, method="shortcut", ngrid=21, executor=None):
    """Scan, tilt and fit every parameter. Results are ordered by parameter index."""
    z = z_grid(ngrid)
    tilt = TiltEstimator(grad, theta_star, center, omega, L, H, method)
    m = len(center)
    if method == "shortcut":
        tilt._shared()  # computed once before any parallel work
    if executor is not None:
        out = list(executor.map(lambda j: _one(j, center, omega, logpost, tilt, z), range(m)))
    else:
        out = [_one(j, center, omega, logpost, tilt, z) for j in range(m)]
    return MarginalResult([o[0] for o in out], [o[1] for o in out], tilt.n_grad)
