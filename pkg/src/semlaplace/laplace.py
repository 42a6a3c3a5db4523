"""Posterior mode, curvature and the variational location correction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .likelihood import Likelihood, SingularStructure
from .partable import ParameterTable
from .qmc import normal_points

log = logging.getLogger(__name__)

__all__ = [
    "NotConverged",
    "NonFiniteObjective",
    "NotPositiveDefinite",
    "Posterior",
    "OptimResult",
    "bfgs_maximize",
    "find_mode",
    "hessian_at_mode",
    "VBResult",
    "vb_shift",
    "default_qmc_points",
    "LaplaceFit",
    "covariance_from_precision",
    "hess_condition",
]

EPS = np.finfo(float).eps


class NotConverged(RuntimeWarning):
    pass


class NonFiniteObjective(ValueError):
    pass


class NotPositiveDefinite(ValueError):
    pass


class Posterior:
    """Unnormalised log-posterior on the reduced unconstrained scale."""

    def __init__(self, table: ParameterTable, lik: Likelihood):
        self.table = table
        self.lik = lik
        self.m = table.m
        self.n_eval = 0

    def loglik_x(self, x):
        try:
            return self.lik.evaluate(x, need_grad=False)[0]
        except SingularStructure:
            return -np.inf

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return -np.inf
        self.n_eval += 1
        x = self.table.pars_to_x(theta)
        ll = self.loglik_x(x)
        if not np.isfinite(ll):
            return -np.inf
        return ll + self.table.log_prior(theta)

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return -np.inf, np.full(self.m, np.nan)
        self.n_eval += 1
        x = self.table.pars_to_x(theta)
        try:
            ll, gx = self.lik.evaluate(x)
        except SingularStructure:
            return -np.inf, np.full(self.m, np.nan)
        if not np.isfinite(ll):
            return -np.inf, np.full(self.m, np.nan)
        val = ll + self.table.log_prior(theta)
        g = self.table.jt_dot(theta, gx, x) + self.table.grad_log_prior(theta)
        return val, g

    def grad(self, theta):
        return self.value_and_grad(theta)[1]


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str = ""


def bfgs_maximize(fg, x0, iter_max=1000, eval_max=2000, tol=1e-6, relative=True, max_step=None):
    """Maximise with BFGS and a backtracking line search that tolerates -inf.

    ``fg(x)`` returns (value, gradient). Convergence: ``max|g| / max(1, |f|) < tol``
    (or ``max|g| < tol`` when ``relative`` is false).
    """
    x = np.array(x0, dtype=float)
    n = x.size
    f, g = fg(x)
    nev = 1
    if not np.isfinite(f):
        raise NonFiniteObjective("objective is not finite at the starting point")

    def crit(f, g):
        gi = np.max(np.abs(g)) if n else 0.0
        return gi / max(1.0, abs(f)) if relative else gi

    Hinv = np.eye(n)
    first = True
    it = 0
    msg = "iteration limit reached"
    conv = crit(f, g) < tol
    if conv:
        msg = "converged"
    while not conv and it < iter_max and nev < eval_max:
        it += 1
        p = Hinv @ g  # ascent direction
        slope = g @ p
        if not slope > 0:
            Hinv = np.eye(n)
            p = g.copy()
            slope = g @ p
        if first:
            scale = min(1.0, 1.0 / max(np.max(np.abs(p)), 1e-12))
            p *= scale
            slope *= scale
        if max_step is not None:
            pm = np.max(np.abs(p))
            if pm > max_step:
                p *= max_step / pm
                slope *= max_step / pm
        t = 1.0
        accepted = False
        while nev < eval_max:
            xn = x + t * p
            fn, gn = fg(xn)
            nev += 1
            if np.isfinite(fn) and fn >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5 if np.isfinite(fn) else 0.2
            if t < 1e-14:
                break
        if not accepted:
            if not first and not np.allclose(Hinv, np.eye(n)):
                Hinv = np.eye(n)
                first = True
                continue
            msg = "line search failed"
            break
        s = xn - x
        y = g - gn  # gradient of the minimisation objective -f
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                Hinv = np.eye(n) * (sy / (y @ y))
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = Hinv + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        first = False
        x, f, g = xn, fn, gn
        if crit(f, g) < tol:
            conv = True
            msg = "converged"
            break
        if abs(s).max() < 1e-14 * max(1.0, abs(x).max()):
            msg = "step size below tolerance"
            break
    return OptimResult(x, f, g, it, nev, bool(conv), msg)


def find_mode(post: Posterior, theta_init, iter_max=1000, eval_max=2000, tol=1e-6):
    res = bfgs_maximize(post.value_and_grad, theta_init, iter_max=iter_max, eval_max=eval_max, tol=tol)
    if not res.converged:
        log.warning("mode search did not converge: %s", res.message)
    return res


def hessian_at_mode(grad: Callable, theta_star):
    """Negative Hessian by central differences of the analytic gradient (2m calls)."""
    theta_star = np.asarray(theta_star, dtype=float)
    m = theta_star.size
    H = np.empty((m, m))
    for j in range(m):
        h = EPS ** (1.0 / 3.0) * max(1.0, abs(theta_star[j]))
        e = np.zeros(m)
        e[j] = h
        gp = grad(theta_star + e)
        gm = grad(theta_star - e)
        H[:, j] = -(gp - gm) / (2.0 * h)
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        raise NotPositiveDefinite("Hessian has non-finite entries")
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            "negative Hessian at the mode is not positive definite; the model may be unidentified"
        ) from None
    return H


def covariance_from_precision(H):
    """Omega = H^-1 and its lower Cholesky factor."""
    cH = linalg.cholesky(H, lower=True)
    inv_cH = linalg.solve_triangular(cH, np.eye(H.shape[0]), lower=True)
    omega = inv_cH.T @ inv_cH
    omega = 0.5 * (omega + omega.T)
    L = np.linalg.cholesky(omega)
    return omega, L


def hess_condition(H):
    w = np.linalg.eigvalsh(H)
    return float(w[-1] / w[0])


# --------------------------------------------------------------------------
# variational location correction
# --------------------------------------------------------------------------


def default_qmc_points(m):
    return int(min(100, max(30, 2 * m)))


@dataclass
class VBResult:
    delta: np.ndarray
    d: np.ndarray
    applied: bool
    kld_global: float
    kld: np.ndarray
    objective0: float
    objective: float
    iterations: int = 0
    elbo_gain: float = 0.0


def vb_shift(post: Posterior, theta_star, L, n_points=None, seed=0, iter_max=200, tol=1e-6, executor=None,
             f_star=None):
    """QMC maximisation of E_q[L] over the location of N(theta* + delta, Omega).

    ``kld_global`` is ``L(theta*) - E_q[L]`` at the optimum (needs ``f_star``);
    ``elbo_gain`` is the improvement of the QMC objective over delta = 0.
    """
    m = theta_star.size
    B = n_points or default_qmc_points(m)
    Z = normal_points(B, m, seed)
    pts0 = Z @ L.T  # L u_b

    def fg(d):
        shift = L @ d
        P = theta_star + shift + pts0
        if executor is not None:
            res = list(executor.map(post.value_and_grad, P))
        else:
            res = [post.value_and_grad(row) for row in P]
        vals = np.array([r[0] for r in res])
        if not np.all(np.isfinite(vals)):
            return -np.inf, np.full(m, np.nan)
        gs = np.array([r[1] for r in res])
        return float(vals.mean()), L.T @ gs.mean(axis=0)

    omega_diag = np.sum(L * L, axis=1)
    zero = np.zeros(m)
    try:
        f0, _ = fg(zero)
        if not np.isfinite(f0):
            raise NonFiniteObjective("QMC objective not finite at the Laplace centre")
        res = bfgs_maximize(fg, zero, iter_max=iter_max, eval_max=4 * iter_max, tol=tol, relative=False, max_step=3.0)
    except NonFiniteObjective as exc:
        log.warning("VB correction skipped: %s", exc)
        return VBResult(np.zeros(m), zero, False, 0.0, np.zeros(m), -np.inf, -np.inf)
    if not np.isfinite(res.fun) or res.fun < f0:
        log.warning("VB correction did not improve the objective; skipped")
        kg = float(f_star - f0) if f_star is not None else 0.0
        return VBResult(np.zeros(m), zero, False, kg, np.zeros(m), f0, f0, res.iterations)
    delta = L @ res.x
    kld = delta**2 / (2.0 * omega_diag)
    kg = float(f_star - res.fun) if f_star is not None else float(res.fun - f0)
    return VBResult(delta, res.x, True, kg, kld, f0, float(res.fun), res.iterations, float(res.fun - f0))


@dataclass
class LaplaceFit:
    theta_star: np.ndarray
    H: np.ndarray
    omega: np.ndarray
    L: np.ndarray
    delta_hat: np.ndarray
    objective_at_mode: float
    iterations: int
    converged: bool
    grad_at_mode: np.ndarray
    vb: Optional[VBResult] = None

    @property
    def center(self):
        return self.theta_star + self.delta_hat

    @property
    def sd(self):
        return np.sqrt(np.diag(self.omega))
