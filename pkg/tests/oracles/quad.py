"""1-D adaptive quadrature summaries of unnormalised log-densities."""

import numpy as np
from scipy import integrate, optimize


def moments_1d(logdens, lo, hi):
    """(mean, sd, mode) of exp(logdens) on [lo, hi]."""
    xs = np.linspace(lo, hi, 2001)
    lv = np.array([logdens(x) for x in xs])
    k = int(np.argmax(lv))
    ref = lv[k]
    mode = optimize.minimize_scalar(lambda x: -logdens(x), bracket=(xs[max(k - 1, 0)], xs[k], xs[min(k + 1, 2000)]))
    f = lambda x: np.exp(logdens(x) - ref)
    pts = [mode.x]
    z = integrate.quad(f, lo, hi, points=pts, limit=400, epsabs=0, epsrel=1e-11)[0]
    m1 = integrate.quad(lambda x: x * f(x), lo, hi, points=pts, limit=400, epsabs=0, epsrel=1e-11)[0] / z
    m2 = integrate.quad(lambda x: (x - m1) ** 2 * f(x), lo, hi, points=pts, limit=400, epsabs=0, epsrel=1e-11)[0] / z
    return m1, float(np.sqrt(m2)), float(mode.x)


def density_1d(logdens, grid):
    lv = np.array([logdens(x) for x in grid])
    p = np.exp(lv - lv.max())
    return p / np.trapezoid(p, grid)
