"""Small datasets and models covering every likelihood block kind."""

import numpy as np
import pandas as pd

from semlaplace.fit import FitConfig, build_model
from semlaplace.laplace import Posterior

PD_MODEL_ML = """
ind60 =~ x1 + x2 + x3
dem60 =~ y1 + y2 + y3 + y4
dem65 =~ y5 + y6 + y7 + y8
dem60 ~ ind60
dem65 ~ ind60 + dem60
y1 ~~ y5
y2 ~~ y4 + y6
"""

TWO_LEVEL_MODEL = """
level: 1
  f =~ a + b + c
  f ~ x
level: 2
  fb =~ a + b + c
"""


def punch_holes(frame, rate, seed, keep_one=True):
    rng = np.random.default_rng(seed)
    Y = frame.to_numpy(dtype=float).copy()
    miss = rng.random(Y.shape) < rate
    if keep_one:
        miss[miss.all(axis=1), 0] = False
    Y[miss] = np.nan
    return pd.DataFrame(Y, columns=frame.columns)


def two_level_frame(J=24, seed=7, sizes=(2, 3, 4, 5), missing=0.0):
    rng = np.random.default_rng(seed)
    n_j = rng.choice(sizes, J)
    cl = np.repeat(np.arange(J), n_j)
    N = cl.size
    fb = rng.normal(0, 0.6, J)[cl]
    x = rng.normal(0, 1, N)
    f = 0.5 * x + rng.normal(0, 1, N)
    cols = {}
    for k, (lw, lb) in enumerate(zip((1.0, 0.8, 1.2), (1.0, 0.9, 0.7))):
        cols["abc"[k]] = 0.3 * k + lw * f + lb * fb + rng.normal(0, 0.6, N) + rng.normal(0, 0.2, J)[cl]
    df = pd.DataFrame({**cols, "x": x})
    if missing:
        miss = rng.random((N, 3)) < missing
        arr = df[["a", "b", "c"]].to_numpy().copy()
        arr[miss] = np.nan
        df[["a", "b", "c"]] = arr
    df["cl"] = cl
    return df


def scenario(kind, pd_frame):
    """(table, data, lik) for one block kind."""
    if kind == "complete":
        return build_model(PD_MODEL_ML, pd_frame, FitConfig())
    if kind == "missing":
        fr = punch_holes(pd_frame, 0.12, 11)
        return build_model(PD_MODEL_ML, fr, FitConfig(missing="ml"))
    if kind == "multigroup":
        fr = pd_frame.copy()
        fr["g"] = np.where(np.arange(len(fr)) % 2 == 0, "even", "odd")
        return build_model(PD_MODEL_ML, fr, FitConfig(group="g", meanstructure=True, group_equal=("loadings",)))
    if kind == "two_level":
        fr = two_level_frame()
        return build_model(TWO_LEVEL_MODEL, fr, FitConfig(cluster="cl"))
    if kind == "two_level_missing":
        fr = two_level_frame(missing=0.15, seed=9)
        return build_model(TWO_LEVEL_MODEL, fr, FitConfig(cluster="cl", missing="ml"))
    raise KeyError(kind)


KINDS = ("complete", "missing", "multigroup", "two_level", "two_level_missing")


def random_admissible(table, post, rng, scale=0.4, tries=50):
    """Random theta near the start values with a finite posterior."""
    for _ in range(tries):
        th = table.theta_start + rng.normal(0, scale, table.m)
        if np.isfinite(post(th)):
            return th
    raise RuntimeError("no admissible point found")


def posterior_for(kind, pd_frame):
    table, data, lik = scenario(kind, pd_frame)
    return table, data, lik, Posterior(table, lik)
