"""Block-structured Gaussian log-likelihood with analytic gradients.

Data are reduced to blocks at load time:

* ``group``           complete data of one group (n, ybar, S)
* ``missing_pattern`` cases of one group sharing a missingness pattern
* ``cluster``         complete two-level clusters of equal size (within scatter
                      plus cluster means)
* ``cluster_missing`` one two-level cluster with missing cells (dense kernel)
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .partable import ModelMatrices, ParameterTable

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)

__all__ = [
    "SingularStructure",
    "DataBlock",
    "ImpliedMoments",
    "SEMData",
    "implied_moments",
    "gaussian_kernel",
    "block_loglik",
    "grad_loglik_natural",
    "Likelihood",
    "prepare_data",
]


class SingularStructure(ValueError):
    """(I - B) is numerically singular."""


@dataclass
class ImpliedMoments:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class DataBlock:
    kind: str
    group: int
    n: int
    observed_index: np.ndarray
    ybar: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    # cluster kinds
    cluster_size: int = 0
    n_clusters: int = 0
    S_W: Optional[np.ndarray] = None  # pooled within scatter / (J (n - 1))
    cluster_means: Optional[np.ndarray] = None  # J x p
    Y: Optional[np.ndarray] = None  # dense cluster data (n_j x p, NaN = missing)


def _inv_i_minus_b(B):
    q = B.shape[0]
    if q == 0 or not B.any():
        return np.eye(q)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(np.eye(q) - B, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < 1e-12:
        raise SingularStructure("(I - B) is singular")
    return linalg.lu_solve((lu, piv), np.eye(q), check_finite=False)


def implied_moments(mats: ModelMatrices) -> ImpliedMoments:
    """mu = nu + Lambda A alpha, Sigma = Lambda A Psi A' Lambda' + Theta with A = (I - B)^-1."""
    A = _inv_i_minus_b(mats.beta)
    LA = mats.lambda_ @ A
    sigma = LA @ mats.psi @ LA.T + mats.theta
    sigma = 0.5 * (sigma + sigma.T)
    mu = mats.nu + LA @ mats.alpha
    return ImpliedMoments(mu, sigma)


def gaussian_kernel(n, S, d, sigma, need_grad=True):
    """n-weighted Gaussian log-likelihood in sufficient statistics.

    Returns (loglik, dL/dSigma, dL/dmu); -inf when Sigma is not PD.
    """
    p = sigma.shape[0]
    try:
        c = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return -np.inf, None, None
    ci = linalg.solve_triangular(c, np.eye(p), lower=True, check_finite=False)
    sinv = ci.T @ ci
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    M = S if d is None else S + np.outer(d, d)
    ll = -0.5 * n * (p * LOG2PI + logdet + np.sum(sinv * M))
    if not need_grad:
        return ll, None, None
    G = 0.5 * n * (sinv @ M @ sinv - sinv)
    gmu = None if d is None else n * (sinv @ d)
    return ll, G, gmu


def _matrix_grads(mats: ModelMatrices, G, gmu):
    """Chain dL/dSigma (symmetric) and dL/dmu to the model matrices."""
    A = _inv_i_minus_b(mats.beta)
    L = mats.lambda_
    LA = L @ A
    P = A @ mats.psi @ A.T
    GLA = G @ LA
    out = {
        "theta": G,
        "psi": LA.T @ GLA,
        "lambda": 2.0 * G @ L @ P,
        "beta": 2.0 * LA.T @ G @ L @ P,
        "nu": np.zeros(L.shape[0]),
        "alpha": np.zeros(L.shape[1]),
    }
    if gmu is not None:
        Aa = A @ mats.alpha
        LtG = LA.T @ gmu
        out["nu"] = gmu
        out["alpha"] = LtG
        out["lambda"] = out["lambda"] + np.outer(gmu, Aa)
        out["beta"] = out["beta"] + np.outer(LtG, Aa)
    return out


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------


@dataclass
class SEMData:
    """Per-group raw data aligned to the model's observed-variable order."""

    variables: list  # per group: list of names (level-1 order)
    raw: list  # per group: n_g x p array with NaN for missing
    clusters: list  # per group: cluster id array or None
    blocks: list = field(default_factory=list)
    group_labels: list = field(default_factory=list)
    n_dropped: int = 0
    meanstructure: bool = False

    @property
    def n_obs(self):
        return int(sum(r.shape[0] for r in self.raw))

    @property
    def has_missing(self):
        return any(np.isnan(r).any() for r in self.raw)

    @property
    def n_patterns(self):
        out = 0
        for r in self.raw:
            pats = {tuple(row) for row in np.isnan(r)}
            out += len(pats)
        return out


def _ml_cov(Y):
    ybar = Y.mean(axis=0)
    D = Y - ybar
    return ybar, D.T @ D / Y.shape[0]


def _cluster_blocks(Y, cl, g):
    blocks = []
    ids, inv = np.unique(cl, return_inverse=True)
    complete = {}
    for k in range(len(ids)):
        Yk = Y[inv == k]
        if np.isnan(Yk).any():
            keep = ~np.all(np.isnan(Yk), axis=1)
            Yk = Yk[keep]
            if Yk.shape[0] == 0:
                continue
            blocks.append(
                DataBlock("cluster_missing", g, Yk.shape[0], np.arange(Y.shape[1]), Y=Yk, cluster_size=Yk.shape[0], n_clusters=1)
            )
        else:
            complete.setdefault(Yk.shape[0], []).append(Yk)
    for nsz in sorted(complete):
        cls = complete[nsz]
        J = len(cls)
        p = Y.shape[1]
        means = np.array([c.mean(axis=0) for c in cls])
        W = np.zeros((p, p))
        for c in cls:
            D = c - c.mean(axis=0)
            W += D.T @ D
        nw = J * (nsz - 1)
        mbar, SB = _ml_cov(means)
        blocks.append(
            DataBlock(
                "cluster",
                g,
                J * nsz,
                np.arange(p),
                ybar=mbar,
                S=SB,
                cluster_size=nsz,
                n_clusters=J,
                S_W=W / nw if nw > 0 else np.zeros((p, p)),
                cluster_means=means,
            )
        )
    return blocks


def _pattern_blocks(Y, g):
    miss = np.isnan(Y)
    blocks = []
    if not miss.any():
        ybar, S = _ml_cov(Y)
        return [DataBlock("group", g, Y.shape[0], np.arange(Y.shape[1]), ybar, S)]
    pats, inv = np.unique(miss, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    order = sorted(range(len(pats)), key=lambda k: (pats[k].sum(), tuple(pats[k])))
    for k in order:
        obs = np.flatnonzero(~pats[k])
        if obs.size == 0:
            continue
        Yk = Y[inv == k][:, obs]
        ybar, S = _ml_cov(Yk)
        blocks.append(DataBlock("missing_pattern", g, Yk.shape[0], obs, ybar, S))
    return blocks


def prepare_data(
    df,
    table: ParameterTable,
    group_col=None,
    cluster_col=None,
    missing="listwise",
    group_labels=None,
):
    """Align a DataFrame to the table and reduce it to likelihood blocks."""
    import pandas as pd

    if missing not in ("listwise", "ml"):
        raise ValueError("missing must be 'listwise' or 'ml'")
    if group_col is not None:
        labels = list(group_labels) if group_labels is not None else list(pd.unique(df[group_col]))
        frames = [df[df[group_col] == lab] for lab in labels]
    else:
        labels = [None]
        frames = [df]
    if len(frames) != table.n_groups:
        raise ValueError(f"data has {len(frames)} groups but the table was built for {table.n_groups}")
    variables, raws, clusters, blocks = [], [], [], []
    dropped = 0
    for g, fr in enumerate(frames, start=1):
        lvl1 = [b for b in table.blocks if b.group == g and b.level == 1][0]
        names = list(lvl1.ov)
        Y = fr[names].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
        cl = fr[cluster_col].to_numpy() if cluster_col is not None else None
        allmiss = np.all(np.isnan(Y), axis=1)
        if missing == "listwise":
            keep = ~np.isnan(Y).any(axis=1)
        else:
            keep = ~allmiss
            if allmiss.any():
                log.warning("dropping %d cases with every variable missing", int(allmiss.sum()))
        dropped += int((~keep).sum())
        Y = Y[keep]
        if cl is not None:
            cl = cl[keep]
        if Y.shape[0] == 0:
            raise ValueError(f"group {g} has no usable cases")
        variables.append(names)
        raws.append(Y)
        clusters.append(cl)
        if table.n_levels > 1:
            if cl is None:
                raise ValueError("a two-level model needs a cluster column")
            blocks.extend(_cluster_blocks(Y, cl, g))
        else:
            if cl is not None:
                raise ValueError("cluster column given but the model has no level: blocks")
            blocks.extend(_pattern_blocks(Y, g))
    data = SEMData(variables, raws, clusters, blocks, labels, dropped)
    data.meanstructure = table.meanstructure
    return data


def sample_start_stats(df, ov_names, group_col=None, cluster_col=None, group_labels=None):
    """Means/variances by (group, level) used for start values."""
    import pandas as pd

    out = {}
    if group_col is not None:
        labels = list(group_labels) if group_labels is not None else list(pd.unique(df[group_col]))
        frames = [df[df[group_col] == lab] for lab in labels]
    else:
        frames = [df]
    for g, fr in enumerate(frames, start=1):
        cols = [c for c in ov_names if c in fr.columns]
        num = fr[cols].apply(pd.to_numeric, errors="coerce")
        means = num.mean().to_dict()
        if cluster_col is None:
            out[(g, 1)] = (means, num.var(ddof=0).to_dict())
        else:
            cm = num.groupby(fr[cluster_col]).transform("mean")
            within = (num - cm).var(ddof=0).to_dict()
            between = num.groupby(fr[cluster_col]).mean().var(ddof=0).to_dict()
            between = {k: max(v, 1e-2 * max(within.get(k, 1.0), 1e-8)) for k, v in between.items()}
            out[(g, 1)] = (means, within)
            out[(g, 2)] = (means, between)
    return out


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


class Likelihood:
    """Evaluates the block log-likelihood and its natural-scale gradient."""

    def __init__(self, table: ParameterTable, data: SEMData):
        self.table = table
        self.data = data
        self.blocks = data.blocks
        self.n_levels = table.n_levels
        self._by_group = {}
        for b in data.blocks:
            self._by_group.setdefault(b.group, []).append(b)
        self._tblocks = {}
        for k, tb in enumerate(table.blocks):
            self._tblocks[(tb.group, tb.level)] = k
        self._between_idx = {}
        for g in self._by_group:
            if self.n_levels > 1:
                w = table.blocks[self._tblocks[(g, 1)]]
                bt = table.blocks[self._tblocks[(g, 2)]]
                self._between_idx[g] = np.array([w.ov.index(v) for v in bt.ov], dtype=int)

    # group-level moments ---------------------------------------------------

    def group_moments(self, mats_list, g):
        """(mu, Sigma) for single-level or (mu, Sigma_W, Sigma_B) for two-level groups."""
        if self.n_levels == 1:
            im = implied_moments(mats_list[self._tblocks[(g, 1)]])
            return im.mu, im.sigma
        mw = mats_list[self._tblocks[(g, 1)]]
        mb = mats_list[self._tblocks[(g, 2)]]
        iw = implied_moments(mw)
        ib = implied_moments(mb)
        p = iw.sigma.shape[0]
        idx = self._between_idx[g]
        SB = np.zeros((p, p))
        SB[np.ix_(idx, idx)] = ib.sigma
        mu = iw.mu.copy()
        mu[idx] += ib.mu
        return mu, iw.sigma, SB

    def evaluate(self, x, need_grad=True):
        """Return (loglik, d loglik / dx)."""
        table = self.table
        mats = table.matrices(x)
        total = 0.0
        mat_grads = [None] * len(table.blocks)
        for g, blocks in self._by_group.items():
            if self.n_levels == 1:
                res = self._single_level(mats, g, blocks, need_grad)
            else:
                res = self._two_level(mats, g, blocks, need_grad)
            if res is None:
                return -np.inf, None
            ll, grads = res
            total += ll
            if need_grad:
                for k, gd in grads.items():
                    mat_grads[k] = gd
        if not need_grad:
            return total, None
        for k, tb in enumerate(table.blocks):
            if mat_grads[k] is None:
                mat_grads[k] = {
                    "nu": np.zeros(tb.p),
                    "lambda": np.zeros((tb.p, tb.q)),
                    "beta": np.zeros((tb.q, tb.q)),
                    "alpha": np.zeros(tb.q),
                    "theta": np.zeros((tb.p, tb.p)),
                    "psi": np.zeros((tb.q, tb.q)),
                }
        return total, table.matrix_grad_to_x(mat_grads)

    def _single_level(self, mats, g, blocks, need_grad):
        k = self._tblocks[(g, 1)]
        im = implied_moments(mats[k])
        res = self.kernel_single(blocks, im.mu, im.sigma, need_grad)
        if res is None:
            return None
        ll, G, gmu = res
        if not need_grad:
            return ll, {}
        return ll, {k: _matrix_grads(mats[k], G, gmu if self.table.meanstructure else None)}

    def kernel_single(self, blocks, mu, sigma, need_grad=True, use_mean=None):
        """Sum of pattern kernels at moments (mu, sigma): (ll, dL/dSigma, dL/dmu) or None."""
        p = sigma.shape[0]
        G = np.zeros((p, p))
        gmu = np.zeros(p)
        ll = 0.0
        if use_mean is None:
            use_mean = self.table.meanstructure
        for b in blocks:
            o = b.observed_index
            full = o.size == p
            sub = sigma if full else sigma[np.ix_(o, o)]
            d = (b.ybar - (mu if full else mu[o])) if use_mean else None
            lk, Gk, gk = gaussian_kernel(b.n, b.S, d, sub, need_grad)
            if not np.isfinite(lk):
                return None
            ll += lk
            if need_grad:
                if full:
                    G += Gk
                    if gk is not None:
                        gmu += gk
                else:
                    G[np.ix_(o, o)] += Gk
                    if gk is not None:
                        gmu[o] += gk
        return ll, G, gmu

    def _two_level(self, mats, g, blocks, need_grad):
        kw, kb = self._tblocks[(g, 1)], self._tblocks[(g, 2)]
        mu, SW, SB = self.group_moments(mats, g)
        res = self.kernel_two(blocks, mu, SW, SB, need_grad)
        if res is None:
            return None
        ll, GW, GB, gmu = res
        if not need_grad:
            return ll, {}
        idx = self._between_idx[g]
        gw = _matrix_grads(mats[kw], GW, gmu)
        gb = _matrix_grads(mats[kb], GB[np.ix_(idx, idx)], gmu[idx])
        return ll, {kw: gw, kb: gb}

    @staticmethod
    def kernel_two(blocks, mu, SW, SB, need_grad=True):
        """Two-level cluster kernels: (ll, dL/dSigma_W, dL/dSigma_B, dL/dmu) or None."""
        p = SW.shape[0]
        GW = np.zeros((p, p))
        GB = np.zeros((p, p))
        gmu = np.zeros(p)
        ll = 0.0
        for b in blocks:
            if b.kind == "cluster":
                n, J = b.cluster_size, b.n_clusters
                if n > 1:
                    lw, Gw, _ = gaussian_kernel(J * (n - 1), b.S_W, None, SW, need_grad)
                    if not np.isfinite(lw):
                        return None
                    ll += lw
                    if need_grad:
                        GW += Gw
                C = SW / n + SB
                lb, Gc, gm = gaussian_kernel(J, b.S, b.ybar - mu, C, need_grad)
                if not np.isfinite(lb):
                    return None
                ll += lb - 0.5 * J * p * math.log(n)
                if need_grad:
                    GW += Gc / n
                    GB += Gc
                    gmu += gm
            else:
                res = _woodbury_cluster(b, mu, SW, SB, need_grad)
                if res is None:
                    return None
                lk, Gw, Gb, gm = res
                ll += lk
                if need_grad:
                    GW += Gw
                    GB += Gb
                    gmu += gm
        return ll, GW, GB, gmu

    def blocks_of(self, g):
        return self._by_group.get(g, [])

    def between_index(self, g):
        return self._between_idx.get(g)


def _cluster_patterns(b):
    """Cached (observed index, row residual template) groups of a dense cluster block."""
    pats = getattr(b, "_patterns", None)
    if pats is None:
        miss = np.isnan(b.Y)
        keys, inv = np.unique(miss, axis=0, return_inverse=True)
        inv = np.asarray(inv).ravel()
        pats = []
        for k, key in enumerate(keys):
            o = np.flatnonzero(~key)
            if o.size:
                pats.append((o, b.Y[inv == k][:, o]))
        b._patterns = pats
    return pats


def _woodbury_cluster(b, mu, SW, SB, need_grad=True):
    """One cluster with missing cells, Sigma_c = blockdiag(SW_oo) + U SB U'.

    Uses the Woodbury identity with K = SB (I + A SB)^-1, which stays valid
    when SB is singular (within-only variables).
    """
    p = SW.shape[0]
    A = np.zeros((p, p))
    bvec = np.zeros(p)
    ll = 0.0
    nobs = 0
    parts = []
    for o, Yo in _cluster_patterns(b):
        try:
            c = np.linalg.cholesky(SW[np.ix_(o, o)])
        except np.linalg.LinAlgError:
            return None
        ci = linalg.solve_triangular(c, np.eye(o.size), lower=True, check_finite=False)
        W = ci.T @ ci
        R = Yo - mu[o]
        RW = R @ W
        nk = Yo.shape[0]
        ll -= nk * 2.0 * np.sum(np.log(np.diag(c))) + np.sum(RW * R)
        nobs += nk * o.size
        A[np.ix_(o, o)] += nk * W
        bvec[o] += RW.sum(axis=0)
        parts.append((o, W, RW))
    M = np.eye(p) + A @ SB
    sign, ld = np.linalg.slogdet(M)
    if sign <= 0 or not np.isfinite(ld):
        return None
    K = SB @ np.linalg.inv(M)
    K = 0.5 * (K + K.T)
    Kb = K @ bvec
    ll = 0.5 * (ll - ld + bvec @ Kb - nobs * LOG2PI)
    if not need_grad:
        return ll, None, None, None
    GW = np.zeros((p, p))
    gmu = np.zeros(p)
    for o, W, RW in parts:
        a = RW - W @ Kb[o]  # rows: a_i on the observed coordinates
        nk = a.shape[0]
        WKW = W @ K[np.ix_(o, o)] @ W
        GW[np.ix_(o, o)] += 0.5 * (a.T @ a - nk * (W - WKW))
        gmu[o] += a.sum(axis=0)
    GB = 0.5 * (np.outer(gmu, gmu) - A + A @ K @ A)
    return ll, GW, GB, gmu


def _dense_cluster(Y, mu, SW, SB, need_grad=True):
    """Exact MVN of one cluster's stacked observed cells under I x SW + J x SB."""
    n, p = Y.shape
    big = np.kron(np.eye(n), SW) + np.kron(np.ones((n, n)), SB)
    y = Y.ravel()
    obs = np.flatnonzero(~np.isnan(y))
    sub = big[np.ix_(obs, obs)]
    d = y[obs] - np.tile(mu, n)[obs]
    ll, G, gm = gaussian_kernel(1, np.zeros((obs.size, obs.size)), d, sub, need_grad)
    if not np.isfinite(ll):
        return None
    if not need_grad:
        return ll, None, None, None
    Gf = np.zeros((n * p, n * p))
    Gf[np.ix_(obs, obs)] = G
    gf = np.zeros(n * p)
    gf[obs] = gm
    G4 = Gf.reshape(n, p, n, p)
    GW = np.einsum("ijik->jk", G4)
    GB = G4.sum(axis=(0, 2))
    return ll, GW, GB, gf.reshape(n, p).sum(axis=0)


# functional aliases -------------------------------------------------------


def block_loglik(x, lik: Likelihood) -> float:
    return lik.evaluate(np.asarray(x, dtype=float), need_grad=False)[0]


def grad_loglik_natural(x, lik: Likelihood):
    return lik.evaluate(np.asarray(x, dtype=float))[1]
