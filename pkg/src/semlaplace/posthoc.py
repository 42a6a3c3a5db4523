"""Post-estimation: evidence, DIC, PPP, Bayesian fit indices, comparison,
factor scores / imputation and standardized solutions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import minimize
from scipy.stats import wishart

from .likelihood import _inv_i_minus_b, implied_moments

log = logging.getLogger(__name__)

__all__ = [
    "marginal_loglik",
    "deviance",
    "dic",
    "Saturated",
    "saturated_fit",
    "n_moments",
    "ppp_chisq",
    "FitMeasures",
    "bayes_fit_indices",
    "compare",
    "predict_scores",
    "standardized_solution",
    "standardized_draws",
]

LOG2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# evidence and deviance
# --------------------------------------------------------------------------


def marginal_loglik(objective_at_mode, L, kld_global=0.0):
    """L(theta*) + m/2 log 2 pi + sum log L_kk - KLD_global."""
    L = np.atleast_2d(L)
    m = L.shape[0]
    return float(objective_at_mode + 0.5 * m * LOG2PI + np.sum(np.log(np.diag(L))) - kld_global)


def deviance(lik, x):
    ll = lik.evaluate(np.asarray(x, dtype=float), need_grad=False)[0]
    return -2.0 * ll


def dic(lik, x_samp):
    """(DIC, p_D, mean deviance, per-draw deviances); point estimate = posterior mean of x."""
    devs = np.array([deviance(lik, x) for x in x_samp])
    dbar = float(np.mean(devs))
    dhat = deviance(lik, np.mean(x_samp, axis=0))
    pd_ = dbar - dhat
    return dbar + pd_, pd_, dbar, devs


# --------------------------------------------------------------------------
# saturated (unrestricted) model
# --------------------------------------------------------------------------


@dataclass
class Saturated:
    loglik: float
    moments: dict  # g -> (mu, Sigma) or (mu, Sigma_W, Sigma_B)


def _tril_pack(p):
    return np.tril_indices(p)


def _chol_from(v, p):
    L = np.zeros((p, p))
    L[np.tril_indices(p)] = v
    d = np.diag_indices(p)
    L[d] = np.exp(L[d])
    return L


def _chol_grad(G, L):
    # d/dv of ll where Sigma = L L', diagonal of L stored on the log scale
    dL = 2.0 * G @ L
    dL = np.tril(dL)
    d = np.diag_indices(L.shape[0])
    dL[d] *= L[d]
    return dL[np.tril_indices(L.shape[0])]


def _chol_init(S, p):
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    S = (V * np.maximum(w, 1e-3 * max(w.max(), 1e-6))) @ V.T
    L = np.linalg.cholesky(S)
    d = np.diag_indices(p)
    L[d] = np.log(L[d])
    return L[np.tril_indices(p)]


def saturated_fit(lik) -> Saturated:
    """Unrestricted-moment ML fit with the same data blocks (closed form when complete)."""
    table = lik.table
    total = 0.0
    moments = {}
    use_mean = table.meanstructure
    for g in sorted({b.group for b in lik.blocks}):
        blocks = lik.blocks_of(g)
        raw = lik.data.raw[g - 1]
        p = raw.shape[1]
        if lik.n_levels == 1:
            if len(blocks) == 1 and blocks[0].kind == "group":
                b = blocks[0]
                mu, S = b.ybar, b.S
                ll = lik.kernel_single(blocks, mu, S, False, use_mean)[0]
            else:
                mu0 = np.nanmean(raw, axis=0)
                S0 = pd.DataFrame(raw).cov(ddof=0).to_numpy()
                ntri = p * (p + 1) // 2

                def f(v):
                    mu = v[:p]
                    Lc = _chol_from(v[p:], p)
                    res = lik.kernel_single(blocks, mu, Lc @ Lc.T, True, use_mean)
                    if res is None:
                        return np.inf, np.zeros_like(v)
                    ll, G, gmu = res
                    return -ll, -np.concatenate([gmu, _chol_grad(G, Lc)])

                v0 = np.concatenate([mu0, _chol_init(S0, p)])
                r = minimize(f, v0, jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-8})
                mu = r.x[:p]
                Lc = _chol_from(r.x[p:], p)
                S = Lc @ Lc.T
                ll = -r.fun
            moments[g] = (mu, S)
        else:
            idx = lik.between_index(g)
            pb = idx.size
            cl = lik.data.clusters[g - 1]
            df = pd.DataFrame(raw)
            cm = df.groupby(cl).transform("mean")
            SW0 = (df - cm).cov(ddof=0).fillna(0).to_numpy()
            means = df.groupby(cl).mean()
            SB0 = means.cov(ddof=0).fillna(0).to_numpy()[np.ix_(idx, idx)]
            nbar = raw.shape[0] / max(len(means), 1)
            SB0 = SB0 - SW0[np.ix_(idx, idx)] / nbar
            mu0 = np.nanmean(raw, axis=0)
            nw, nb = p * (p + 1) // 2, pb * (pb + 1) // 2

            def f(v):
                mu = v[:p]
                LW = _chol_from(v[p : p + nw], p)
                LB = _chol_from(v[p + nw :], pb)
                SB = np.zeros((p, p))
                SB[np.ix_(idx, idx)] = LB @ LB.T
                res = lik.kernel_two(blocks, mu, LW @ LW.T, SB, True)
                if res is None:
                    return np.inf, np.zeros_like(v)
                ll, GW, GB, gmu = res
                return -ll, -np.concatenate([gmu, _chol_grad(GW, LW), _chol_grad(GB[np.ix_(idx, idx)], LB)])

            v0 = np.concatenate([mu0, _chol_init(SW0, p), _chol_init(SB0, pb)])
            r = minimize(f, v0, jac=True, method="L-BFGS-B", options={"maxiter": 10000, "gtol": 1e-8})
            mu = r.x[:p]
            LW = _chol_from(r.x[p : p + nw], p)
            LB = _chol_from(r.x[p + nw :], pb)
            SB = np.zeros((p, p))
            SB[np.ix_(idx, idx)] = LB @ LB.T
            ll = -r.fun
            moments[g] = (mu, LW @ LW.T, SB)
        total += ll
    return Saturated(total, moments)


def n_moments(lik):
    """p*: number of sample moments summed over groups and levels."""
    out = 0
    for g in sorted({b.group for b in lik.blocks}):
        p = lik.data.raw[g - 1].shape[1]
        out += p * (p + 1) // 2
        if lik.n_levels > 1:
            pb = lik.between_index(g).size
            out += pb * (pb + 1) // 2 + p
        elif lik.table.meanstructure:
            out += p
    return out


# --------------------------------------------------------------------------
# posterior predictive p-value
# --------------------------------------------------------------------------


def _fml(S, Sigma):
    p = S.shape[0]
    try:
        c = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        return np.inf
    ld = 2.0 * np.sum(np.log(np.diag(c)))
    sign, lds = np.linalg.slogdet(S)
    tr = np.trace(linalg.cho_solve((c, True), S))
    return ld + tr - lds - p


def ppp_chisq(lik, x_samp, saturated: Saturated, seed=0, mean_term=False):
    """Wishart-replicated covariance discrepancy PPP (one replicate per draw).

    The observed statistic is the saturated estimate rescaled to be unbiased,
    matching the expectation of the Wishart replicate.
    """
    rng = np.random.default_rng(seed)
    groups = sorted(saturated.moments)
    exceed = 0
    n_valid = 0
    for x in x_samp:
        mats = lik.table.matrices(x)
        d_obs = 0.0
        d_rep = 0.0
        ok = True
        for g in groups:
            raw = lik.data.raw[g - 1]
            n = raw.shape[0]
            mom = saturated.moments[g]
            gm = lik.group_moments(mats, g)
            if lik.n_levels == 1:
                mu_b, Sig = gm
                S_obs = mom[1] * n / (n - 1)
                parts = [(n - 1, S_obs, Sig)]
            else:
                mu_b, SW, SB = gm
                J = len(np.unique(lik.data.clusters[g - 1]))
                nbar = n / J
                parts = [
                    (n - J, mom[1], SW),
                    (J - 1, (mom[1] / nbar + mom[2]) * J / (J - 1), SW / nbar + SB),
                ]
            for df, S_obs, Sig in parts:
                try:
                    S_rep = wishart.rvs(df=df, scale=Sig / df, random_state=rng)
                except (ValueError, np.linalg.LinAlgError):
                    ok = False
                    break
                S_rep = np.atleast_2d(S_rep)
                d_obs += df * _fml(S_obs, Sig)
                d_rep += df * _fml(S_rep, Sig)
            if mean_term and ok:
                mu_obs = mom[0]
                Sig = parts[0][2] if lik.n_levels == 1 else parts[1][2]
                nn = n if lik.n_levels == 1 else parts[1][0] + 1
                Si = np.linalg.inv(Sig)
                ybar_rep = rng.multivariate_normal(mu_b, Sig / nn)
                d_obs += nn * (mu_obs - mu_b) @ Si @ (mu_obs - mu_b)
                d_rep += nn * (ybar_rep - mu_b) @ Si @ (ybar_rep - mu_b)
            if not ok:
                break
        if not ok or not np.isfinite(d_obs) or not np.isfinite(d_rep):
            continue
        n_valid += 1
        exceed += d_rep > d_obs
    return exceed / n_valid if n_valid else float("nan")


# --------------------------------------------------------------------------
# Bayesian fit indices
# --------------------------------------------------------------------------


@dataclass
class FitMeasures:
    marg_loglik: float
    dic: float
    p_d: float
    ppp: float
    brmsea: Optional[np.ndarray] = None
    bcfi: Optional[np.ndarray] = None
    btli: Optional[np.ndarray] = None
    bnfi: Optional[np.ndarray] = None

    def summary(self):
        out = {"marg_loglik": self.marg_loglik, "dic": self.dic, "p_d": self.p_d, "ppp": self.ppp}
        for k in ("brmsea", "bcfi", "btli", "bnfi"):
            v = getattr(self, k)
            if v is not None:
                out[k] = float(np.mean(v))
        return out


def bayes_fit_indices(dev_target, pd_target, dev_base, pd_base, d_sat, pstar, n):
    """Per-draw BRMSEA / BCFI / BTLI / BNFI from deviance chi-squares.

    chi2_adj = D(x_b) - D_sat - p_D and df_adj = p* - p_D for each model;
    baseline draws are paired with target draws by index.
    """
    chi = np.asarray(dev_target) - d_sat - pd_target
    df = pstar - pd_target
    out = {}
    if df > 0:
        out["brmsea"] = np.sqrt(np.maximum(chi - df, 0.0) / (df * n))
    else:
        out["brmsea"] = np.zeros_like(chi)
    if dev_base is not None:
        chi0 = np.asarray(dev_base)[: chi.size] - d_sat - pd_base
        df0 = pstar - pd_base
        with np.errstate(divide="ignore", invalid="ignore"):
            # unclamped, so a baseline compared with itself scores exactly 0
            out["bcfi"] = 1.0 - (chi - df) / (chi0 - df0)
            r0 = chi0 / df0
            out["btli"] = (r0 - chi / df) / (r0 - 1.0)
            out["bnfi"] = (chi0 - chi) / chi0
    return out


def compare(fits, names=None, measures=()):
    """Evidence table; logBF is relative to the highest marginal log-likelihood.

    Rows run from worst to best, as printed in the reference output. Incremental
    indices (BCFI, BTLI, BNFI) treat the first fit as the baseline model;
    BRMSEA is absolute.
    """
    names = list(names or [f"model{i + 1}" for i in range(len(fits))])
    measures = [m.lower() for m in measures]
    base = fits[0]
    rows = []
    for nm, f in zip(names, fits):
        r = {"model": nm, "npar": f.table.m, "marg_loglik": f.marg_loglik, "dic": f.dic, "p_d": f.p_d}
        if measures:
            idx = f.fit_index_draws(base.deviances, base.p_d)
            for mname in measures:
                v = idx.get(mname)
                r[mname] = float(np.mean(v)) if v is not None else np.nan
        rows.append(r)
    df = pd.DataFrame(rows)
    best = df["marg_loglik"].max()
    df["logBF"] = df["marg_loglik"] - best
    df = df.sort_values("marg_loglik", kind="stable").reset_index(drop=True)
    cols = ["model", "npar", "marg_loglik", "logBF", "dic", "p_d"] + measures
    return df[cols]


# --------------------------------------------------------------------------
# factor scores and imputation
# --------------------------------------------------------------------------


def _psd_sqrt(V):
    w, U = np.linalg.eigh(0.5 * (V + V.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


def _block_parts(mats):
    A = _inv_i_minus_b(mats.beta)
    psi_t = A @ mats.psi @ A.T
    eta_mean = A @ mats.alpha
    return A, psi_t, eta_mean


def _cond_draw(rng, mean, cov_sqrt):
    return mean + rng.standard_normal(mean.shape) @ cov_sqrt.T


def latent_conditional(mats, y, mu, sigma):
    """Conditional mean (rows) and covariance of eta given y for a single-level block."""
    A, psi_t, eta_mean = _block_parts(mats)
    C = psi_t @ mats.lambda_.T
    obs = ~np.isnan(y)
    pats, inv = np.unique(obs, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    q = psi_t.shape[0]
    means = np.empty((y.shape[0], q))
    covs = {}
    for k, pt in enumerate(pats):
        o = np.flatnonzero(pt)
        rows = inv == k
        if o.size == 0:
            means[rows] = eta_mean
            covs[k] = psi_t
            continue
        Soo = sigma[np.ix_(o, o)]
        K = linalg.solve(Soo, C[:, o].T, assume_a="pos").T
        means[rows] = eta_mean + (y[rows][:, o] - mu[o]) @ K.T
        covs[k] = psi_t - K @ C[:, o].T
    return means, covs, inv


def _cluster_dense(mats_w, mats_b, Yc, mu, SW, SB, idx, level):
    """Conditional moments for the latents of one cluster by dense joint-Gaussian conditioning."""
    n, p = Yc.shape
    big = np.kron(np.eye(n), SW) + np.kron(np.ones((n, n)), SB)
    y = Yc.ravel()
    obs = np.flatnonzero(~np.isnan(y))
    d = y[obs] - np.tile(mu, n)[obs]
    Soo = big[np.ix_(obs, obs)]
    if level == 2:
        _, psi_t, eta_mean = _block_parts(mats_b)
        Cb = psi_t @ mats_b.lambda_.T  # q_b x p_b
        Cfull = np.zeros((Cb.shape[0], p))
        Cfull[:, idx] = Cb
        C = np.tile(Cfull, (1, n))[:, obs]
        K = linalg.solve(Soo, C.T, assume_a="pos").T
        return eta_mean + K @ d, psi_t - K @ C.T
    _, psi_t, eta_mean = _block_parts(mats_w)
    Cw = psi_t @ mats_w.lambda_.T
    q = Cw.shape[0]
    means = np.empty((n, q))
    covs = []
    for i in range(n):
        C = np.zeros((q, n * p))
        C[:, i * p : (i + 1) * p] = Cw
        C = C[:, obs]
        K = linalg.solve(Soo, C.T, assume_a="pos").T
        means[i] = eta_mean + K @ d
        covs.append(psi_t - K @ C.T)
    return means, covs


def _impute_cluster(rng, Yc, mu, SW, SB):
    n, p = Yc.shape
    big = np.kron(np.eye(n), SW) + np.kron(np.ones((n, n)), SB)
    y = Yc.ravel().copy()
    miss = np.isnan(y)
    if not miss.any():
        return Yc.copy()
    o, mi = np.flatnonzero(~miss), np.flatnonzero(miss)
    mfull = np.tile(mu, n)
    Soo = big[np.ix_(o, o)]
    Smo = big[np.ix_(mi, o)]
    K = linalg.solve(Soo, Smo.T, assume_a="pos").T
    cm = mfull[mi] + K @ (y[o] - mfull[o])
    cv = big[np.ix_(mi, mi)] - K @ Smo.T
    y[mi] = _cond_draw(rng, cm, _psd_sqrt(cv))
    return y.reshape(n, p)


def predict_scores(fit, type="lv", level=1, nsamp=None, seed=None, group=1):
    """List of per-draw matrices for factor scores, predictions or imputations."""
    if type not in ("lv", "ov", "ypred", "ymis"):
        raise ValueError(f"unknown prediction type {type!r}")
    table, lik = fit.table, fit.lik
    if level == 2 and table.n_levels < 2:
        raise ValueError("level 2 scores requested for a single-level model")
    raw = fit.data.raw[group - 1]
    if type == "ymis" and not np.isnan(raw).any():
        log.warning("no missing values to impute")
        return []
    seed = fit.seed if seed is None else seed
    xs = fit.posterior_x(nsamp, seed)
    rng = np.random.default_rng([int(seed), 7919])
    kw = next(k for k, b in enumerate(table.blocks) if b.group == group and b.level == 1)
    out = []
    keep_w = _real_latents(table.blocks[kw])
    if table.n_levels == 1:
        use_mean = table.meanstructure
        ybar = np.nanmean(raw, axis=0)
        for x in xs:
            mats = table.matrices(x)[kw]
            im = implied_moments(mats)
            mu = im.mu if use_mean else ybar
            if type == "ymis":
                out.append(_impute_single(rng, raw, mu, im.sigma))
                continue
            means, covs, inv = latent_conditional(mats, raw, mu, im.sigma)
            eta = np.empty_like(means)
            for k, V in covs.items():
                rows = inv == k
                eta[rows] = _cond_draw(rng, means[rows], _psd_sqrt(V))
            if type == "lv":
                out.append(eta[:, keep_w])
                continue
            nu = mats.nu if use_mean else ybar - mats.lambda_ @ (_block_parts(mats)[2])
            yhat = nu + eta @ mats.lambda_.T
            if type == "ypred":
                yhat = yhat + rng.standard_normal(yhat.shape) @ _psd_sqrt(mats.theta).T
            out.append(yhat)
        return out
    # two-level
    kb = next(k for k, b in enumerate(table.blocks) if b.group == group and b.level == 2)
    cl = fit.data.clusters[group - 1]
    ids, inv = np.unique(cl, return_inverse=True)
    idx = lik.between_index(group)
    for x in xs:
        mats = table.matrices(x)
        mu, SW, SB = lik.group_moments(mats, group)
        if type == "ymis":
            Y = raw.copy()
            for k in range(len(ids)):
                rows = inv == k
                Y[rows] = _impute_cluster(rng, raw[rows], mu, SW, SB)
            out.append(Y)
            continue
        if level == 2:
            eta = []
            for k in range(len(ids)):
                m_, V = _cluster_dense(mats[kw], mats[kb], raw[inv == k], mu, SW, SB, idx, 2)
                eta.append(_cond_draw(rng, m_, _psd_sqrt(V)))
            eta = np.array(eta)
            if type == "lv":
                out.append(eta[:, _real_latents(table.blocks[kb])])
                continue
            mb = mats[kb]
            yhat = mb.nu + eta @ mb.lambda_.T
            if type == "ypred":
                yhat = yhat + rng.standard_normal(yhat.shape) @ _psd_sqrt(mb.theta).T
            out.append(yhat)
            continue
        eta = np.empty((raw.shape[0], table.blocks[kw].q))
        for k in range(len(ids)):
            rows = np.flatnonzero(inv == k)
            means, covs = _cluster_dense(mats[kw], mats[kb], raw[rows], mu, SW, SB, idx, 1)
            for i, r in enumerate(rows):
                eta[r] = _cond_draw(rng, means[i], _psd_sqrt(covs[i]))
        if type == "lv":
            out.append(eta[:, keep_w])
            continue
        mw = mats[kw]
        yhat = mw.nu + eta @ mw.lambda_.T
        if type == "ypred":
            yhat = yhat + rng.standard_normal(yhat.shape) @ _psd_sqrt(mw.theta).T
        out.append(yhat)
    return out


def _real_latents(block):
    # phantom latents stand in for observed covariates and are not scored
    return [i for i, v in enumerate(block.lv) if v not in block.phantoms]


def _impute_single(rng, raw, mu, sigma):
    Y = raw.copy()
    miss = np.isnan(raw)
    pats, inv = np.unique(miss, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    for k, pt in enumerate(pats):
        if not pt.any():
            continue
        rows = inv == k
        mi, o = np.flatnonzero(pt), np.flatnonzero(~pt)
        if o.size:
            K = linalg.solve(sigma[np.ix_(o, o)], sigma[np.ix_(mi, o)].T, assume_a="pos").T
            cm = mu[mi] + (raw[rows][:, o] - mu[o]) @ K.T
            cv = sigma[np.ix_(mi, mi)] - K @ sigma[np.ix_(mi, o)].T
        else:
            cm = np.tile(mu[mi], (rows.sum(), 1))
            cv = sigma[np.ix_(mi, mi)]
        Y[np.ix_(np.flatnonzero(rows), mi)] = _cond_draw(rng, cm, _psd_sqrt(cv))
    return Y


# --------------------------------------------------------------------------
# standardized solution
# --------------------------------------------------------------------------


def _std_values(table, x):
    """std.all value for every non-defined row at natural vector x."""
    mats = table.matrices(x)
    parts = []
    for k, b in enumerate(table.blocks):
        mt = mats[k]
        A, psi_t, eta_mean = _block_parts(mt)
        im = implied_moments(mt)
        sd_ov = np.sqrt(np.clip(np.diag(im.sigma), 1e-300, None))
        sd_lv = np.sqrt(np.clip(np.diag(psi_t), 1e-300, None))
        parts.append((mt, sd_ov, sd_lv))
    out = []
    for r in table.rows:
        if r.mat == "defined":
            continue
        v = x[r.full_index] if r.full_index >= 0 else r.fixed_value
        mt, sd_ov, sd_lv = parts[r.block]
        M = r.matrix
        i, j = r.mi, r.mj
        if M == "lambda":
            out.append(v * sd_lv[j] / sd_ov[i])
        elif M == "beta":
            out.append(v * sd_lv[j] / sd_lv[i])
        elif M in ("theta", "psi"):
            D = mt.theta if M == "theta" else mt.psi
            if i == j:
                tot = sd_ov[i] ** 2 if M == "theta" else sd_lv[i] ** 2
                out.append(v / tot)
            else:
                den = math.sqrt(max(D[i, i] * D[j, j], 1e-300))
                out.append(v / den)
        elif M == "nu":
            out.append(v / sd_ov[i])
        elif M == "alpha":
            out.append(v / sd_lv[i])
        else:
            out.append(v)
    return np.array(out, dtype=float)


def standardized_draws(table, x_samp):
    return np.array([_std_values(table, x) for x in x_samp])


def standardized_solution(table, x_samp):
    draws = standardized_draws(table, x_samp)
    rows = [r for r in table.rows if r.mat != "defined"]
    recs = []
    for k, r in enumerate(rows):
        v = draws[:, k]
        recs.append(
            {
                "lhs": r.lhs,
                "op": r.op,
                "rhs": r.rhs,
                "group": r.group,
                "level": r.level,
                "label": r.label or "",
                "est.std": float(np.mean(v)),
                "se": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
                "ci.lower": float(np.quantile(v, 0.025)),
                "ci.upper": float(np.quantile(v, 0.975)),
            }
        )
    return pd.DataFrame(recs)
