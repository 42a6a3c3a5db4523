"""End-to-end pipeline: mode, Hessian, VB shift, marginals, copula, sampling, post-hoc."""

from __future__ import annotations

import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from . import posthoc
from .copula import CopulaModel, defined_samples, sample_summary, sample_theta, x_samples, build_copula
from .laplace import (
    Posterior,
    VBResult,
    covariance_from_precision,
    default_qmc_points,
    find_mode,
    hess_condition,
    hessian_at_mode,
    vb_shift,
)
from .likelihood import Likelihood, prepare_data, sample_start_stats
from .marginals import METHODS, marginal_to_natural, profile_all
from .partable import TRANSFORMS, build_parameter_table
from .syntax import parse_model

log = logging.getLogger(__name__)

__all__ = ["FitConfig", "Fit", "fit_model", "build_model", "DIAGNOSTIC_KEYS"]

DIAGNOSTIC_KEYS = (
    "npar",
    "nsamp",
    "converged",
    "iterations",
    "grad_inf",
    "grad_inf_rel",
    "grad_l2",
    "hess_cond",
    "vb_applied",
    "vb_kld_global",
    "kld_max",
    "kld_mean",
    "nmad_max",
    "nmad_mean",
)

PROBS = (0.025, 0.975)


@dataclass
class FitConfig:
    group: Optional[str] = None
    cluster: Optional[str] = None
    missing: str = "listwise"
    std_lv: bool = False
    meanstructure: bool = False
    orthogonal: bool = False
    group_equal: tuple = ()
    priors: Optional[dict] = None
    seed: int = 0
    vb: bool = True
    optimizer_iter_max: int = 1000
    optimizer_eval_max: int = 2000
    qmc_points: Optional[int] = None
    marginal_correction: str = "shortcut"
    ngrid: int = 21
    cores: int = 1
    nsamp: int = 1000
    sn_fit_sample: bool = False
    spearman: bool = False
    fit_indices: bool = True
    ppp_mean: bool = False

    def to_dict(self):
        d = dict(self.__dict__)
        d["group_equal"] = list(self.group_equal)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["group_equal"] = tuple(d.get("group_equal") or ())
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class _Stages:
    """Console reporter for the six pipeline stages."""

    def __init__(self, verbose, stream=None):
        self.verbose = verbose
        self.stream = stream or sys.stderr
        self.timings = {}

    @contextmanager
    def stage(self, key, message):
        t0 = time.perf_counter()
        box = {"msg": message}
        yield box
        dt = time.perf_counter() - t0
        self.timings[key] = dt
        if self.verbose:
            print(f"✔ {box['msg']} [{dt * 1000:.0f}ms]", file=self.stream, flush=True)


# --------------------------------------------------------------------------
# model construction
# --------------------------------------------------------------------------


def build_model(model: str, frame: pd.DataFrame, cfg: FitConfig):
    """Parse, compile and attach data. Returns (table, data, likelihood)."""
    ast = parse_model(model)
    meanstructure = cfg.meanstructure or cfg.missing == "ml"
    group_labels = None
    n_groups = 1
    if cfg.group is not None:
        if cfg.group not in frame.columns:
            from .partable import UnknownVariable

            raise UnknownVariable(f"unknown variable {cfg.group!r}: group column not in data")
        group_labels = list(pd.unique(frame[cfg.group]))
        n_groups = len(group_labels)
    if cfg.cluster is not None and cfg.cluster not in frame.columns:
        from .partable import UnknownVariable

        raise UnknownVariable(f"unknown variable {cfg.cluster!r}: cluster column not in data")
    names = set()
    for s in ast:
        for t in getattr(s, "rhs", []) or []:
            v = getattr(t, "variable", None)
            if v:
                names.add(v)
        for v in getattr(s, "lhs", []) or []:
            names.add(v)
    stats = sample_start_stats(frame, [c for c in frame.columns if c in names], cfg.group, cfg.cluster, group_labels)
    columns = [c for c in frame.columns if c not in (cfg.group, cfg.cluster)]
    table = build_parameter_table(
        ast,
        columns,
        std_lv=cfg.std_lv,
        meanstructure=meanstructure,
        orthogonal=cfg.orthogonal,
        n_groups=n_groups,
        group_equal=cfg.group_equal,
        priors=cfg.priors,
        sample_stats=stats,
    )
    if cfg.cluster is not None and table.n_levels < 2:
        raise ValueError("a cluster column needs level: blocks in the model")
    data = prepare_data(frame, table, cfg.group, cfg.cluster, cfg.missing, group_labels)
    return table, data, Likelihood(table, data)


def independence_model(table) -> str:
    """Free variances (and means when modelled) for every observed variable."""
    lines = []
    for lvl in range(1, table.n_levels + 1):
        blk = next(b for b in table.blocks if b.level == lvl and b.group == 1)
        if table.n_levels > 1:
            lines.append(f"level: {lvl}")
        lines.extend(f"{v} ~~ {v}" for v in blk.ov)
    return "\n".join(lines)


# --------------------------------------------------------------------------
# fit object
# --------------------------------------------------------------------------


@dataclass
class Fit:
    model: str
    config: FitConfig
    frame: pd.DataFrame
    table: object
    data: object
    lik: object
    theta_star: np.ndarray
    H: np.ndarray
    omega: np.ndarray
    L: np.ndarray
    objective_at_mode: float
    iterations: int
    converged: bool
    grad_at_mode: np.ndarray
    vb: VBResult
    marginals: list
    R_star: np.ndarray
    n_clamped: int
    x_samp: np.ndarray
    diagnostics: dict
    measures: dict
    deviances: np.ndarray
    baseline: Optional[dict] = None
    profiles: Optional[list] = None
    timings: dict = field(default_factory=dict)
    created: str = ""
    _summary: Optional[pd.DataFrame] = None
    _copula: Optional[CopulaModel] = None

    # -- basic quantities --------------------------------------------------

    @property
    def seed(self):
        return self.config.seed

    @property
    def nsamp(self):
        return self.x_samp.shape[0]

    @property
    def center(self):
        return self.theta_star + self.vb.delta

    @property
    def sd(self):
        return np.sqrt(np.diag(self.omega))

    @property
    def marg_loglik(self):
        return self.measures["marg_loglik"]

    @property
    def dic(self):
        return self.measures["dic"]

    @property
    def p_d(self):
        return self.measures["p_d"]

    @property
    def ppp(self):
        return self.measures["ppp"]

    @property
    def copula(self):
        if self._copula is None:
            R = self.omega / np.outer(self.sd, self.sd)
            np.fill_diagonal(R, 1.0)
            self._copula = CopulaModel(self.center, self.sd, self.marginals, R, self.R_star, None, self.n_clamped)
        return self._copula

    def sample_theta(self, nsamp=None, seed=None):
        return sample_theta(self.copula, nsamp or self.nsamp, self.seed if seed is None else seed)

    def posterior_x(self, nsamp=None, seed=None):
        """Natural-scale posterior draws; the stored sample when the request matches it."""
        if (nsamp is None or nsamp == self.nsamp) and (seed is None or seed == self.seed):
            return self.x_samp
        return x_samples(self.table, self.sample_theta(nsamp, seed))

    def sample(self, nsamp=None, seed=None, type="lavaan"):
        """DataFrame of draws: natural free parameters ('lavaan') or the theta scale."""
        if type == "theta":
            return pd.DataFrame(self.sample_theta(nsamp, seed), columns=self.table.names)
        return pd.DataFrame(self.posterior_x(nsamp, seed), columns=self.table.full_names)

    # -- post-hoc ----------------------------------------------------------

    def fit_indices(self, baseline_devs=None, baseline_pd=None):
        """Posterior means of BRMSEA/BCFI/BTLI/BNFI (baseline: independence model by default)."""
        v = self.fit_index_draws(baseline_devs, baseline_pd)
        return {k: float(np.mean(a)) for k, a in v.items()}

    def fit_index_draws(self, baseline_devs=None, baseline_pd=None):
        if baseline_devs is None and self.baseline is not None:
            baseline_devs = self.baseline["deviances"]
            baseline_pd = self.baseline["p_d"]
        m = self.measures
        return posthoc.bayes_fit_indices(
            self.deviances, m["p_d"], baseline_devs, baseline_pd, m["d_sat"], m["pstar"], m["n"]
        )

    def predict(self, type="lv", level=1, nsamp=None, seed=None, group=1):
        return posthoc.predict_scores(self, type=type, level=level, nsamp=nsamp, seed=seed, group=group)

    def standardized_solution(self):
        return posthoc.standardized_solution(self.table, self.x_samp)

    def vcov(self, type="lavaan"):
        from .copula import posterior_vcov

        return posterior_vcov(self.x_samp, self.omega, type)

    # -- summaries ---------------------------------------------------------

    def summary_frame(self):
        if self._summary is None:
            self._summary = _summarise(self)
        return self._summary

    def summary_text(self):
        from .report import summary_text

        return summary_text(self)


def _prior_string(r):
    p = r.prior
    if p is None:
        return ""
    return str(p)


def _summarise(fit: Fit) -> pd.DataFrame:
    table = fit.table
    center, sd = fit.center, fit.sd
    x = fit.x_samp
    sn_fit = fit.config.sn_fit_sample
    kld = fit.vb.kld
    recs = []
    cache = {}
    for r in table.rows:
        if r.mat == "defined":
            continue
        rec = {
            "lhs": r.lhs,
            "op": r.op,
            "rhs": r.rhs,
            "group": r.group,
            "level": r.level,
            "label": r.label or "",
            "free": r.free,
            "est": np.nan,
            "sd": np.nan,
            "q025": np.nan,
            "q975": np.nan,
            "nmad": np.nan,
            "kld": np.nan,
            "prior": "",
        }
        if r.full_index < 0:
            rec["est"] = float(r.fixed_value)
            recs.append(rec)
            continue
        j = r.free - 1
        rec["nmad"] = float(fit.marginals[j].nmad)
        rec["kld"] = float(kld[j])
        rec["prior"] = _prior_string(r)
        if r.transform in ("identity", "log"):
            if j not in cache:
                cache[j] = marginal_to_natural(fit.marginals[j], center[j], sd[j], TRANSFORMS[r.transform].g_inv, PROBS)
            res = cache[j]
        else:
            res = sample_summary(x[:, r.full_index], sn_fit)
            res["quantiles"] = np.asarray(res["quantiles"])[[0, 2]]
        rec["est"] = res["mean"]
        rec["sd"] = res["sd"]
        rec["q025"], rec["q975"] = (float(v) for v in res["quantiles"])
        recs.append(rec)
    if table.defined:
        ds = defined_samples(table, x)
        for r in table.defined:
            v = ds[r.lhs]
            res = sample_summary(v, sn_fit)
            q = np.asarray(res["quantiles"])
            rec = {
                "lhs": r.lhs,
                "op": ":=",
                "rhs": str(r.expression),
                "group": r.group,
                "level": r.level,
                "label": r.lhs,
                "free": 0,
                "est": res["mean"],
                "sd": res["sd"],
                "q025": float(q[0]),
                "q975": float(q[-1]),
                "nmad": np.nan,
                "kld": np.nan,
                "prior": "",
            }
            if "sn" in res:
                rec["sn_alpha"] = float(res["sn"][2])
            recs.append(rec)
    return pd.DataFrame(recs)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def fit_model(model: str, frame: pd.DataFrame, config: Optional[FitConfig] = None, verbose=False, stream=None,
              keep_profiles=False, **options) -> Fit:
    """Run the full approximation pipeline on a model string and a DataFrame."""
    cfg = config or FitConfig()
    if options:
        cfg = FitConfig.from_dict({**cfg.to_dict(), **options})
    if cfg.marginal_correction not in METHODS:
        raise ValueError(f"marginal_correction must be one of {sorted(METHODS)}")
    table, data, lik = build_model(model, frame, cfg)
    post = Posterior(table, lik)
    st = _Stages(verbose, stream)
    executor = ThreadPoolExecutor(cfg.cores) if cfg.cores and cfg.cores > 1 else None
    try:
        with st.stage("mode", "Finding posterior mode."):
            opt = find_mode(post, table.theta_start, iter_max=cfg.optimizer_iter_max, eval_max=cfg.optimizer_eval_max)
        theta_star = opt.x
        with st.stage("hessian", "Computing the Hessian."):
            H = hessian_at_mode(post.grad, theta_star)
            omega, L = covariance_from_precision(H)
        m = table.m
        with st.stage("vb", "VB correction") as box:
            if cfg.vb:
                vb = vb_shift(post, theta_star, L, cfg.qmc_points or default_qmc_points(m), seed=cfg.seed,
                              executor=executor, f_star=opt.fun)
            else:
                vb = VBResult(np.zeros(m), np.zeros(m), False, 0.0, np.zeros(m), opt.fun, opt.fun)
            shift = float(np.mean(np.abs(vb.delta) / np.sqrt(np.diag(omega)))) if m else 0.0
            box["msg"] = f"VB correction; mean |δ| = {shift:.3f}σ."
        center = theta_star + vb.delta
        with st.stage("marginals", "Fitting skew-normal marginals.") as box:
            mr = profile_all(post, post.grad, theta_star, center, omega, L, H, cfg.marginal_correction,
                             cfg.ngrid, executor)
            ok = sum(not s.fallback for s in mr.marginals)
            box["msg"] = f"Fitting {ok}/{m} skew-normal marginals."
        with st.stage("norta", "Adjusting copula correlations (NORTA)."):
            cop = build_copula(center, omega, mr.marginals, spearman=cfg.spearman)
        with st.stage("sampling", "Posterior sampling and summarising."):
            x_samp = x_samples(table, sample_theta(cop, cfg.nsamp, cfg.seed))
            measures, devs = _measures(lik, opt.fun, L, vb.kld_global, x_samp, cfg)
            baseline = None
            if cfg.fit_indices:
                baseline = _baseline(table, frame, cfg)
    finally:
        if executor is not None:
            executor.shutdown()
    g = opt.grad
    nm = np.array([s.nmad for s in mr.marginals]) if m else np.zeros(1)
    diag = {
        "npar": m,
        "nsamp": cfg.nsamp,
        "converged": int(opt.converged),
        "iterations": int(opt.iterations),
        "grad_inf": float(np.max(np.abs(g))) if m else 0.0,
        "grad_inf_rel": float(np.max(np.abs(g)) / max(1.0, abs(opt.fun))) if m else 0.0,
        "grad_l2": float(np.linalg.norm(g)),
        "hess_cond": hess_condition(H) if m else 1.0,
        "vb_applied": int(vb.applied),
        "vb_kld_global": float(vb.kld_global),
        "kld_max": float(np.max(vb.kld)) if m else 0.0,
        "kld_mean": float(np.mean(vb.kld)) if m else 0.0,
        "nmad_max": float(nm.max()),
        "nmad_mean": float(nm.mean()),
    }
    return Fit(
        model=model,
        config=cfg,
        frame=frame,
        table=table,
        data=data,
        lik=lik,
        theta_star=theta_star,
        H=H,
        omega=omega,
        L=L,
        objective_at_mode=float(opt.fun),
        iterations=int(opt.iterations),
        converged=bool(opt.converged),
        grad_at_mode=np.asarray(g, dtype=float),
        vb=vb,
        marginals=mr.marginals,
        R_star=cop.R_star,
        n_clamped=cop.n_clamped,
        x_samp=x_samp,
        diagnostics=diag,
        measures=measures,
        deviances=devs,
        baseline=baseline,
        profiles=mr.profiles if keep_profiles else None,
        timings=st.timings,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


def _measures(lik, f_star, L, kld_global, x_samp, cfg):
    ml = posthoc.marginal_loglik(f_star, L, kld_global) if L.size else float(f_star)
    dic, p_d, dbar, devs = posthoc.dic(lik, x_samp)
    sat = posthoc.saturated_fit(lik)
    ppp = posthoc.ppp_chisq(lik, x_samp, sat, seed=[int(cfg.seed), 2], mean_term=cfg.ppp_mean)
    out = {
        "marg_loglik": float(ml),
        "dic": float(dic),
        "p_d": float(p_d),
        "dbar": float(dbar),
        "ppp": float(ppp),
        "d_sat": float(-2.0 * sat.loglik),
        "pstar": int(posthoc.n_moments(lik)),
        "n": int(lik.data.n_obs),
    }
    return out, devs


def _baseline(table, frame, cfg):
    bcfg = FitConfig.from_dict({**cfg.to_dict(), "fit_indices": False, "group_equal": (), "std_lv": False,
                                "vb": cfg.vb})
    try:
        b = fit_model(independence_model(table), frame, bcfg)
    except Exception as exc:  # baseline failure only disables the incremental indices
        log.warning("baseline model could not be fitted: %s", exc)
        return None
    return {"deviances": b.deviances, "p_d": b.p_d, "marg_loglik": b.marg_loglik}
