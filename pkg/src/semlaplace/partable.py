"""Parameter table: matrix roles, priors, transforms, starts and equality constraints.

The compiled table maps an unconstrained reduced vector ``theta`` (length m)
to the natural vector ``x`` (one entry per free row, length m_full) and on to
the model matrices of each block. Variances are carried as log(variance);
covariances are carried through the separation ``sigma_a * sigma_b * rho`` with
``rho = tanh(theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse, special, stats

from .syntax import Expr, ModelStatement, PriorSpec, Term, parse_prior_string

__all__ = [
    "PartableError",
    "UnknownVariable",
    "InadmissibleValue",
    "ConstraintConflict",
    "Unidentified",
    "TransformTriple",
    "TRANSFORMS",
    "ParamRow",
    "BlockSpec",
    "ModelMatrices",
    "ParameterTable",
    "build_parameter_table",
    "DEFAULT_PRIORS",
]


class PartableError(ValueError):
    pass


class UnknownVariable(PartableError):
    pass


class InadmissibleValue(PartableError):
    pass


class ConstraintConflict(PartableError):
    pass


class Unidentified(PartableError):
    pass


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformTriple:
    name: str
    g: Callable
    g_inv: Callable
    g_inv_prime: Callable
    g_inv_prime2: Callable


def _tanh_p(t):
    return 1.0 - np.tanh(t) ** 2


def _tanh_pp(t):
    th = np.tanh(t)
    return -2.0 * th * (1.0 - th**2)


TRANSFORMS = {
    "identity": TransformTriple(
        "identity",
        lambda x: x,
        lambda t: t,
        lambda t: np.ones_like(np.asarray(t, dtype=float)),
        lambda t: np.zeros_like(np.asarray(t, dtype=float)),
    ),
    "log": TransformTriple("log", np.log, np.exp, np.exp, np.exp),
    "atanh": TransformTriple("atanh", np.arctanh, np.tanh, _tanh_p, _tanh_pp),
}

_ROLE_TRANSFORM = {
    "lambda": "identity",
    "beta": "identity",
    "nu": "identity",
    "alpha": "identity",
    "theta_var": "log",
    "psi_var": "log",
    "theta_cor": "atanh",
    "psi_cor": "atanh",
}

DEFAULT_PRIORS = {
    "lambda": "normal(0,10)",
    "beta": "normal(0,10)",
    "nu": "normal(0,10)",
    "alpha": "normal(0,10)",
    "theta_var": "gamma(1,.5)[sd]",
    "psi_var": "gamma(1,.5)[sd]",
    "theta_cor": "beta(1,1)",
    "psi_cor": "beta(1,1)",
}

_PRIOR_ALIASES = {
    "theta": ("theta_var",),
    "psi": ("psi_var",),
    "rho": ("theta_cor", "psi_cor"),
    "cor": ("theta_cor", "psi_cor"),
    "var": ("theta_var", "psi_var"),
}

# prior target scale allowed per transform
_ALLOWED_TARGET = {
    "identity": {"coefficient"},
    "log": {"sd", "var"},
    "atanh": {"cor"},
}
_ALLOWED_FAMILY = {
    "coefficient": {"normal"},
    "sd": {"gamma"},
    "var": {"gamma"},
    "cor": {"beta"},
}


# --------------------------------------------------------------------------
# prior densities in theta space
# --------------------------------------------------------------------------

_FAM_CODE = {"normal": 0, "gamma": 1, "beta": 2}
_TGT_CODE = {"coefficient": 0, "var": 1, "sd": 2, "cor": 3}


def _prior_q(theta, tgt):
    """Map theta to the prior's target scale; return (q, dq/dtheta, log|dq/dtheta|, d log|dq| / dtheta)."""
    q = np.empty_like(theta)
    dq = np.empty_like(theta)
    lj = np.zeros_like(theta)
    dlj = np.zeros_like(theta)
    m = tgt == 0
    q[m], dq[m] = theta[m], 1.0
    m = tgt == 1
    q[m] = np.exp(theta[m])
    dq[m] = q[m]
    lj[m], dlj[m] = theta[m], 1.0
    m = tgt == 2
    q[m] = np.exp(theta[m] / 2)
    dq[m] = q[m] / 2
    lj[m], dlj[m] = theta[m] / 2 - math.log(2.0), 0.5
    m = tgt == 3
    t = theta[m]
    # log r and log(1 - r) with r = (1 + tanh t) / 2, stable for large |t|
    lr, l1r = -np.logaddexp(0.0, -2.0 * t), -np.logaddexp(0.0, 2.0 * t)
    q[m] = np.tanh(t)
    dq[m] = 4.0 * np.exp(lr + l1r)
    lj[m] = math.log(4.0) + lr + l1r
    dlj[m] = -2.0 * q[m]
    return q, dq, lj, dlj


def _log_r(theta):
    return -np.logaddexp(0.0, -2.0 * theta), -np.logaddexp(0.0, 2.0 * theta)


def _prior_logpdf(q, fam, p1, p2, theta=None):
    out = np.empty_like(q)
    dout = np.empty_like(q)
    m = fam == 0
    z = (q[m] - p1[m]) / p2[m]
    out[m] = -0.5 * np.log(2 * np.pi * p2[m] ** 2) - 0.5 * z**2
    dout[m] = -z / p2[m]
    m = fam == 1
    a, b, qq = p1[m], p2[m], q[m]
    out[m] = a * np.log(b) - special.gammaln(a) + (a - 1) * np.log(qq) - b * qq
    dout[m] = (a - 1) / qq - b
    m = fam == 2
    a, b = p1[m], p2[m]
    if theta is not None:
        lr, l1r = _log_r(theta[m])
    else:
        lr, l1r = np.log((1 + q[m]) / 2), np.log1p(-(1 + q[m]) / 2)
    out[m] = (a - 1) * lr + (b - 1) * l1r - special.betaln(a, b) - math.log(2.0)
    dout[m] = 0.5 * ((a - 1) / np.exp(lr) - (b - 1) / np.exp(l1r))
    return out, dout


def prior_logdensity_theta(theta, prior: PriorSpec):
    """Log prior density of a single unconstrained value (vectorised over theta)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n = theta.size
    fam = np.full(n, _FAM_CODE[prior.family])
    tgt = np.full(n, _TGT_CODE[prior.target_scale])
    q, dq, lj, _ = _prior_q(theta, tgt)
    lp, _ = _prior_logpdf(q, fam, np.full(n, prior.params[0]), np.full(n, prior.params[1]), theta)
    return lp + lj


# --------------------------------------------------------------------------
# table rows and blocks
# --------------------------------------------------------------------------


@dataclass
class ParamRow:
    id: int
    lhs: str
    op: str
    rhs: str
    block: int
    group: int
    level: int
    mat: str
    free: int = 0  # 1-based reduced index, 0 = fixed
    fixed_value: Optional[float] = None
    prior: Optional[PriorSpec] = None
    label: Optional[str] = None
    start_natural: float = 0.0
    start_unconstrained: float = 0.0
    user: bool = True
    matrix: str = ""
    mi: int = 0
    mj: int = 0
    full_index: int = -1  # position in x (free rows only)
    expression: Optional[Expr] = None
    user_start: Optional[float] = None
    user_free: bool = False
    eq_key: Optional[str] = None

    @property
    def name(self):
        op = "~1" if self.op == "~1" else self.op
        base = f"{self.lhs}{op}{self.rhs}" if op != "~1" else f"{self.lhs}~1"
        if self.group > 1:
            base += f".g{self.group}"
        if self.level > 1:
            base += f".l{self.level}"
        return base

    @property
    def transform(self):
        return _ROLE_TRANSFORM.get(self.mat)

    def to_dict(self):
        return {
            "id": self.id,
            "lhs": self.lhs,
            "op": self.op,
            "rhs": self.rhs,
            "block": self.block,
            "group": self.group,
            "level": self.level,
            "free": self.free,
            "mat": self.mat,
            "label": self.label or "",
            "fixed_value": self.fixed_value,
            "prior": None if self.prior is None else str(self.prior),
            "transform": self.transform,
            "start": self.start_natural,
            "parstart": self.start_unconstrained,
            "user": int(self.user),
            "names": self.name,
            "expression": None if self.expression is None else str(self.expression),
        }


@dataclass
class BlockSpec:
    """Variables and constant matrix skeletons for one (group, level) block."""

    index: int
    group: int
    level: int
    ov: list
    lv: list
    phantoms: list
    base: dict = field(default_factory=dict)
    fills: dict = field(default_factory=dict)  # matrix -> (full_idx, i, j, symmetric)

    @property
    def p(self):
        return len(self.ov)

    @property
    def q(self):
        return len(self.lv)


@dataclass
class ModelMatrices:
    nu: np.ndarray
    lambda_: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    def as_dict(self):
        return {
            "nu": self.nu,
            "lambda": self.lambda_,
            "beta": self.beta,
            "alpha": self.alpha,
            "theta": self.theta,
            "psi": self.psi,
        }


_MATRIX_NAMES = ("nu", "lambda", "beta", "alpha", "theta", "psi")


class ParameterTable:
    """Compiled, immutable parameter table."""

    def __init__(self, rows, blocks, options, defined, n_moments):
        self.rows = rows
        self.blocks = blocks
        self.options = options
        self.defined = defined
        self.n_moments = n_moments
        free_rows = [r for r in rows if r.full_index >= 0]
        free_rows.sort(key=lambda r: r.full_index)
        self.free_rows = free_rows
        self.m_full = len(free_rows)
        self.m = max((r.free for r in rows), default=0)
        self.kidx = np.array([r.free - 1 for r in free_rows], dtype=int)
        # representative row per reduced index
        rep = {}
        for r in free_rows:
            rep.setdefault(r.free - 1, r)
        self.rep_rows = [rep[k] for k in range(self.m)]
        self.names = [r.name for r in self.rep_rows]
        self.full_names = [r.name for r in free_rows]

        mats = [r.mat for r in free_rows]
        self._id = np.array([m in ("lambda", "beta", "nu", "alpha") for m in mats])
        self._log = np.array([m.endswith("_var") for m in mats])
        self._cor = np.array([m.endswith("_cor") for m in mats])
        self._cor_idx = np.flatnonzero(self._cor)
        # variance sources for covariance rows: index into concat(x, fixed_pool)
        pool = []
        va, vb = [], []
        var_rows = {}
        for r in rows:
            if r.mat.endswith("_var"):
                var_rows[(r.block, r.matrix, r.mi)] = r
        for k in self._cor_idx:
            r = free_rows[k]
            srcs = []
            for ii in (r.mi, r.mj):
                vr = var_rows[(r.block, r.matrix, ii)]
                if vr.full_index >= 0:
                    srcs.append(vr.full_index)
                else:
                    pool.append(vr.fixed_value)
                    srcs.append(self.m_full + len(pool) - 1)
            va.append(srcs[0])
            vb.append(srcs[1])
        self._va = np.array(va, dtype=int)
        self._vb = np.array(vb, dtype=int)
        self._pool = np.array(pool, dtype=float)

        # priors per reduced index
        fam, tgt, p1, p2 = [], [], [], []
        for r in self.rep_rows:
            fam.append(_FAM_CODE[r.prior.family])
            tgt.append(_TGT_CODE[r.prior.target_scale])
            p1.append(r.prior.params[0])
            p2.append(r.prior.params[1])
        self._pfam = np.array(fam, dtype=int)
        self._ptgt = np.array(tgt, dtype=int)
        self._pp1 = np.array(p1, dtype=float)
        self._pp2 = np.array(p2, dtype=float)

        self.theta_start = np.array([r.start_unconstrained for r in self.rep_rows])
        self.x_start = self.pars_to_x(self.theta_start)

    # ---- sizes ---------------------------------------------------------

    @property
    def K(self):
        """Equality projection as a sparse {0,1} matrix (m_full x m)."""
        return sparse.csr_matrix(
            (np.ones(self.m_full), (np.arange(self.m_full), self.kidx)), shape=(self.m_full, self.m)
        )

    @property
    def n_groups(self):
        return max(b.group for b in self.blocks)

    @property
    def n_levels(self):
        return max(b.level for b in self.blocks)

    @property
    def meanstructure(self):
        return bool(self.options.get("meanstructure"))

    # ---- maps ----------------------------------------------------------

    def pars_to_x(self, theta):
        theta = np.asarray(theta, dtype=float)
        tf = theta[self.kidx]
        x = np.empty(self.m_full)
        x[self._id] = tf[self._id]
        with np.errstate(over="ignore"):  # inf variances are rejected downstream
            x[self._log] = np.exp(tf[self._log])
        if self._cor_idx.size:
            vals = np.concatenate([x, self._pool])
            rho = np.tanh(tf[self._cor_idx])
            x[self._cor_idx] = np.sqrt(vals[self._va] * vals[self._vb]) * rho
        return x

    def x_to_pars(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.m_full,):
            raise ValueError(f"x has shape {x.shape}, expected ({self.m_full},)")
        tf = np.empty(self.m_full)
        tf[self._id] = x[self._id]
        v = x[self._log]
        if np.any(~(v > 0)):
            raise InadmissibleValue("non-positive variance")
        tf[self._log] = np.log(v)
        if self._cor_idx.size:
            vals = np.concatenate([x, self._pool])
            rho = x[self._cor_idx] / np.sqrt(vals[self._va] * vals[self._vb])
            if np.any(~(np.abs(rho) < 1)):
                raise InadmissibleValue("implied correlation outside (-1, 1)")
            tf[self._cor_idx] = np.arctanh(rho)
        theta = np.empty(self.m)
        theta[self.kidx[::-1]] = tf[::-1]  # first row of each group wins
        return theta

    def _dx_parts(self, theta):
        tf = np.asarray(theta, dtype=float)[self.kidx]
        x = self.pars_to_x(theta)
        d = np.ones(self.m_full)
        d[self._log] = x[self._log]
        rows, cols, vals = [], [], []
        if self._cor_idx.size:
            allv = np.concatenate([x, self._pool])
            sab = np.sqrt(allv[self._va] * allv[self._vb])
            rho = np.tanh(tf[self._cor_idx])
            d[self._cor_idx] = sab * (1 - rho**2)
            xc = x[self._cor_idx]
            for src in (self._va, self._vb):
                ok = src < self.m_full
                rows.append(self._cor_idx[ok])
                cols.append(src[ok])
                vals.append(xc[ok] / 2)
        return x, d, rows, cols, vals

    def jacobian_full(self, theta):
        """d x / d theta_full (m_full x m_full, before folding through K)."""
        x, d, rows, cols, vals = self._dx_parts(theta)
        r = np.concatenate([np.arange(self.m_full)] + rows)
        c = np.concatenate([np.arange(self.m_full)] + cols)
        v = np.concatenate([d] + vals)
        return sparse.csr_matrix((v, (r, c)), shape=(self.m_full, self.m_full))

    def jacobian(self, theta):
        """Sparse Jacobian d x / d theta (m_full x m)."""
        return (self.jacobian_full(theta) @ self.K).tocsr()

    def jt_dot(self, theta, gx, x=None):
        """J(theta)^T gx without forming J."""
        tf = np.asarray(theta, dtype=float)[self.kidx]
        if x is None:
            x = self.pars_to_x(theta)
        g = np.array(gx, dtype=float)
        g[self._log] *= x[self._log]
        if self._cor_idx.size:
            allv = np.concatenate([x, self._pool])
            sab = np.sqrt(allv[self._va] * allv[self._vb])
            rho = np.tanh(tf[self._cor_idx])
            gc = gx[self._cor_idx]
            g[self._cor_idx] = gc * sab * (1 - rho**2)
            half = gc * x[self._cor_idx] / 2
            ext = np.zeros(self.m_full + len(self._pool))
            np.add.at(ext, self._va, half)
            np.add.at(ext, self._vb, half)
            g += ext[: self.m_full]
        return np.bincount(self.kidx, weights=g, minlength=self.m)

    # ---- priors --------------------------------------------------------

    def log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        q, dq, lj, _ = _prior_q(theta, self._ptgt)
        lp, _ = _prior_logpdf(q, self._pfam, self._pp1, self._pp2, theta)
        return float(np.sum(lp + lj))

    def grad_log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        q, dq, lj, dlj = _prior_q(theta, self._ptgt)
        _, dlp = _prior_logpdf(q, self._pfam, self._pp1, self._pp2, theta)
        return dlp * dq + dlj

    def log_prior_terms(self, theta):
        theta = np.asarray(theta, dtype=float)
        q, dq, lj, _ = _prior_q(theta, self._ptgt)
        lp, _ = _prior_logpdf(q, self._pfam, self._pp1, self._pp2, theta)
        return lp + lj

    def sample_prior_theta(self, nsamp, rng):
        """Independent draws from each prior, returned on the theta scale."""
        out = np.empty((nsamp, self.m))
        for k in range(self.m):
            fam, tgt, a, b = self._pfam[k], self._ptgt[k], self._pp1[k], self._pp2[k]
            if fam == 0:
                q = rng.normal(a, b, nsamp)
            elif fam == 1:
                q = rng.gamma(a, 1.0 / b, nsamp)
            else:
                q = 2.0 * rng.beta(a, b, nsamp) - 1.0
            if tgt == 0:
                out[:, k] = q
            elif tgt == 1:
                out[:, k] = np.log(q)
            elif tgt == 2:
                out[:, k] = 2.0 * np.log(q)
            else:
                out[:, k] = np.arctanh(np.clip(q, -1 + 1e-15, 1 - 1e-15))
        return out

    # ---- matrices ------------------------------------------------------

    def matrices(self, x):
        """Model matrices for every block at natural vector x."""
        out = []
        for b in self.blocks:
            mats = {k: v.copy() for k, v in b.base.items()}
            for name, (src, i, j, sym) in b.fills.items():
                M = mats[name]
                if M.ndim == 1:
                    M[i] = x[src]
                else:
                    M[i, j] = x[src]
                    M[j[sym], i[sym]] = x[src[sym]]
            out.append(
                ModelMatrices(
                    mats["nu"], mats["lambda"], mats["beta"], mats["alpha"], mats["theta"], mats["psi"]
                )
            )
        return out

    def matrix_grad_to_x(self, grads):
        """Collect per-block matrix gradients (dicts keyed by matrix name) into d/dx."""
        gx = np.zeros(self.m_full)
        for b, gd in zip(self.blocks, grads):
            for name, (src, i, j, sym) in b.fills.items():
                G = gd[name]
                if G.ndim == 1:
                    np.add.at(gx, src, G[i])
                else:
                    v = G[i, j].copy()
                    v[sym] += G[j[sym], i[sym]]
                    np.add.at(gx, src, v)
        return gx

    # ---- lookups -------------------------------------------------------

    def row_by_name(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def label_values(self, x):
        """Natural value of every labelled row (used by := expressions)."""
        env = {}
        for r in self.rows:
            if r.mat == "defined":
                continue
            v = x[r.full_index] if r.full_index >= 0 else r.fixed_value
            if r.label and r.label not in env:
                env[r.label] = v
            env.setdefault(r.name, v)
        return env

    def defined_values(self, x):
        env = self.label_values(x)
        out = {}
        for r in self.defined:
            val = r.expression.evaluate(env)
            out[r.lhs] = val
            env[r.lhs] = val
        return out

    def row_values(self, x):
        """Natural value of every (non-defined) row."""
        return np.array(
            [
                x[r.full_index] if r.full_index >= 0 else r.fixed_value
                for r in self.rows
                if r.mat != "defined"
            ]
        )

    def to_records(self):
        return [r.to_dict() for r in self.rows]


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def _resolve_default_priors(overrides):
    pri = {k: parse_prior_string(v) for k, v in DEFAULT_PRIORS.items()}
    for key, val in (overrides or {}).items():
        spec = val if isinstance(val, PriorSpec) else parse_prior_string(val)
        for k in _PRIOR_ALIASES.get(key, (key,)):
            if k not in pri:
                raise PartableError(f"unknown prior class {key!r}")
            pri[k] = spec
    return pri


def _check_prior(row, prior):
    tr = _ROLE_TRANSFORM[row.mat]
    if prior.target_scale not in _ALLOWED_TARGET[tr] or prior.family not in _ALLOWED_FAMILY[prior.target_scale]:
        raise PartableError(
            f"prior {prior} does not fit parameter {row.name} ({row.mat})"
        )


class _BlockBuilder:
    """Classifies variables and emits rows for one (group, level) block."""

    def __init__(self, stmts, columns, index, group, level):
        self.stmts = stmts
        self.index = index
        self.group = group
        self.level = level
        latents = []
        for s in stmts:
            if s.op == "=~":
                for name in s.lhs:
                    if name not in latents:
                        latents.append(name)
        self.latents = latents
        ov = []

        def add(v):
            if v not in latents and v not in ov and v != "1":
                ov.append(v)

        for s in stmts:
            if s.op == "=~":
                for t in s.rhs:
                    add(t.variable)
        for s in stmts:
            if s.op in ("~", "~~", "~1"):
                for name in s.lhs:
                    add(name)
                for t in s.rhs:
                    add(t.variable)
        for v in ov:
            if v not in columns:
                raise UnknownVariable(f"unknown variable {v!r}: not a data column or latent")
        self.ov = ov

        phantom = set()
        for s in stmts:
            if s.op == "~":
                for v in list(s.lhs) + [t.variable for t in s.rhs]:
                    if v in ov:
                        phantom.add(v)
        changed = True
        while changed:
            changed = False
            for s in stmts:
                if s.op != "~~":
                    continue
                for a in s.lhs:
                    for t in s.rhs:
                        pair = (a, t.variable)
                        if a == t.variable:
                            continue
                        lat = [v for v in pair if v in latents or v in phantom]
                        obs = [v for v in pair if v in ov and v not in phantom]
                        if lat and obs:
                            phantom.update(obs)
                            changed = True
        # endogenous: regressed on something or indicator of a factor
        endo = set()
        for s in stmts:
            if s.op == "~":
                endo.update(s.lhs)
            if s.op == "=~":
                for t in s.rhs:
                    if t.variable in latents or t.variable in phantom:
                        endo.add(t.variable)
        self.endo = endo
        ph_endo = [v for v in ov if v in phantom and v in endo]
        ph_exo = [v for v in ov if v in phantom and v not in endo]
        self.phantoms = ph_endo + ph_exo
        self.lv = latents + self.phantoms
        self.lv_pos = {v: k for k, v in enumerate(self.lv)}
        self.ov_pos = {v: k for k, v in enumerate(ov)}

    def is_lv(self, v):
        return v in self.lv_pos

    def exogenous_lv(self):
        return [v for v in self.lv if v not in self.endo]


def build_parameter_table(
    ast,
    columns,
    std_lv=False,
    meanstructure=False,
    orthogonal=False,
    n_groups=1,
    group_equal=(),
    priors=None,
    sample_stats=None,
    check_identification=True,
):
    """Compile a parsed model into a :class:`ParameterTable`.

    ``sample_stats`` maps (group, level) to ``(means, variances)`` dicts keyed by
    variable; it only affects start values.
    """
    ast = list(ast)
    columns = list(columns)
    default_pri = _resolve_default_priors(priors)
    levels = sorted({s.level for s in ast if s.op != ":="})
    multilevel = len(levels) > 1 or levels != [1]
    if multilevel:
        meanstructure = True
    group_equal = set(group_equal or ())
    defined_stmts = [s for s in ast if s.op == ":="]

    rows = []
    blocks = []
    sample_stats = sample_stats or {}

    for g in range(1, n_groups + 1):
        builders = {}
        for lev in levels:
            stmts = [s for s in ast if s.level == lev and s.op != ":="]
            bi = len(blocks)
            bb = _BlockBuilder(stmts, columns, bi, g, lev)
            builders[lev] = bb
            blocks.append(BlockSpec(bi, g, lev, bb.ov, bb.lv, bb.phantoms))
        if multilevel:
            ov_all = set().union(*(b.ov for b in builders.values()))
            for lev in levels[1:]:
                extra = [v for v in builders[lev].ov if v not in builders[levels[0]].ov]
                if extra:
                    raise PartableError(f"between-only variables are not supported: {extra}")
            within_only = [v for v in builders[levels[0]].ov if all(v not in builders[l].ov for l in levels[1:])]
        for lev in levels:
            bb = builders[lev]
            stats_ = sample_stats.get((g, lev), ({}, {}))
            rows.extend(
                _block_rows(
                    bb,
                    std_lv=std_lv,
                    meanstructure=meanstructure,
                    orthogonal=orthogonal,
                    default_pri=default_pri,
                    stats_=stats_,
                    free_intercepts=(
                        None
                        if not multilevel
                        else (set(within_only) if lev == levels[0] else set(bb.ov))
                    ),
                    latent_means_free=(g > 1 and "intercepts" in group_equal and not multilevel),
                )
            )

    for k, r in enumerate(rows, start=1):
        r.id = k

    # group.equal: implicit equality keys
    eq_map = {
        "loadings": ("lambda",),
        "intercepts": ("nu",),
        "regressions": ("beta",),
        "residuals": ("theta_var",),
        "residual.covariances": ("theta_cor",),
        "lv.variances": ("psi_var",),
        "lv.covariances": ("psi_cor",),
        "means": ("alpha",),
    }
    eq_mats = set()
    for key in group_equal:
        if key not in eq_map:
            raise PartableError(f"unknown group_equal entry {key!r}")
        eq_mats.update(eq_map[key])
    for r in rows:
        if r.mat in eq_mats and r.label is None and n_groups > 1 and r.fixed_value is None:
            r.eq_key = f"{r.lhs}{r.op}{r.rhs}@{r.level}"

    _resolve_equalities(rows)

    # defined parameters
    labels = {r.label for r in rows if r.label}
    defined = []
    for s in defined_stmts:
        missing = s.expression.names() - labels - {d.lhs for d in defined}
        if missing:
            raise UnknownVariable(f"defined parameter {s.lhs[0]} uses unknown labels {sorted(missing)}")
        row = ParamRow(0, s.lhs[0], ":=", str(s.expression), 0, 1, 1, "defined", expression=s.expression)
        defined.append(row)
    for r in defined:
        r.id = len(rows) + 1
        rows.append(r)

    # fills
    _compile_blocks(blocks, rows)

    n_moments = 0
    for b in blocks:
        p = b.p
        n_moments += p * (p + 1) // 2
        if meanstructure:
            n_moments += p
    options = {
        "std_lv": std_lv,
        "meanstructure": meanstructure,
        "orthogonal": orthogonal,
        "n_groups": n_groups,
        "group_equal": sorted(group_equal),
        "multilevel": multilevel,
        "priors": {k: str(v) for k, v in default_pri.items()},
    }
    table = ParameterTable(rows, blocks, options, defined, n_moments)
    if check_identification and table.m > n_moments:
        raise Unidentified(
            f"{table.m} free parameters exceed {n_moments} sample moments; model is not identified"
        )
    return table


def _mk_row(bb, lhs, op, rhs, mat, term=None, user=True):
    r = ParamRow(0, lhs, op, rhs, bb.index, bb.group, bb.level, mat, user=user)
    if term is not None:
        r.fixed_value = term.fixed_value
        r.prior = term.prior
        r.label = term.label
        r.user_start = term.start
        r.user_free = term.free
    return r


def _block_rows(bb, std_lv, meanstructure, orthogonal, default_pri, stats_, free_intercepts, latent_means_free):
    means, variances = stats_
    user_rows = []
    seen = {}

    def place(r):
        key = (r.lhs, r.op, r.rhs) if r.op != "~~" else ("~~",) + tuple(sorted((r.lhs, r.rhs)))
        if key in seen:
            raise ConstraintConflict(f"parameter {r.lhs} {r.op} {r.rhs} specified twice")
        seen[key] = r
        user_rows.append(r)

    for s in bb.stmts:
        for lhs in s.lhs:
            for k, t in enumerate(s.rhs):
                v = t.variable
                if s.op == "=~":
                    r = _mk_row(bb, lhs, "=~", v, "lambda", t)
                    if bb.is_lv(v):
                        r.matrix, r.mi, r.mj = "beta", bb.lv_pos[v], bb.lv_pos[lhs]
                    else:
                        r.matrix, r.mi, r.mj = "lambda", bb.ov_pos[v], bb.lv_pos[lhs]
                    first = k == 0 and s is _first_measure(bb.stmts, lhs)
                    if r.fixed_value is None and not r.user_free and first and not std_lv:
                        r.fixed_value = 1.0
                        r.user = True
                elif s.op == "~":
                    r = _mk_row(bb, lhs, "~", v, "beta", t)
                    r.matrix, r.mi, r.mj = "beta", bb.lv_pos[lhs], bb.lv_pos[v]
                elif s.op == "~1":
                    if bb.is_lv(lhs):
                        r = _mk_row(bb, lhs, "~1", "", "alpha", t)
                        r.matrix, r.mi, r.mj = "alpha", bb.lv_pos[lhs], 0
                    else:
                        r = _mk_row(bb, lhs, "~1", "", "nu", t)
                        r.matrix, r.mi, r.mj = "nu", bb.ov_pos[lhs], 0
                else:  # ~~
                    a, b_ = lhs, v
                    in_lv = bb.is_lv(a)
                    if in_lv != bb.is_lv(b_):
                        raise PartableError(f"cannot place covariance {a} ~~ {b_}")
                    pos = bb.lv_pos if in_lv else bb.ov_pos
                    mname = "psi" if in_lv else "theta"
                    kind = "var" if a == b_ else "cor"
                    r = _mk_row(bb, a, "~~", b_, f"{mname}_{kind}", t)
                    r.matrix, r.mi, r.mj = mname, pos[a], pos[b_]
                place(r)

    auto = []

    def has(lhs, op, rhs):
        if op == "~~":
            return ("~~",) + tuple(sorted((lhs, rhs))) in seen
        return (lhs, op, rhs) in seen

    # residual variances of observed
    for v in bb.ov:
        if v in bb.phantoms:
            continue
        if not has(v, "~~", v):
            r = _mk_row(bb, v, "~~", v, "theta_var", user=False)
            r.matrix, r.mi, r.mj = "theta", bb.ov_pos[v], bb.ov_pos[v]
            auto.append(r)
    # latent and phantom variances
    for v in bb.lv:
        if not has(v, "~~", v):
            r = _mk_row(bb, v, "~~", v, "psi_var", user=False)
            r.matrix, r.mi, r.mj = "psi", bb.lv_pos[v], bb.lv_pos[v]
            if std_lv and v in bb.latents:
                r.fixed_value = 1.0
            auto.append(r)
    # covariances among exogenous latents / exogenous phantoms
    if not orthogonal:
        exo = bb.exogenous_lv()
        for grp in ([v for v in exo if v in bb.latents], [v for v in exo if v in bb.phantoms]):
            for i in range(len(grp)):
                for j in range(i + 1, len(grp)):
                    a, b_ = grp[i], grp[j]
                    if not has(a, "~~", b_):
                        r = _mk_row(bb, a, "~~", b_, "psi_cor", user=False)
                        r.matrix, r.mi, r.mj = "psi", bb.lv_pos[a], bb.lv_pos[b_]
                        auto.append(r)
    # intercepts
    if meanstructure:
        for v in bb.ov:
            if v in bb.phantoms or has(v, "~1", ""):
                continue
            r = _mk_row(bb, v, "~1", "", "nu", user=False)
            r.matrix, r.mi = "nu", bb.ov_pos[v]
            if free_intercepts is not None and v not in free_intercepts:
                r.fixed_value = 0.0
            auto.append(r)
        for v in bb.lv:
            if has(v, "~1", ""):
                continue
            r = _mk_row(bb, v, "~1", "", "alpha", user=False)
            r.matrix, r.mi = "alpha", bb.lv_pos[v]
            if v in bb.latents:
                if not latent_means_free:
                    r.fixed_value = 0.0
            elif free_intercepts is not None and v not in free_intercepts:
                r.fixed_value = 0.0
            auto.append(r)

    all_rows = user_rows + auto
    pos_var = {}
    for r in all_rows:
        if r.fixed_value is not None and r.mat.endswith("_var") and not r.fixed_value > 0:
            raise InadmissibleValue(f"variance {r.name} fixed to non-positive value {r.fixed_value}")
        if r.prior is None:
            r.prior = default_pri[r.mat]
        _check_prior(r, r.prior)
        if r.mat.endswith("_var"):
            pos_var[(r.matrix, r.mi)] = r

    # start values (natural scale)
    for r in all_rows:
        if r.mat in ("lambda",):
            s = 1.0
        elif r.mat == "beta":
            s = 0.0
        elif r.mat in ("nu", "alpha"):
            if r.mat == "nu" or r.lhs in bb.phantoms:
                s = float(means.get(r.lhs, 0.0))
                if free_intercepts is not None and r.lhs not in free_intercepts:
                    s = 0.0
            else:
                s = 0.0
        elif r.mat.endswith("_var"):
            obs_var = float(variances.get(r.lhs, 1.0))
            if not np.isfinite(obs_var) or obs_var <= 0:
                obs_var = 1.0
            if r.mat == "theta_var":
                s = 0.5 * obs_var
            elif r.lhs in bb.phantoms:
                s = obs_var if r.lhs not in bb.endo else 0.5 * obs_var
            else:
                s = 0.05
        else:
            s = 0.0
        if r.user_start is not None:
            s = r.user_start
        if r.fixed_value is not None:
            s = r.fixed_value
        r.start_natural = s
    for r in all_rows:
        if r.mat.endswith("_var"):
            if not r.start_natural > 0:
                raise InadmissibleValue(f"start value for variance {r.name} must be positive")
            r.start_unconstrained = math.log(r.start_natural)
        elif r.mat.endswith("_cor"):
            va = pos_var[(r.matrix, r.mi)].start_natural
            vb = pos_var[(r.matrix, r.mj)].start_natural
            rho = r.start_natural / math.sqrt(va * vb)
            if r.fixed_value is None:
                rho = float(np.clip(rho, -0.95, 0.95))
            elif abs(rho) >= 1:
                raise InadmissibleValue(f"fixed covariance {r.name} implies |correlation| >= 1")
            r.start_unconstrained = math.atanh(rho)
            if r.fixed_value is None:
                r.start_natural = rho * math.sqrt(va * vb)
        else:
            r.start_unconstrained = r.start_natural
    return all_rows


def _first_measure(stmts, lhs):
    for s in stmts:
        if s.op == "=~" and lhs in s.lhs:
            return s
    return None


def _resolve_equalities(rows):
    """Assign reduced free indices; rows sharing a label (or eq_key) share one index."""
    groups = {}
    order = []
    for r in rows:
        if r.mat == "defined":
            continue
        key = ("label", r.label) if r.label else (("eq", r.eq_key) if r.eq_key else ("row", id(r)))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)
    for key in order:
        members = groups[key]
        if len(members) < 2:
            continue
        mats = {m.transform for m in members}
        if len(mats) > 1:
            raise ConstraintConflict(f"label {key[1]!r} mixes parameters of incompatible types")
        fixed = {m.fixed_value for m in members if m.fixed_value is not None}
        if len(fixed) > 1:
            raise ConstraintConflict(f"label {key[1]!r} carries contradictory fixed values {sorted(fixed)}")
        if fixed:
            val = fixed.pop()
            for m in members:
                m.fixed_value = val
                m.start_natural = val
                if m.mat.endswith("_var"):
                    m.start_unconstrained = math.log(val)
                elif not m.mat.endswith("_cor"):
                    m.start_unconstrained = val
        else:
            # user prior / start on any member propagates to the first row
            lead = members[0]
            for m in members[1:]:
                if m.prior is not None and lead.prior is None:
                    lead.prior = m.prior
    k = 0
    full = 0
    for key in order:
        members = groups[key]
        if members[0].fixed_value is not None:
            continue
        k += 1
        for m in members:
            m.free = k
    # full index in row order
    for r in rows:
        if r.free > 0:
            r.full_index = full
            full += 1


def _compile_blocks(blocks, rows):
    for b in blocks:
        p, q = b.p, b.q
        base = {
            "nu": np.zeros(p),
            "lambda": np.zeros((p, q)),
            "beta": np.zeros((q, q)),
            "alpha": np.zeros(q),
            "theta": np.zeros((p, p)),
            "psi": np.zeros((q, q)),
        }
        for v in b.phantoms:
            base["lambda"][b.ov.index(v), b.lv.index(v)] = 1.0
        fills = {k: ([], [], []) for k in _MATRIX_NAMES}
        brow = [r for r in rows if r.block == b.index and r.mat != "defined"]
        var_vals = {}
        for r in brow:
            if r.fixed_value is not None and r.mat.endswith("_var"):
                var_vals[(r.matrix, r.mi)] = r.fixed_value
        for r in brow:
            M = base[r.matrix]
            if r.full_index >= 0:
                src, ii, jj = fills[r.matrix]
                src.append(r.full_index)
                ii.append(r.mi)
                jj.append(r.mj)
                continue
            val = r.fixed_value
            if M.ndim == 1:
                M[r.mi] = val
            else:
                M[r.mi, r.mj] = val
                if r.matrix in ("theta", "psi"):
                    M[r.mj, r.mi] = val
        b.base = base
        b.fills = {}
        for name, (src, ii, jj) in fills.items():
            if not src:
                continue
            ii = np.array(ii, dtype=int)
            jj = np.array(jj, dtype=int)
            sym = (ii != jj) if name in ("theta", "psi") else np.zeros(len(ii), dtype=bool)
            b.fills[name] = (np.array(src, dtype=int), ii, jj, sym)
