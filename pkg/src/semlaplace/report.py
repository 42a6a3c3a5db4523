"""Aligned-text renderings of summaries, diagnostics and model comparisons."""

from __future__ import annotations

import math

import numpy as np

from . import __version__

SECTIONS = (
    ("Latent Variables", "=~"),
    ("Regressions", "~"),
    ("Covariances", "cov"),
    ("Intercepts", "~1"),
    ("Variances", "var"),
    ("Defined Parameters", ":="),
)


def _num(v, width=9, digits=3):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return " " * width
    return f"{v:{width}.{digits}f}"


def _kind(row):
    if row.op == "~~":
        return "var" if row.lhs == row.rhs else "cov"
    return row.op


def _endogenous(table):
    out = set()
    for r in table.rows:
        if r.op == "=~":
            out.add(r.rhs)
        elif r.op == "~":
            out.add(r.lhs)
    for b in table.blocks:
        out.update(b.ov)
    return out


def _header_line(label, key, width=28):
    return f"{label:<{width}}{key:>22}"


def summary_text(fit) -> str:
    df = fit.summary_frame()
    table = fit.table
    m = fit.measures
    lines = [
        f"semlaplace {__version__} "
        + ("ended normally" if fit.converged else "did NOT converge")
        + f" after {fit.iterations} iterations",
        "",
        _header_line("  Estimator", "BAYES"),
        _header_line("  Optimization method", "BFGS"),
        _header_line("  Number of model parameters", str(table.m)),
        "",
        _header_line("  Number of observations", str(m["n"])),
        "",
        "Model Test (User Model):",
        "",
        f"   {'Marginal log-likelihood':<35}{m['marg_loglik']:>14.3f} ",
        f"   {'PPP (Chi-square)':<35}{m['ppp']:>14.3f} ",
        "",
        "Information Criteria:",
        "",
        f"   {'Deviance (DIC)':<35}{m['dic']:>14.3f} ",
        f"   {'Effective parameters (pD)':<35}{m['p_d']:>14.3f} ",
        "",
        "Parameter Estimates:",
        "",
        f"   {'Marginalisation method':<35}{'SKEWNORM':>14}",
        f"   {'VB correction':<35}{str(bool(fit.vb.applied)).upper():>14}",
    ]
    endo = _endogenous(table)
    head = f"{'':19}{'Estimate':>9}{'SD':>9}{'2.5%':>9}{'97.5%':>9}{'NMAD':>9}{'Prior':>16}"
    rows = list(df.itertuples(index=False))
    groups = sorted({(r.group, r.level) for r in rows})
    multi = table.n_groups > 1 or table.n_levels > 1
    for g, lvl in groups:
        sub = [r for r in rows if (r.group, r.level) == (g, lvl)]
        if multi:
            lines.append("")
            tag = []
            if table.n_groups > 1:
                lab = fit.data.group_labels[g - 1]
                tag.append(f"Group {g} [{lab}]")
            if table.n_levels > 1:
                tag.append(f"Level {lvl} [{'within' if lvl == 1 else fit.config.cluster}]")
            lines.append(", ".join(tag) + ":")
        for title, kind in SECTIONS:
            sec = [r for r in sub if (_kind(r) if r.op != ":=" else ":=") == kind]
            if not sec:
                continue
            lines += ["", f"{title}:", head]
            last = None
            for r in sec:
                dot = "." if r.rhs in endo and kind in ("cov", "var", "~1") else " "
                if kind in ("=~", "~", "cov"):
                    lead = r.lhs if kind != "cov" else r.lhs
                    ldot = "." if kind == "cov" and r.lhs in endo else " "
                    if lead != last:
                        opstr = "~~" if kind == "cov" else r.op
                        lines.append(f" {ldot}{lead} {opstr}")
                        last = lead
                    name = r.rhs
                elif kind in ("var", "~1"):
                    name = r.lhs
                    dot = "." if r.lhs in endo else " "
                else:
                    name = r.lhs
                    dot = " "
                if r.label and kind != ":=":
                    name = f"{name} ({r.label})"
                lines.append(
                    f"   {dot}{name:<15}"
                    + _num(r.est)
                    + _num(r.sd)
                    + _num(r.q025)
                    + _num(r.q975)
                    + _num(r.nmad)
                    + f"{r.prior:>16}"
                )
    return "\n".join(lines) + "\n"


def diagnostics_text(diag: dict) -> str:
    from .fit import DIAGNOSTIC_KEYS

    fmt = {
        "grad_inf": "{:.2e}",
        "grad_inf_rel": "{:.2e}",
        "grad_l2": "{:.2e}",
        "hess_cond": "{:.2e}",
        "vb_kld_global": "{:.4f}",
        "kld_max": "{:.4f}",
        "kld_mean": "{:.4f}",
        "nmad_max": "{:.4f}",
        "nmad_mean": "{:.4f}",
    }
    keys = list(DIAGNOSTIC_KEYS)
    out = []
    for i in range(0, len(keys), 5):
        chunk = keys[i : i + 5]
        out.append("".join(f"{k:>14}" for k in chunk))
        out.append("".join(f"{fmt.get(k, '{:d}').format(diag[k]):>14}" for k in chunk))
    return "\n".join(out) + "\n"


def compare_text(df, baseline_name=None) -> str:
    lines = ["Bayesian Model Comparison (semlaplace)"]
    if baseline_name:
        lines.append(f"Baseline model: {baseline_name} ")
    lines.append("")
    cols = list(df.columns)
    fmts = {
        "npar": "{:d}",
        "marg_loglik": "{:.2f}",
        "logBF": "{:.3f}",
        "dic": "{:.1f}",
        "p_d": "{:.3f}",
    }
    heads = {"model": "Model", "npar": "npar", "marg_loglik": "Marg.Loglik", "logBF": "logBF", "dic": "DIC",
             "p_d": "pD"}
    cells = [[heads.get(c, c.upper().replace("BRMSEA", "BRMSEA")) for c in cols]]
    for r in df.itertuples(index=False):
        row = []
        for c, v in zip(cols, r):
            if c == "model":
                row.append(str(v))
            elif isinstance(v, (float, np.floating)) and np.isnan(v):
                row.append("NA")
            else:
                row.append(fmts.get(c, "{:.4f}").format(int(v) if c == "npar" else v))
        cells.append(row)
    widths = [max(len(r[k]) for r in cells) for k in range(len(cols))]
    for r in cells:
        lines.append(" ".join(f"{v:>{w}}" for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"
