"""Command-line driver: ``semlaplace {fit,summary,diagnostics,compare,sample,predict}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import __version__

EXIT_USAGE = 2
EXIT_NUMERIC = 3
CORES_ENV = "SEMLAPLACE_CORES"


class CLIError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def read_csv(path):
    """Comma-separated with header; ``NA`` and empty fields are missing."""
    try:
        return pd.read_csv(path, na_values=["NA", ""], keep_default_na=False)
    except FileNotFoundError:
        raise CLIError(f"data file not found: {path}", EXIT_USAGE) from None


def read_model(path):
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise CLIError(f"model file not found: {path}", EXIT_USAGE) from None


def _load(path):
    from .fitio import load_fit

    try:
        return load_fit(path)
    except FileNotFoundError:
        raise CLIError(f"fit file not found: {path}", EXIT_USAGE) from None


def _emit(text, out=None):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj):
    return json.dumps(obj, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else float(o)) + "\n"


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _priors_arg(items):
    out = {}
    for it in items or ():
        if "=" not in it:
            raise CLIError(f"--default-prior expects CLASS=PRIOR, got {it!r}", EXIT_USAGE)
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out or None


def cmd_fit(a):
    from .fit import FitConfig, fit_model
    from .fitio import save_fit
    from .partable import build_parameter_table
    from .syntax import ast_to_json, parse_model

    source = read_model(a.model)
    if a.dump_ast:
        _emit(ast_to_json(parse_model(source)) + "\n")
        return 0
    frame = read_csv(a.data)
    cfg = FitConfig(
        group=a.group,
        cluster=a.cluster,
        missing=a.missing,
        std_lv=a.std_lv,
        meanstructure=a.meanstructure,
        orthogonal=a.orthogonal,
        group_equal=tuple(x for x in (a.group_equal or "").split(",") if x),
        priors=_priors_arg(a.default_prior),
        seed=a.seed,
        vb=not a.no_vb,
        optimizer_iter_max=a.optimizer_iter_max,
        optimizer_eval_max=a.optimizer_eval_max,
        qmc_points=a.qmc_points,
        marginal_correction=a.marginal_correction,
        ngrid=a.ngrid,
        cores=a.cores,
        nsamp=a.nsamp,
        sn_fit_sample=a.sn_fit_sample,
        spearman=a.spearman,
        fit_indices=not a.no_fit_indices,
        ppp_mean=a.ppp_mean,
    )
    if a.dump_partable:
        from .fit import build_model

        table, _, _ = build_model(source, frame, cfg)
        _emit(pd.DataFrame(table.to_records()).to_csv(index=False))
        return 0
    fit = fit_model(source, frame, cfg, verbose=not a.quiet, keep_profiles=bool(a.dump_profiles))
    out = a.output or os.path.splitext(os.path.basename(a.model))[0] + ".fit.json"
    save_fit(fit, out)
    if a.dump_profiles:
        profiles_csv(fit).to_csv(a.dump_profiles, index=False)
    if not a.quiet:
        n = fit.measures["n"]
        dropped = fit.data.n_dropped
        msg = f"wrote {out} (n = {n}"
        msg += f", {dropped} rows removed)" if dropped else ")"
        print(msg, file=sys.stderr)
    return 0


def profiles_csv(fit):
    """Scan profiles and fitted SN log-densities, one row per grid point."""
    recs = []
    for p in fit.profiles or ():
        sn = fit.marginals[p.j]
        adj = p.adjusted
        dens = sn.logpdf(p.z)
        dens = dens - dens.max()
        for k in range(p.z.size):
            recs.append(
                {
                    "parameter": fit.table.names[p.j],
                    "z": p.z[k],
                    "raw": p.raw[k],
                    "adjusted": adj[k],
                    "sn_log_density": dens[k],
                }
            )
    return pd.DataFrame(recs)


def cmd_summary(a):
    fit = _load(a.fit)
    if a.standardized:
        df = fit.standardized_solution()
        _emit(df.to_json(orient="records", indent=2) + "\n" if a.format == "json" else df.to_string(index=False) + "\n")
        return 0
    if a.format == "json":
        df = fit.summary_frame()
        doc = {
            "measures": fit.measures,
            "fit_indices": fit.fit_indices() if fit.baseline is not None else {},
            "parameters": json.loads(df.to_json(orient="records")),
        }
        _emit(_json(doc))
    else:
        _emit(fit.summary_text())
    return 0


def cmd_diagnostics(a):
    from .report import diagnostics_text

    fit = _load(a.fit)
    if a.format == "json":
        _emit(_json(fit.diagnostics))
    else:
        _emit(diagnostics_text(fit.diagnostics))
    return 0


def cmd_compare(a):
    from .posthoc import compare
    from .report import compare_text

    fits = [_load(p) for p in a.fits]
    names = a.names.split(",") if a.names else [os.path.basename(p).split(".")[0] for p in a.fits]
    if len(names) != len(fits):
        raise CLIError("--names must list one name per fit file", EXIT_USAGE)
    measures = [m.strip().lower() for m in (a.fit_measures or "").split(",") if m.strip()]
    df = compare(fits, names, measures)
    if a.format == "json":
        _emit(df.to_json(orient="records", indent=2) + "\n")
    else:
        _emit(compare_text(df, names[0] if measures else None))
    return 0


def cmd_sample(a):
    fit = _load(a.fit)
    if a.prior:
        from .copula import sample_prior_predictive

        n = fit.measures["n"]
        sims = sample_prior_predictive(fit.table, n, a.nsamp or 100, fit.seed if a.seed is None else a.seed)
        cols = fit.table.blocks[0].ov
        frames = [pd.DataFrame(y, columns=cols).assign(**{".draw": k + 1}) for k, y in enumerate(sims)]
        df = pd.concat(frames, ignore_index=True)
    else:
        df = fit.sample(a.nsamp, a.seed, a.type)
    _emit(df.to_csv(index=False), a.output)
    return 0


def cmd_predict(a):
    fit = _load(a.fit)
    draws = fit.predict(type=a.type, level=a.level, nsamp=a.nsamp, seed=a.seed, group=a.group_index)
    if not draws:
        _emit("")
        return 0
    cols = _predict_columns(fit, a.type, a.level, a.group_index)
    if a.mean:
        df = pd.DataFrame(np.mean(draws, axis=0), columns=cols)
    else:
        frames = []
        for k, d in enumerate(draws):
            f = pd.DataFrame(d, columns=cols)
            f.insert(0, ".row", np.arange(1, d.shape[0] + 1))
            f.insert(0, ".draw", k + 1)
            frames.append(f)
        df = pd.concat(frames, ignore_index=True)
    _emit(df.to_csv(index=False), a.output)
    return 0


def _predict_columns(fit, type, level, group):
    blk = next(b for b in fit.table.blocks if b.group == group and b.level == level)
    if type == "lv":
        return [v for v in blk.lv if v not in blk.phantoms]
    if type == "ymis":
        blk = next(b for b in fit.table.blocks if b.group == group and b.level == 1)
    return list(blk.ov)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="semlaplace", description="Approximate Bayesian structural equation models.")
    p.add_argument("--version", action="version", version=f"semlaplace {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress details")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV file")
    f.add_argument("model", help="model file (lavaan-style syntax); '-' reads stdin")
    f.add_argument("data", nargs="?", help="CSV data file")
    f.add_argument("-o", "--output", help="fit file to write (default: <model>.fit.json)")
    f.add_argument("--cluster", help="cluster column for level: blocks")
    f.add_argument("--group", help="grouping column for multigroup models")
    f.add_argument("--group-equal", help="comma list, e.g. loadings,intercepts")
    f.add_argument("--missing", choices=("listwise", "ml"), default="listwise")
    f.add_argument("--std-lv", action="store_true", help="fix latent variances to 1 instead of first loadings")
    f.add_argument("--meanstructure", action="store_true")
    f.add_argument("--orthogonal", action="store_true", help="fix covariances between exogenous latents to 0")
    f.add_argument("--default-prior", action="append", metavar="CLASS=PRIOR",
                   help="override a default prior, e.g. lambda='normal(0,5)'")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--no-vb", action="store_true", help="skip the variational location shift")
    f.add_argument("--optimizer-iter-max", type=int, default=1000)
    f.add_argument("--optimizer-eval-max", type=int, default=2000)
    f.add_argument("--qmc-points", type=int, default=None)
    f.add_argument("--marginal-correction", choices=("shortcut", "shortcut_fd", "hessian", "none"),
                   default="shortcut")
    f.add_argument("--ngrid", type=int, default=21)
    f.add_argument("--cores", type=int, default=int(os.environ.get(CORES_ENV, "1")))
    f.add_argument("--nsamp", type=int, default=1000)
    f.add_argument("--sn-fit-sample", action="store_true", help="SN quantiles for sample-based summaries")
    f.add_argument("--spearman", action="store_true", help="read copula targets as rank correlations")
    f.add_argument("--no-fit-indices", action="store_true", help="skip the baseline model fit")
    f.add_argument("--ppp-mean", action="store_true", help="add the mean term to the PPP discrepancy")
    f.add_argument("--dump-ast", action="store_true", help="print the parsed model as JSON and exit")
    f.add_argument("--dump-partable", action="store_true", help="print the parameter table as CSV and exit")
    f.add_argument("--dump-profiles", metavar="CSV", help="write marginal scan profiles to CSV")
    f.add_argument("-q", "--quiet", action="store_true")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("summary", help="parameter summary of a fit file")
    s.add_argument("fit")
    s.add_argument("--format", choices=("text", "json"), default="text")
    s.add_argument("--standardized", action="store_true")
    s.set_defaults(func=cmd_summary)

    d = sub.add_parser("diagnostics", help="convergence and approximation diagnostics")
    d.add_argument("fit")
    d.add_argument("--format", choices=("text", "json"), default="text")
    d.set_defaults(func=cmd_diagnostics)

    c = sub.add_parser("compare", help="compare fitted models")
    c.add_argument("fits", nargs="+")
    c.add_argument("--names", help="comma-separated model names")
    c.add_argument("--fit-measures", help="comma list from BRMSEA,BCFI,BTLI,BNFI")
    c.add_argument("--format", choices=("text", "json"), default="text")
    c.set_defaults(func=cmd_compare)

    sa = sub.add_parser("sample", help="posterior (or prior predictive) draws as CSV")
    sa.add_argument("fit")
    sa.add_argument("--nsamp", type=int, default=None)
    sa.add_argument("--seed", type=int, default=None)
    sa.add_argument("--type", choices=("theta", "lavaan"), default="lavaan")
    sa.add_argument("--prior", action="store_true", help="prior predictive datasets instead")
    sa.add_argument("-o", "--output")
    sa.set_defaults(func=cmd_sample)

    pr = sub.add_parser("predict", help="factor scores, predictions or imputations as CSV")
    pr.add_argument("fit")
    pr.add_argument("--type", choices=("lv", "ov", "ypred", "ymis"), default="lv")
    pr.add_argument("--level", type=int, choices=(1, 2), default=1)
    pr.add_argument("--group-index", type=int, default=1)
    pr.add_argument("--nsamp", type=int, default=None)
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--mean", action="store_true", help="posterior mean over draws only")
    pr.add_argument("-o", "--output")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    from .laplace import NonFiniteObjective, NotPositiveDefinite
    from .partable import PartableError
    from .syntax import ModelSyntaxError

    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    if a.command == "fit" and a.data is None and not a.dump_ast:
        parser.error("fit needs a data file")
    try:
        return a.func(a)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ModelSyntaxError, PartableError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NotPositiveDefinite, NonFiniteObjective) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
