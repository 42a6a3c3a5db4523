"""Fit artifact: one JSON document, matrices as base64 little-endian float64."""

from __future__ import annotations

import base64
import json

import numpy as np
import pandas as pd

from . import __version__
from .fit import Fit, FitConfig, build_model
from .laplace import VBResult
from .marginals import ProfileRecord, SkewNormalMarginal

FORMAT = "semlaplace-fit"


def encode_array(a):
    a = np.require(np.asarray(a, dtype="<f8"), requirements="C")  # keeps 0-d shapes
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f8")).astype(float).reshape(d["shape"])


def _encode_frame(frame: pd.DataFrame):
    cols = []
    for c in frame.columns:
        s = frame[c]
        if pd.api.types.is_numeric_dtype(s) and not pd.api.types.is_bool_dtype(s):
            cols.append({"name": str(c), "kind": "float", "values": encode_array(s.to_numpy(dtype=float))})
        else:
            vals = [None if pd.isna(v) else (v.item() if hasattr(v, "item") else v) for v in s.tolist()]
            cols.append({"name": str(c), "kind": "object", "values": vals})
    return cols


def _decode_frame(cols):
    data = {}
    for c in cols:
        if c["kind"] == "float":
            data[c["name"]] = decode_array(c["values"])
        else:
            data[c["name"]] = c["values"]
    return pd.DataFrame(data, columns=[c["name"] for c in cols])


def fit_to_dict(fit: Fit, include_run=True):
    """Serialisable document; ``include_run=False`` drops timings, creation time and cores."""
    vb = fit.vb
    config = fit.config.to_dict()
    cores = config.pop("cores")  # execution detail, not part of the result
    doc = {
        "format": FORMAT,
        "version": __version__,
        "model": fit.model,
        "config": config,
        "data": _encode_frame(fit.frame),
        "parameter_table": fit.table.to_records(),
        "parameter_names": list(fit.table.names),
        "theta_star": encode_array(fit.theta_star),
        "H": encode_array(fit.H),
        "omega": encode_array(fit.omega),
        "L": encode_array(fit.L),
        "grad_at_mode": encode_array(fit.grad_at_mode),
        "objective_at_mode": fit.objective_at_mode,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "vb": {
            "delta": encode_array(vb.delta),
            "d": encode_array(vb.d),
            "applied": bool(vb.applied),
            "kld_global": vb.kld_global,
            "kld": encode_array(vb.kld),
            "objective0": vb.objective0,
            "objective": vb.objective,
            "iterations": int(vb.iterations),
            "elbo_gain": vb.elbo_gain,
        },
        "marginals": [s.to_dict() for s in fit.marginals],
        "R_star": encode_array(fit.R_star),
        "n_clamped": int(fit.n_clamped),
        "x_samp": encode_array(fit.x_samp),
        "deviances": encode_array(fit.deviances),
        "diagnostics": fit.diagnostics,
        "measures": fit.measures,
        "baseline": None
        if fit.baseline is None
        else {
            "deviances": encode_array(fit.baseline["deviances"]),
            "p_d": fit.baseline["p_d"],
            "marg_loglik": fit.baseline["marg_loglik"],
        },
    }
    if fit.profiles is not None:
        doc["profiles"] = [
            {"j": p.j, "z": encode_array(p.z), "raw": encode_array(p.raw), "tilt": p.tilt, "clamped": p.clamped}
            for p in fit.profiles
        ]
    if include_run:
        doc["run"] = {"created": fit.created, "timings": fit.timings, "cores": cores}
    return doc


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(fit: Fit, include_run=True) -> str:
    return json.dumps(fit_to_dict(fit, include_run), default=_jsonable, indent=1)


def save_fit(fit: Fit, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(fit))


def fit_from_dict(doc) -> Fit:
    if doc.get("format") != FORMAT:
        raise ValueError("not a semlaplace fit file")
    run = doc.get("run", {})
    cfg = FitConfig.from_dict({**doc["config"], "cores": run.get("cores", 1)})
    frame = _decode_frame(doc["data"])
    table, data, lik = build_model(doc["model"], frame, cfg)
    v = doc["vb"]
    vb = VBResult(
        decode_array(v["delta"]),
        decode_array(v["d"]),
        bool(v["applied"]),
        float(v["kld_global"]),
        decode_array(v["kld"]),
        float(v["objective0"]),
        float(v["objective"]),
        int(v["iterations"]),
        float(v["elbo_gain"]),
    )
    base = doc.get("baseline")
    if base is not None:
        base = {"deviances": decode_array(base["deviances"]), "p_d": base["p_d"], "marg_loglik": base["marg_loglik"]}
    profiles = None
    if "profiles" in doc:
        profiles = [
            ProfileRecord(p["j"], decode_array(p["z"]), decode_array(p["raw"]), p["tilt"], p["clamped"])
            for p in doc["profiles"]
        ]
    return Fit(
        model=doc["model"],
        config=cfg,
        frame=frame,
        table=table,
        data=data,
        lik=lik,
        theta_star=decode_array(doc["theta_star"]),
        H=decode_array(doc["H"]),
        omega=decode_array(doc["omega"]),
        L=decode_array(doc["L"]),
        objective_at_mode=float(doc["objective_at_mode"]),
        iterations=int(doc["iterations"]),
        converged=bool(doc["converged"]),
        grad_at_mode=decode_array(doc["grad_at_mode"]),
        vb=vb,
        marginals=[SkewNormalMarginal(**s) for s in doc["marginals"]],
        R_star=decode_array(doc["R_star"]),
        n_clamped=int(doc["n_clamped"]),
        x_samp=decode_array(doc["x_samp"]),
        diagnostics=doc["diagnostics"],
        measures=doc["measures"],
        deviances=decode_array(doc["deviances"]),
        baseline=base,
        profiles=profiles,
        timings=run.get("timings", {}),
        created=run.get("created", ""),
    )


def loads(text) -> Fit:
    return fit_from_dict(json.loads(text))


def load_fit(path) -> Fit:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
