import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from semlaplace.cli import EXIT_NUMERIC, EXIT_USAGE, main

MODEL = "f =~ y1 + y2 + y3 + y4\ny3 ~~ y4\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, small_frame):
    d = tmp_path_factory.mktemp("cli")
    small_frame.to_csv(d / "data.csv", index=False)
    (d / "m1.txt").write_text(MODEL)
    (d / "m0.txt").write_text("f =~ y1 + y2 + y3 + y4\n")
    return d


@pytest.fixture(scope="module")
def fitted(workdir):
    for name in ("m1", "m0"):
        rc = main(["fit", str(workdir / f"{name}.txt"), str(workdir / "data.csv"), "-o",
                   str(workdir / f"{name}.fit.json"), "--nsamp", "200", "-q"])
        assert rc == 0
    return workdir


def run(args, capsys):
    rc = main([str(a) for a in args])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_fit_writes_file_and_stages(workdir, capsys):
    rc, out, err = run(["fit", workdir / "m1.txt", workdir / "data.csv", "-o", workdir / "v.fit.json",
                        "--nsamp", "100", "--no-fit-indices"], capsys)
    assert rc == 0
    assert (workdir / "v.fit.json").exists()
    for stage in ("Finding posterior mode", "Computing the Hessian", "VB correction", "skew-normal marginals",
                  "NORTA", "Posterior sampling"):
        assert stage in err
    assert "wrote" in err


def test_summary_text_and_json(fitted, capsys):
    rc, out, _ = run(["summary", fitted / "m1.fit.json"], capsys)
    assert rc == 0
    assert "Latent Variables:" in out and "Marginal log-likelihood" in out
    rc, out, _ = run(["summary", fitted / "m1.fit.json", "--format", "json"], capsys)
    doc = json.loads(out)
    assert {"measures", "fit_indices", "parameters"} <= set(doc)
    assert any(p["op"] == "=~" for p in doc["parameters"])


def test_standardized(fitted, capsys):
    rc, out, _ = run(["summary", fitted / "m1.fit.json", "--standardized", "--format", "json"], capsys)
    rows = json.loads(out)
    assert all("est.std" in r for r in rows)


def test_diagnostics(fitted, capsys):
    rc, out, _ = run(["diagnostics", fitted / "m1.fit.json", "--format", "json"], capsys)
    d = json.loads(out)
    assert {"grad_inf", "hess_cond", "nmad_max", "vb_kld_global"} <= set(d)
    rc, out, _ = run(["diagnostics", fitted / "m1.fit.json"], capsys)
    assert "hess_cond" in out


def test_compare(fitted, capsys):
    rc, out, _ = run(["compare", fitted / "m0.fit.json", fitted / "m1.fit.json", "--names", "nocov,cov",
                      "--fit-measures", "BRMSEA,BCFI"], capsys)
    assert rc == 0
    assert "Baseline model: nocov" in out
    assert "Marg.Loglik" in out and "BCFI" in out
    rc, out, _ = run(["compare", fitted / "m0.fit.json", fitted / "m1.fit.json", "--format", "json"], capsys)
    rows = json.loads(out)
    assert rows[-1]["logBF"] == 0.0
    rc, _, err = run(["compare", fitted / "m0.fit.json", "--names", "a,b"], capsys)
    assert rc == EXIT_USAGE


def test_sample(fitted, capsys, tmp_path):
    rc, out, _ = run(["sample", fitted / "m1.fit.json", "--nsamp", "7", "--seed", "3"], capsys)
    df = pd.read_csv(pd.io.common.StringIO(out))
    assert len(df) == 7
    rc, out2, _ = run(["sample", fitted / "m1.fit.json", "--nsamp", "7", "--seed", "3"], capsys)
    assert out == out2
    rc, out, _ = run(["sample", fitted / "m1.fit.json", "--prior", "--nsamp", "2"], capsys)
    df = pd.read_csv(pd.io.common.StringIO(out))
    assert set(df[".draw"]) == {1, 2}
    assert len(df) == 2 * 75


def test_predict(fitted, capsys):
    rc, out, _ = run(["predict", fitted / "m1.fit.json", "--nsamp", "3"], capsys)
    df = pd.read_csv(pd.io.common.StringIO(out))
    assert list(df.columns) == [".draw", ".row", "f"]
    assert len(df) == 3 * 75
    rc, out, _ = run(["predict", fitted / "m1.fit.json", "--mean", "--type", "ov", "--nsamp", "3"], capsys)
    df = pd.read_csv(pd.io.common.StringIO(out))
    assert df.shape == (75, 4)
    rc, _, err = run(["predict", fitted / "m1.fit.json", "--level", "2"], capsys)
    assert rc == 1 and "level 2" in err


def test_dump_ast_and_partable(workdir, capsys):
    rc, out, _ = run(["fit", workdir / "m1.txt", "--dump-ast"], capsys)
    assert json.loads(out)[0]["op"] == "=~"
    rc, out, _ = run(["fit", workdir / "m1.txt", workdir / "data.csv", "--dump-partable"], capsys)
    df = pd.read_csv(pd.io.common.StringIO(out))
    assert "prior" in df.columns and len(df) >= 9


def test_dump_profiles(workdir, capsys, tmp_path):
    csv = tmp_path / "prof.csv"
    rc, _, _ = run(["fit", workdir / "m1.txt", workdir / "data.csv", "-o", tmp_path / "x.json", "--nsamp", "50",
                    "--no-fit-indices", "--ngrid", "11", "--dump-profiles", csv, "-q"], capsys)
    df = pd.read_csv(csv)
    assert df["parameter"].nunique() == 9
    assert len(df) == 9 * 11


def test_default_prior_override(workdir, capsys):
    rc, out, _ = run(["fit", workdir / "m1.txt", workdir / "data.csv", "--dump-partable",
                      "--default-prior", "lambda=normal(0,1)"], capsys)
    df = pd.read_csv(pd.io.common.StringIO(out))
    assert (df[df["op"] == "=~"]["prior"].dropna() == "normal(0,1)").all()


@pytest.mark.parametrize(
    "model, code",
    [
        ("f =~ y1 + nosuch\n", EXIT_USAGE),
        ("f <~ y1 + y2\n", EXIT_USAGE),
        ("f =~ y1 + y2\n", EXIT_USAGE),
    ],
)
def test_error_exit_codes(workdir, capsys, tmp_path, model, code):
    mf = tmp_path / "bad.txt"
    mf.write_text(model)
    rc, _, err = run(["fit", mf, workdir / "data.csv", "-o", tmp_path / "bad.json", "-q"], capsys)
    assert rc == code
    assert err.startswith("error:")


def test_missing_files(workdir, capsys, tmp_path):
    rc, _, err = run(["fit", workdir / "m1.txt", tmp_path / "none.csv"], capsys)
    assert rc == EXIT_USAGE
    rc, _, err = run(["summary", tmp_path / "none.json"], capsys)
    assert rc == EXIT_USAGE


def test_unknown_cluster_column(workdir, capsys, tmp_path):
    rc, _, err = run(["fit", workdir / "m1.txt", workdir / "data.csv", "--cluster", "nope", "-q"], capsys)
    assert rc == EXIT_USAGE


def test_not_positive_definite_exit(capsys, tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=40)
    # three identical indicators: residual variances run off to zero
    fr = pd.DataFrame({"a": x, "b": x, "c": x, "d": rng.normal(size=40)})
    fr.to_csv(tmp_path / "d.csv", index=False)
    (tmp_path / "m.txt").write_text("y =~ a + b + c + d\n")
    rc, _, err = run(["fit", tmp_path / "m.txt", tmp_path / "d.csv", "-o", tmp_path / "o.json", "-q"], capsys)
    assert rc == EXIT_NUMERIC
    assert err.startswith("error:")


def test_console_script_entry_point(workdir):
    r = subprocess.run([sys.executable, "-m", "semlaplace.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.startswith("semlaplace ")
