import json

import numpy as np
import pytest

from semlaplace.fitio import decode_array, dumps, encode_array, fit_from_dict, fit_to_dict, load_fit, loads, save_fit


def test_array_codec_bit_exact(rng):
    a = rng.normal(size=(7, 3)) * 1e-300
    b = decode_array(encode_array(a))
    assert b.shape == a.shape
    assert a.tobytes() == b.tobytes()
    s = decode_array(encode_array(np.float64(2.5)))
    assert s.shape == () and float(s) == 2.5


def test_round_trip_is_bit_identical(small_fit, tmp_path):
    path = tmp_path / "f.fit.json"
    save_fit(small_fit, path)
    back = load_fit(path)
    assert dumps(back, include_run=False) == dumps(small_fit, include_run=False)
    for name in ("theta_star", "H", "L", "x_samp", "deviances", "R_star"):
        assert getattr(back, name).tobytes() == getattr(small_fit, name).tobytes()
    assert back.marg_loglik == small_fit.marg_loglik
    assert back.diagnostics == small_fit.diagnostics


def test_loaded_fit_is_usable(small_fit):
    back = loads(dumps(small_fit))
    np.testing.assert_array_equal(back.posterior_x(), small_fit.posterior_x())
    assert back.summary_text() == small_fit.summary_text()
    a = back.predict("lv", nsamp=3, seed=1)
    b = small_fit.predict("lv", nsamp=3, seed=1)
    np.testing.assert_array_equal(a[0], b[0])


def test_document_layout(small_fit):
    doc = json.loads(dumps(small_fit))
    assert doc["format"] == "semlaplace-fit"
    assert {"model", "config", "data", "parameter_table", "theta_star", "vb", "marginals", "run"} <= set(doc)
    assert "run" not in fit_to_dict(small_fit, include_run=False)


def test_rejects_foreign_document():
    with pytest.raises(ValueError):
        fit_from_dict({"format": "something-else"})


def test_frame_with_missing_and_strings(small_frame):
    from semlaplace import fit_model

    fr = small_frame.copy()
    fr.loc[3, "y2"] = np.nan
    fr["site"] = ["a", "b", "c"] * 25
    fit = fit_model("f =~ y1 + y2 + y3 + y4\ny3 ~~ y4", fr, missing="ml", nsamp=100, fit_indices=False, vb=False)
    back = loads(dumps(fit))
    assert back.frame["site"].tolist() == fr["site"].tolist()
    assert np.isnan(back.frame.loc[3, "y2"])
    assert dumps(back, include_run=False) == dumps(fit, include_run=False)
