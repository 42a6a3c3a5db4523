import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from semlaplace.partable import (
    ConstraintConflict,
    InadmissibleValue,
    Unidentified,
    UnknownVariable,
    build_parameter_table,
    prior_logdensity_theta,
)
from semlaplace.syntax import parse_model, parse_prior_string

PD_COLS = ["y1", "y2", "y3", "y4", "y5", "y6", "y7", "y8", "x1", "x2", "x3"]


def table_of(src, cols, **kw):
    return build_parameter_table(parse_model(src), cols, **kw)


@pytest.fixture(scope="module")
def pd_table(pd_model):
    return table_of(pd_model, PD_COLS)


COV_MODEL = """
f =~ a + b + c + d
g =~ e + h + i
a ~~ b
f ~~ g
"""
COV_COLS = list("abcdehi")


def test_pd_counts(pd_table):
    assert pd_table.m == 31
    assert pd_table.m_full == 31
    assert pd_table.row_by_name("ind60=~x1").fixed_value == 1.0
    assert pd_table.row_by_name("ind60=~x1").free == 0


def test_default_priors(pd_table):
    assert str(pd_table.row_by_name("ind60=~x2").prior) == "normal(0,10)"
    assert str(pd_table.row_by_name("x1~~x1").prior) == "gamma(1,.5)[sd]"
    assert str(pd_table.row_by_name("y1~~y5").prior) == "beta(1,1)"


def test_transforms(pd_table):
    assert pd_table.row_by_name("ind60=~x2").transform == "identity"
    assert pd_table.row_by_name("x1~~x1").transform == "log"
    assert pd_table.row_by_name("y1~~y5").transform == "atanh"


def test_round_trip_maps(pd_table, rng):
    for _ in range(20):
        th = pd_table.theta_start + rng.normal(0, 0.5, pd_table.m)
        x = pd_table.pars_to_x(th)
        np.testing.assert_allclose(pd_table.x_to_pars(x), th, atol=1e-12)


def test_covariance_is_sd_product_times_rho():
    t = table_of(COV_MODEL, COV_COLS)
    th = t.theta_start.copy()
    x = t.pars_to_x(th)
    ab = t.row_by_name("a~~b")
    va = x[t.row_by_name("a~~a").full_index]
    vb = x[t.row_by_name("b~~b").full_index]
    rho = np.tanh(th[ab.free - 1])
    assert x[ab.full_index] == pytest.approx(np.sqrt(va * vb) * rho)


def test_jacobian_matches_fd(rng):
    t = table_of(COV_MODEL, COV_COLS)
    th = t.theta_start + rng.normal(0, 0.3, t.m)
    J = t.jacobian(th).toarray()
    h = 1e-6
    fd = np.column_stack(
        [(t.pars_to_x(th + h * e) - t.pars_to_x(th - h * e)) / (2 * h) for e in np.eye(t.m)]
    )
    np.testing.assert_allclose(J, fd, atol=1e-7)
    gx = rng.normal(size=t.m_full)
    np.testing.assert_allclose(t.jt_dot(th, gx), J.T @ gx, atol=1e-10)


def test_prior_gradient_matches_fd(pd_table, rng):
    th = pd_table.theta_start + rng.normal(0, 0.3, pd_table.m)
    g = pd_table.grad_log_prior(th)
    h = 1e-6
    fd = np.array([(pd_table.log_prior(th + h * e) - pd_table.log_prior(th - h * e)) / (2 * h)
                   for e in np.eye(pd_table.m)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize(
    "text, lo, hi",
    [
        ("normal(0.5,2)", -20, 20),
        ("gamma(1,.5)[sd]", -30, 12),
        ("gamma(2,1)[var]", -30, 8),
        ("beta(1,1)", -20, 20),
        ("beta(3,2)", -20, 20),
    ],
)
def test_theta_prior_density_normalised(text, lo, hi):
    p = parse_prior_string(text)
    val, _ = integrate.quad(lambda t: np.exp(prior_logdensity_theta(t, p)[0]), lo, hi, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_prior_sampler_matches_density(rng):
    t = table_of("f =~ a + prior('normal(2,0.5)')*b + c\na ~~ prior('gamma(2,1)[var]')*a", list("abc"))
    draws = t.sample_prior_theta(40000, rng)
    k = t.row_by_name("f=~b").free - 1
    assert draws[:, k].mean() == pytest.approx(2.0, abs=0.02)
    k = t.row_by_name("a~~a").free - 1
    assert np.exp(draws[:, k]).mean() == pytest.approx(2.0, abs=0.05)


def test_labels_share_reduced_index():
    t = table_of("f =~ a + l*b + l*c", list("abc"))
    assert t.m == t.m_full - 1
    assert t.row_by_name("f=~b").free == t.row_by_name("f=~c").free
    x = t.pars_to_x(t.theta_start)
    assert x[t.row_by_name("f=~b").full_index] == x[t.row_by_name("f=~c").full_index]


def test_defined_parameters():
    t = table_of("y ~ a*x\nz ~ b*y\nab := a*b", ["x", "y", "z"])
    x = t.pars_to_x(t.theta_start)
    env = t.label_values(x)
    assert t.defined_values(x)["ab"] == pytest.approx(env["a"] * env["b"])


def test_std_lv_frees_markers():
    t = table_of("f =~ a + b + c", list("abc"), std_lv=True)
    assert t.row_by_name("f=~a").free > 0
    assert t.row_by_name("f~~f").fixed_value == 1.0


def test_multigroup_equal_loadings(pd_model):
    t1 = table_of(pd_model, PD_COLS, n_groups=2)
    t2 = table_of(pd_model, PD_COLS, n_groups=2, group_equal=("loadings",))
    assert t1.m == 62
    assert t2.m == 62 - 8


def test_meanstructure_adds_intercepts(pd_model):
    t = table_of(pd_model, PD_COLS, meanstructure=True)
    assert t.m == 31 + 11
    assert t.row_by_name("x1~1").transform == "identity"


def test_two_level_blocks():
    src = "level: 1\nf =~ a + b + c\nlevel: 2\nfb =~ a + b + c"
    t = table_of(src, list("abc"))
    assert t.n_levels == 2
    assert len(t.blocks) == 2


@pytest.mark.parametrize(
    "src, cols, exc",
    [
        ("f =~ a + zz", ["a"], UnknownVariable),
        ("f =~ a + b", ["a", "b"], Unidentified),
        ("f =~ a + b + c\na ~~ -1*a", list("abc"), InadmissibleValue),
        ("f =~ a + 1*b + c\nf =~ 2*b", list("abc"), ConstraintConflict),
    ],
)
def test_table_errors(src, cols, exc):
    with pytest.raises(exc):
        table_of(src, cols)


def test_inadmissible_x_rejected(pd_table):
    x = pd_table.pars_to_x(pd_table.theta_start)
    x[pd_table.row_by_name("x1~~x1").full_index] = -1.0
    with pytest.raises(InadmissibleValue):
        pd_table.x_to_pars(x)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_x_round_trip_property(vals):
    t = table_of(COV_MODEL, COV_COLS)
    th = t.theta_start.copy()
    th[: len(vals)] += np.array(vals)[: t.m]
    np.testing.assert_allclose(t.x_to_pars(t.pars_to_x(th)), th, atol=1e-9)
