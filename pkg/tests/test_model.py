import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfasign.exceptions import ModelError, ModelSyntaxError
from cfasign.estimate_ml import UniformLoading, population_layout
from cfasign.model import (
    IdentificationStrategy,
    build_parameter_layout,
    format_model,
    implied_covariance,
    one_factor_spec,
    parse_model_text,
    validate_spec,
)


def test_minimal_grammar():
    spec = parse_model_text("F =~ x1 + x2 + x3")
    assert spec.factors == ("F",)
    assert spec.indicator_names == ["x1", "x2", "x3"]
    assert all(v is None for v in spec.loadings.values())
    assert all(v is None for v in spec.residual_variances.values())
    assert all(v is None for v in spec.intercepts.values())


def test_start_and_fixvar_directives():
    spec = parse_model_text("F =~ x1 + x2 + x3 \n start F.x1 = -1 \n fixvar F = 1")
    assert spec.loading_starts == {("F", "x1"): -1.0}
    assert spec.factor_variances["F"] == 1.0


def test_syntax_error_reports_line():
    with pytest.raises(ModelSyntaxError, match="line 1"):
        parse_model_text("F =~ x1 + \n")


def test_other_directives_and_comments():
    text = """
    # two factors
    F =~ a + b + c
    G =~ d + e + f   # trailing comment
    fix F.a = 1
    bound G.e lower 0
    bound G.e upper 2
    fixcov F G = 0
    fixres d = 0.3
    ordinal a 3
    """
    spec = parse_model_text(text)
    assert spec.loadings[("F", "a")] == 1.0
    assert spec.loading_bounds[("G", "e")] == (0.0, 2.0)
    assert spec.factor_covariances[("F", "G")] == 0.0
    assert spec.residual_variances["d"] == 0.3
    assert spec.indicator("a").categories == 3


@pytest.mark.parametrize("text, match", [
    ("F =~ x1 + x2\nstart F.x9 = 1", "x9"),
    ("F =~ x1 + x2\nbound F.x1 lower 1\nbound F.x1 upper 0", "lower 1.0 > upper"),
    ("F =~ x1 + x2\nfix F.x1 = 1\nfix F.x1 = 2", "duplicate"),
    ("F =~ x1 + x2\nwhatever", "line 2"),
])
def test_parse_errors(text, match):
    with pytest.raises(ModelError, match=match):
        parse_model_text(text)


def test_validate_clean_spec():
    assert validate_spec(one_factor_spec()) == []


def test_validate_fixed_with_start():
    spec = one_factor_spec()
    loadings = dict(spec.loadings)
    loadings[("F", "x1")] = 1.0
    from dataclasses import replace
    bad = replace(spec, loadings=loadings, loading_starts={("F", "x1"): 0.5})
    diags = validate_spec(bad)
    assert len(diags) == 1
    assert diags[0].message == "fixed parameter has start value"


def test_validate_empty_factor():
    from dataclasses import replace
    spec = replace(one_factor_spec(), factors=("F", "G"))
    diags = validate_spec(spec)
    assert [d.code for d in diags] == ["empty_factor"]


def test_layout_fixed_variance_counts():
    layout = build_parameter_layout(one_factor_spec(), IdentificationStrategy.fixed_variance())
    roles = [e.role for e in layout.free_entries]
    assert roles.count("loading") == 3
    assert roles.count("residual_variance") == 3
    assert roles.count("intercept") == 3
    assert "factor_variance" not in roles
    fv = [e for e in layout.entries if e.role == "factor_variance"][0]
    assert fv.fixed == 1.0


def test_layout_fixed_anchor_counts():
    layout = build_parameter_layout(one_factor_spec(), IdentificationStrategy.fixed_anchor(("F", "x1")))
    roles = [e.role for e in layout.free_entries]
    anchor = [e for e in layout.entries if e.address == ("F", "x1")][0]
    assert anchor.fixed == 1.0
    assert "factor_variance" in roles
    # 2 loadings + factor variance + 3 residuals, plus 3 intercepts
    assert len(roles) - roles.count("intercept") == 6
    assert roles.count("intercept") == 3


def test_layout_unknown_anchor():
    with pytest.raises(ModelError, match="unknown anchor"):
        build_parameter_layout(one_factor_spec(), IdentificationStrategy.fixed_anchor(("F", "x9")))


def test_layout_anchor_conflicts():
    with pytest.raises(ModelError):
        IdentificationStrategy.fixed_anchor(("F", "x1"), ("F", "x2"))
    spec = parse_model_text("F =~ x1 + x2 + x3\nfixvar F = 1")
    with pytest.raises(ModelError, match="both"):
        build_parameter_layout(spec, IdentificationStrategy.fixed_anchor(("F", "x1")))


def test_layout_deterministic():
    spec = parse_model_text("F =~ a + b\nG =~ c + d\nstart G.d = -1")
    s = IdentificationStrategy.fixed_variance()
    assert build_parameter_layout(spec, s) == build_parameter_layout(spec, s)


def test_implied_covariance_paper_population():
    layout, theta = population_layout(one_factor_spec(), [0.7, 0.7, 0.7])
    sigma = implied_covariance(layout, theta)
    expected = np.full((3, 3), 0.49)
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(sigma, expected, atol=1e-15)
    layout, theta_neg = population_layout(one_factor_spec(), [-0.7, -0.7, -0.7])
    assert np.array_equal(implied_covariance(layout, theta_neg), sigma)


def test_implied_covariance_zero_loadings():
    layout, theta = population_layout(one_factor_spec(), [0.0, 0.0, 0.0], [0.3, 0.4, 0.5])
    np.testing.assert_array_equal(implied_covariance(layout, theta), np.diag([0.3, 0.4, 0.5]))


two_factor = parse_model_text("F =~ a + b + c\nG =~ d + e + f")
loading_values = st.floats(-2, 2, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    lam=st.lists(loading_values, min_size=6, max_size=6),
    cov=st.floats(-0.9, 0.9),
    res=st.lists(st.floats(0.01, 2), min_size=6, max_size=6),
    which=st.sampled_from(["F", "G"]),
)
def test_sign_flip_invariance(lam, cov, res, which):
    layout = build_parameter_layout(two_factor, IdentificationStrategy.fixed_variance(), UniformLoading(0.0))
    theta = np.zeros(layout.n_free)
    it = iter(lam)
    for k, e in enumerate(layout.free_entries):
        if e.role == "loading":
            theta[k] = next(it)
        elif e.role == "factor_covariance":
            theta[k] = cov
        elif e.role == "residual_variance":
            theta[k] = res[layout.indicators.index(e.address[0])]
    flipped = theta.copy()
    for k, e in enumerate(layout.free_entries):
        if (e.role == "loading" and e.address[0] == which) or e.role == "factor_covariance":
            flipped[k] = -flipped[k]
    a = implied_covariance(layout, theta)
    b = implied_covariance(layout, flipped)
    assert np.array_equal(a, b)
    assert np.array_equal(a, a.T)
    assert np.linalg.eigvalsh(a).min() > -1e-12


names = st.sampled_from(["x1", "x2", "x3", "x4", "y1", "y2", "item_a"])
numbers = st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 6))


@settings(max_examples=80, deadline=None)
@given(
    inds=st.lists(names, min_size=2, max_size=5, unique=True),
    start=st.one_of(st.none(), numbers),
    fixed=st.one_of(st.none(), numbers),
    lower=st.one_of(st.none(), st.floats(-3, 0).map(lambda v: round(v, 4))),
    fixvar=st.one_of(st.none(), st.floats(0.1, 4).map(lambda v: round(v, 4))),
    cats=st.one_of(st.none(), st.integers(2, 7)),
)
def test_parse_serialize_round_trip(inds, start, fixed, lower, fixvar, cats):
    lines = ["F =~ " + " + ".join(inds)]
    if fixed is not None:
        lines.append(f"fix F.{inds[0]} = {fixed!r}")
    if start is not None:
        lines.append(f"start F.{inds[-1]} = {start!r}")
    if lower is not None:
        lines.append(f"bound F.{inds[-1]} lower {lower!r}")
    if fixvar is not None:
        lines.append(f"fixvar F = {fixvar!r}")
    if cats is not None:
        lines.append(f"ordinal {inds[0]} {cats}")
    spec = parse_model_text("\n".join(lines))
    again = parse_model_text(format_model(spec))
    assert again == spec
    assert parse_model_text(format_model(again)) == again


def test_round_trip_keeps_infinite_bound():
    spec = parse_model_text("F =~ a + b\nbound F.a upper 0")
    assert spec.loading_bounds[("F", "a")] == (-math.inf, 0.0)
    assert parse_model_text(format_model(spec)) == spec
