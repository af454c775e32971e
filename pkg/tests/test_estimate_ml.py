import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfasign.datagen import generate_continuous, sample_covariance
from cfasign.estimate_ml import (
    EngineDefault,
    FitOptions,
    MlObjective,
    PerLoading,
    UniformLoading,
    default_start_values,
    fit_ml,
    ml_discrepancy,
    numerical_gradient,
    population_layout,
)
from cfasign.exceptions import DataError, NotPositiveDefiniteError
from cfasign.model import IdentificationStrategy, build_parameter_layout, implied_covariance, one_factor_spec
from cfasign.optimize import minimize_box

FIXVAR = IdentificationStrategy.fixed_variance()


def population_sigma(loadings):
    layout, theta = population_layout(one_factor_spec(len(loadings)), list(loadings))
    return implied_covariance(layout, theta)


def sampled_S(loadings, seed, n=200):
    layout, theta = population_layout(one_factor_spec(len(loadings)), list(loadings))
    return sample_covariance(generate_continuous(layout, theta, n, seed))


def random_pd(rng, p):
    a = rng.normal(size=(p, p))
    return a @ a.T + p * np.eye(p) * 0.1


def test_discrepancy_zero_at_S():
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = random_pd(rng, rng.integers(1, 8))
        assert abs(ml_discrepancy(S, S)) <= 1e-12


def test_discrepancy_hand_case():
    assert ml_discrepancy([[2.0]], [[1.0]]) == pytest.approx(1 - math.log(2), abs=1e-12)


def test_discrepancy_singular_sigma():
    with pytest.raises(NotPositiveDefiniteError):
        ml_discrepancy(np.eye(2), [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(DataError):
        ml_discrepancy([[1.0, 1.0], [1.0, 1.0]], np.eye(2))


def test_numerical_gradient_quadratic():
    g = numerical_gradient(lambda t: float(t @ t), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)


def test_numerical_gradient_bad_step():
    with pytest.raises(ValueError):
        numerical_gradient(lambda t: 0.0, np.zeros(2), h=0)


def test_gradient_vanishes_at_population():
    layout, theta = population_layout(one_factor_spec(), [0.7, -0.7, 0.7])
    obj = MlObjective(layout, implied_covariance(layout, theta))
    assert np.max(np.abs(numerical_gradient(obj, theta))) < 1e-6
    assert np.max(np.abs(obj.gradient(theta))) < 1e-12


@pytest.mark.parametrize("strategy", [FIXVAR, IdentificationStrategy.fixed_anchor(("F", "x1"))])
def test_analytic_gradient_matches_numeric(strategy):
    rng = np.random.default_rng(11)
    S = sampled_S([0.7, 0.7, 0.7], 1)
    layout = build_parameter_layout(one_factor_spec(), strategy)
    obj = MlObjective(layout, S)
    for _ in range(20):
        theta = np.zeros(layout.n_free)
        for k, e in enumerate(layout.free_entries):
            if e.role == "loading":
                theta[k] = rng.uniform(-1.5, 1.5)
            elif e.role in ("residual_variance", "factor_variance"):
                theta[k] = rng.uniform(0.2, 1.5)
            else:
                theta[k] = rng.normal()
        num = numerical_gradient(obj, theta)
        ana = obj.gradient(theta)
        assert np.linalg.norm(ana - num) <= 1e-5 * max(1.0, np.linalg.norm(num))


def test_start_policies():
    layout = build_parameter_layout(one_factor_spec(), FIXVAR)
    loads = layout.positions("loading")
    assert default_start_values(layout, UniformLoading(1.0))[loads].tolist() == [1, 1, 1]
    assert default_start_values(layout, UniformLoading(-1.0))[loads].tolist() == [-1, -1, -1]
    assert default_start_values(layout, EngineDefault())[loads].tolist() == [0.5, 0.5, 0.5]
    per = PerLoading({("F", "x1"): -1.0, ("F", "x2"): 1.0, ("F", "x3"): 2.0})
    assert default_start_values(layout, per)[loads].tolist() == [-1, 1, 2]
    S = np.diag([2.0, 4.0, 6.0])
    res = default_start_values(layout, EngineDefault(), S)[layout.positions("residual_variance")]
    assert res.tolist() == [1.0, 2.0, 3.0]


def test_start_moved_inside_bounds():
    spec = one_factor_spec().with_loading_bounds({("F", "x1"): (0.0, math.inf), ("F", "x2"): (-1.0, 1.0)})
    layout = build_parameter_layout(spec, FIXVAR)
    starts = default_start_values(layout, UniformLoading(-1.0))[layout.positions("loading")]
    assert starts[0] > 0
    assert starts[1] == 0.0
    assert starts[2] == -1.0


def test_exact_fit_recovery():
    S = np.full((3, 3), 0.49)
    np.fill_diagonal(S, 1.0)
    fit = fit_ml(one_factor_spec(), FIXVAR, S, 200, FitOptions(UniformLoading(1.0)))
    assert fit.converged
    np.testing.assert_allclose(fit.loading_vector(), [0.7] * 3, atol=1e-6)
    np.testing.assert_allclose(fit.residual_variances, [0.51] * 3, atol=1e-6)
    assert fit.discrepancy < 1e-12


def test_negative_starts_condition2():
    fit = fit_ml(one_factor_spec(), FIXVAR, sampled_S([-0.7] * 3, 4), 200, FitOptions(UniformLoading(-1.0)))
    assert fit.converged
    assert np.all(fit.loading_vector() < 0)


def test_positive_anchor_condition1():
    fit = fit_ml(one_factor_spec(), IdentificationStrategy.fixed_anchor(("F", "x1")), sampled_S([0.7] * 3, 5), 200)
    assert fit.converged
    lam = fit.loading_vector()
    assert lam[0] == 1.0 and np.all(lam[1:] > 0)
    assert fit.factor_variance() > 0


def test_intercepts_take_means():
    layout, theta = population_layout(one_factor_spec(), [0.7] * 3)
    data = generate_continuous(layout, theta, 200, 9)
    fit = fit_ml(one_factor_spec(), FIXVAR, sample_covariance(data), 200, means=data.values.mean(axis=0))
    got = [fit.estimates[("intercept", (x,))] for x in layout.indicators]
    np.testing.assert_allclose(got, data.values.mean(axis=0))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), start=st.sampled_from([-1.0, 0.5, 1.0]),
       truth=st.sampled_from([(0.7, 0.7, 0.7), (-0.7, 0.7, 0.7), (-0.7, -0.7, 0.7)]))
def test_flipped_solution_has_same_discrepancy(seed, start, truth):
    S = sampled_S(list(truth), seed)
    fit = fit_ml(one_factor_spec(), FIXVAR, S, 200, FitOptions(UniformLoading(start)))
    obj = MlObjective(fit.layout, S)
    flipped = fit.theta.copy()
    flipped[fit.layout.positions("loading")] *= -1
    assert abs(obj(flipped) - fit.discrepancy) <= 1e-12
    assert fit.discrepancy <= fit.start_discrepancy


def test_lower_bound_respected():
    spec = one_factor_spec().with_loading_bounds({k: (0.0, math.inf) for k in one_factor_spec().loadings})
    for seed in range(20):
        fit = fit_ml(spec, FIXVAR, sampled_S([-0.7, 0.7, 0.7], seed), 200)
        assert np.all(fit.loading_vector() >= 0)


@pytest.mark.parametrize("truth", [(0.7, 0.7, 0.7), (-0.7, -0.7, -0.7), (-0.7, 0.7, 0.7), (-0.7, -0.7, 0.7)])
def test_anchor_propagates_covariance_sign(truth):
    S = population_sigma(truth)
    fit = fit_ml(one_factor_spec(), IdentificationStrategy.fixed_anchor(("F", "x1")), S, 200)
    assert fit.converged
    lam = fit.loading_vector()
    assert np.all(np.sign(lam[1:]) == np.sign(S[0, 1:]))


def test_minimize_box_quadratic_with_bound():
    target = np.array([1.0, -2.0, 3.0])
    f = lambda x: float(np.sum((x - target) ** 2))
    g = lambda x: 2 * (x - target)
    res = minimize_box(f, g, np.zeros(3), np.array([-np.inf, 0.0, -np.inf]), np.array([np.inf, np.inf, 2.0]))
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 0.0, 2.0], atol=1e-8)
    assert res.active.tolist() == [False, True, True]


def test_minimize_box_rosenbrock():
    from scipy.optimize import rosen, rosen_der
    res = minimize_box(rosen, rosen_der, np.array([-1.2, 1.0]), np.full(2, -np.inf), np.full(2, np.inf), max_iter=2000)
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)
