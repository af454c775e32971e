import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from cfasign.datagen import (
    Dataset,
    ThresholdSet,
    cholesky_factor,
    discretize_checked,
    discretize_to_ordinal,
    generate_continuous,
    read_csv,
    replicate_seed,
    sample_covariance,
    standard_normal,
    write_csv,
)
from cfasign.estimate_ml import population_layout
from cfasign.exceptions import DataError, NotPositiveDefiniteError
from cfasign.model import one_factor_spec


def test_cholesky_identity():
    np.testing.assert_array_equal(cholesky_factor(np.eye(4)), np.eye(4))


def test_cholesky_2x2_hand_case():
    L = cholesky_factor([[1, 0.49], [0.49, 1]])
    assert L[0, 0] == 1.0
    assert L[1, 0] == pytest.approx(0.49, abs=1e-15)
    assert L[1, 1] == pytest.approx(math.sqrt(1 - 0.49 ** 2), abs=1e-15)
    assert L[0, 1] == 0.0


def test_cholesky_not_pd():
    with pytest.raises(NotPositiveDefiniteError) as info:
        cholesky_factor([[1, 2], [2, 1]])
    assert info.value.index == 1


@settings(max_examples=60, deadline=None)
@given(p=st.integers(1, 6), seed=st.integers(0, 2 ** 32 - 1))
def test_cholesky_round_trip(p, seed):
    rng = np.random.default_rng(seed)
    L = np.tril(rng.uniform(-1, 1, (p, p)))
    L[np.diag_indices(p)] = rng.uniform(0.2, 2.0, p)
    np.testing.assert_allclose(cholesky_factor(L @ L.T), L, atol=1e-8)


def paper_population(loadings=(0.7, 0.7, 0.7)):
    return population_layout(one_factor_spec(len(loadings)), list(loadings))


def test_generate_shape_and_determinism():
    layout, theta = paper_population()
    a = generate_continuous(layout, theta, 200, 12345)
    b = generate_continuous(layout, theta, 200, 12345)
    c = generate_continuous(layout, theta, 200, 12346)
    assert a.values.shape == (200, 3)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_generate_matches_population_moments():
    layout, theta = paper_population()
    x = generate_continuous(layout, theta, 40000, 3).values
    S = np.cov(x, rowvar=False)
    target = np.full((3, 3), 0.49)
    np.fill_diagonal(target, 1.0)
    np.testing.assert_allclose(S, target, atol=0.03)


def test_replicate_seed_is_xor():
    assert replicate_seed(7, 0) == 7
    assert replicate_seed(7, 3) == 4
    assert replicate_seed(2 ** 64 - 1, 1) == 2 ** 64 - 2


def test_standard_normal_finite():
    z = standard_normal(0, 100000)
    assert np.all(np.isfinite(z))
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02


def continuous(values):
    values = np.asarray(values, dtype=float)
    names = tuple(f"v{j + 1}" for j in range(values.shape[1]))
    return Dataset(values, names, (None,) * values.shape[1])


def test_discretize_binary_proportion():
    data = continuous(standard_normal(99, (100000, 1)))
    coded = discretize_to_ordinal(data, ThresholdSet.uniform(data.variables, [0.0]))
    assert set(np.unique(coded.values)) <= {0, 1}
    assert abs(coded.values.mean() - 0.5) < 0.01


def test_discretize_half_open_intervals():
    data = continuous([[-1.0], [0.0], [0.5], [1.0], [2.0]])
    coded = discretize_to_ordinal(data, ThresholdSet.uniform(data.variables, [0.0, 1.0]))
    assert coded.values[:, 0].tolist() == [0, 1, 1, 2, 2]
    assert coded.categories == (3,)


def test_thresholds_must_increase():
    with pytest.raises(DataError, match="not increasing"):
        ThresholdSet(("v1",), ((1.0, -1.0),))


def test_discretize_checked_counts():
    data = continuous(standard_normal(1, (10, 1)))
    with pytest.raises(DataError):
        discretize_checked(data, ThresholdSet.uniform(data.variables, [0.0]), [3])


@pytest.mark.parametrize("thr", [(0.0,), (-0.5, 0.8), (-1.2, -0.1, 0.4, 1.5)])
def test_marginal_frequencies_match_interval_probabilities(thr):
    n = 20000
    data = continuous(standard_normal(2024, (n, 1)))
    coded = discretize_to_ordinal(data, ThresholdSet.uniform(data.variables, thr))
    edges = np.concatenate([[-np.inf], thr, [np.inf]])
    probs = np.diff(norm.cdf(edges))
    freqs = np.bincount(coded.values[:, 0], minlength=len(probs)) / n
    assert np.all(np.abs(freqs - probs) <= 3 * np.sqrt(probs * (1 - probs) / n))


def test_sample_covariance_hand_case():
    np.testing.assert_allclose(sample_covariance(continuous([[0, 0], [2, 2]])), [[2, 2], [2, 2]])


def test_sample_covariance_constant_column():
    S = sample_covariance(continuous([[1, 5], [2, 5], [4, 5]]))
    assert np.all(S[1] == 0) and np.all(S[:, 1] == 0)


def test_sample_covariance_needs_two_rows():
    with pytest.raises(DataError):
        sample_covariance(continuous([[1.0, 2.0]]))


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), ("a",), (None,))
    with pytest.raises(DataError):
        Dataset(np.array([[3]]), ("a",), (2,))


def test_csv_round_trip_continuous():
    layout, theta = paper_population()
    data = generate_continuous(layout, theta, 25, 5)
    buf = io.StringIO()
    write_csv(data, buf)
    buf.seek(0)
    back = read_csv(buf)
    assert back.variables == data.variables
    assert np.array_equal(back.values, data.values)


def test_csv_round_trip_ordinal():
    data = Dataset(np.array([[0, 1], [1, 2]]), ("a", "b"), (2, 3))
    buf = io.StringIO()
    write_csv(data, buf)
    assert buf.getvalue() == "a,b\n0,1\n1,2\n"
    buf.seek(0)
    back = read_csv(buf, {"a": 2, "b": 3})
    assert back.categories == (2, 3)
    assert np.array_equal(back.values, data.values)


def test_reversed_codes():
    data = Dataset(np.array([[0, 1], [1, 2]]), ("a", "b"), (2, 3))
    assert data.reversed_codes().values.tolist() == [[1, 1], [0, 0]]
