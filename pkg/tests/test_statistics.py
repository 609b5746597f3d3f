import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedgtst.errors import ConfigError, DimensionError, NumericalError
from fedgtst.statistics import (
    beta_coefficients,
    cross_client_stats,
    maintext_round_decrement,
    optimal_learning_rate,
    optimal_learning_rate_sum_form,
    optimal_round_decrement,
    round_bound_rhs,
)

finite_vecs = hnp.arrays(
    np.float64,
    shape=st.integers(1, 6),
    elements=st.floats(-10, 10, allow_nan=False, allow_infinity=False),
)


def _stats(vectors, round=1):
    return cross_client_stats([(k, np.asarray(v, dtype=float)) for k, v in enumerate(vectors)], round)


def test_identical_jacobians_zero_variance():
    j = np.array([0.3, -0.7, 1.1])
    s = _stats([j, j, j, j])
    assert s.variance == 0.0
    assert s.avg_norm == pytest.approx(np.linalg.norm(j), rel=1e-15)


def test_hand_computed_two_client_example():
    s = _stats([[1.0, 0.0], [0.0, 1.0]])
    assert s.avg_sq_norm == 0.5
    assert s.variance == pytest.approx(0.5, abs=1e-15)
    assert s.client_norms == {0: 1.0, 1: 1.0}


def test_single_client_zero_variance():
    s = _stats([[2.0, -1.0]])
    assert s.variance == 0.0
    assert s.client_count == 1


def test_empty_and_mismatched_inputs():
    with pytest.raises(ConfigError):
        cross_client_stats([], 0)
    with pytest.raises(DimensionError):
        cross_client_stats([(0, np.zeros(2)), (1, np.zeros(3))], 0)


@given(st.lists(finite_vecs, min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_variance_nonnegative_and_norm_inequality(vecs):
    dim = len(vecs[0])
    vecs = [np.resize(v, dim) for v in vecs]
    s = _stats(vecs)
    assert s.variance >= 0.0
    assert s.avg_sq_norm <= s.mean_sq_client_norm + 1e-9


def test_variance_zero_iff_identical():
    base = np.array([1.0, 2.0])
    assert _stats([base, base + 1e-12]).variance < 1e-9
    assert _stats([base, base + 0.1]).variance > 1e-4


def test_beta_hand_values():
    c = beta_coefficients(0.5, alpha=2.0)
    assert c.beta2 == 0.25 and c.beta1 == 0.25
    z = beta_coefficients(0.0, alpha=1.0)
    assert z.beta1 == 0.0 and z.beta2 == 0.0
    boundary = beta_coefficients(2.0, alpha=1.0)
    assert boundary.beta1 == 0.0
    assert not boundary.beta1_positive


@given(lam=st.floats(0, 5), alpha=st.floats(0.01, 50))
@settings(max_examples=100, deadline=None)
def test_beta_invariants(lam, alpha):
    c = beta_coefficients(lam, alpha)
    assert c.beta2 == alpha * lam * lam / 2.0
    assert c.beta1 == lam - c.beta2
    assert c.beta1_positive == (0 < lam and lam * alpha / 2.0 < 1.0)


def test_beta_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        beta_coefficients(0.1, alpha=0.0)
    with pytest.raises(ConfigError):
        beta_coefficients(-0.1, alpha=1.0)


def test_optimal_rate_symmetric_case():
    j = np.array([0.5, 0.5])
    s = _stats([j, j, j])
    assert optimal_learning_rate(s, alpha=4.0) == pytest.approx(0.25, rel=1e-15)


def test_optimal_rate_hand_example():
    s = _stats([[1.0, 0.0], [0.0, 1.0]])
    assert optimal_learning_rate(s, alpha=1.0) == pytest.approx(0.5, rel=1e-15)


def test_optimal_rate_zero_jacobians_raises():
    s = _stats([np.zeros(3), np.zeros(3)])
    with pytest.raises(NumericalError):
        optimal_learning_rate(s, alpha=1.0)


@given(
    st.lists(finite_vecs, min_size=1, max_size=6),
    st.floats(0.1, 20),
    st.floats(0.1, 4),
)
@settings(max_examples=150, deadline=None)
def test_optimal_rate_forms_agree_and_bounds(vecs, alpha, scale):
    dim = len(vecs[0])
    vecs = [np.resize(v, dim) for v in vecs]
    s = _stats(vecs)
    if s.variance + s.avg_sq_norm <= 1e-20:
        return
    lam = optimal_learning_rate(s, alpha)
    lam_sum = optimal_learning_rate_sum_form(s, alpha)
    assert lam == pytest.approx(lam_sum, rel=1e-12)
    assert 0 < lam <= 1.0 / alpha + 1e-15
    # scaling every Jacobian by c leaves norms scaled by c, rate by 1/... rate
    # is scale-free in J only through the ratio, so J -> c J gives same rate
    s2 = _stats([scale * v for v in vecs])
    assert optimal_learning_rate(s2, alpha) == pytest.approx(lam, rel=1e-9)


def test_scaling_homogeneity():
    vecs = [np.array([1.0, 2.0]), np.array([-0.5, 0.3])]
    s1 = _stats(vecs)
    c = 3.0
    s2 = _stats([c * v for v in vecs])
    assert s2.avg_norm == pytest.approx(c * s1.avg_norm, rel=1e-12)
    assert s2.variance == pytest.approx(c * c * s1.variance, rel=1e-12)


def test_round_bound_rhs_zero_rate_is_identity():
    s = _stats([[1.0, 0.0], [0.0, 1.0]])
    assert round_bound_rhs(7.5, 0.0, 2.0, s) == 7.5


def test_round_bound_rhs_optimal_symmetric_drop():
    # sigma^2 = 0: at the optimal rate the bound is prev - ||J||^2/(2 alpha)
    j = np.array([0.6, -0.8])
    s = _stats([j, j])
    alpha = 2.0
    lam = optimal_learning_rate(s, alpha)
    rhs = round_bound_rhs(3.0, lam, alpha, s)
    assert rhs == pytest.approx(3.0 - 1.0 / (2 * alpha), rel=1e-12)
    assert rhs < 3.0


def test_round_bound_rhs_grid_never_beats_optimal_rate():
    rng = np.random.default_rng(5)
    for _ in range(20):
        vecs = [rng.standard_normal(4) for _ in range(5)]
        s = _stats(vecs)
        alpha = float(rng.uniform(0.5, 5.0))
        lam_star = optimal_learning_rate(s, alpha)
        best = round_bound_rhs(1.0, lam_star, alpha, s)
        grid = np.linspace(1e-9, 2.0 / alpha, 1000)
        values = [round_bound_rhs(1.0, lam, alpha, s) for lam in grid]
        assert min(values) >= best - 1e-9


def test_decrement_forms_ratio_is_four():
    rng = np.random.default_rng(6)
    for _ in range(25):
        s = _stats([rng.standard_normal(3) for _ in range(4)])
        alpha = float(rng.uniform(0.2, 8.0))
        a = optimal_round_decrement(s, alpha)
        m = maintext_round_decrement(s, alpha)
        assert m == pytest.approx(4.0 * a, rel=1e-12)


def test_optimal_decrement_matches_bound_drop():
    # algebraic identity: prev - rhs(lam*) equals the closed-form decrement
    rng = np.random.default_rng(7)
    for _ in range(25):
        s = _stats([rng.standard_normal(3) for _ in range(4)])
        alpha = float(rng.uniform(0.2, 8.0))
        lam_star = optimal_learning_rate(s, alpha)
        drop = 1.0 - round_bound_rhs(1.0, lam_star, alpha, s)
        assert drop == pytest.approx(optimal_round_decrement(s, alpha), rel=1e-12)
