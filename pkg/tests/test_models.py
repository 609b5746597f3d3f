import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgtst.errors import ConfigError, DimensionError
from fedgtst.models import (
    ANALYTIC,
    FINITE_DIFFERENCE,
    LINEAR,
    LOGISTIC,
    MLP,
    Batch,
    ModelSpec,
    accuracy,
    alpha_certified,
    gradient,
    hvp,
    init_weights,
    loss,
    smoothness_constant,
)
from oracles import fd_gradient, random_batch

RNG = np.random.default_rng(1234)

SPECS = [
    ModelSpec(LINEAR, input_dim=4),
    ModelSpec(LINEAR, input_dim=3, bias=False),
    ModelSpec(LOGISTIC, input_dim=5, num_classes=3),
    ModelSpec(LOGISTIC, input_dim=2, num_classes=4, bias=False),
    ModelSpec(MLP, input_dim=4, num_classes=3, hidden=(6,), activation="tanh"),
    ModelSpec(MLP, input_dim=3, num_classes=3, hidden=(5, 4), activation="relu"),
]


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(LINEAR, input_dim=3, num_classes=2)
    with pytest.raises(ConfigError):
        ModelSpec(LOGISTIC, input_dim=3, num_classes=1)
    with pytest.raises(ConfigError):
        ModelSpec(MLP, input_dim=3, num_classes=3, activation="sigmoid")
    with pytest.raises(ConfigError):
        ModelSpec(LOGISTIC, input_dim=3, num_classes=2, split_index=99)
    with pytest.raises(ConfigError):
        ModelSpec(LINEAR, input_dim=3, hidden=(4,))


def test_total_dim_counts_parameters():
    # linear with bias: m weights + 1 bias
    assert ModelSpec(LINEAR, input_dim=3).total_dim == 4
    assert ModelSpec(LINEAR, input_dim=3, bias=False).total_dim == 3
    assert ModelSpec(LOGISTIC, input_dim=3, num_classes=4).total_dim == 16
    # mlp 4 -> 6 -> 3 with biases: (6*4+6) + (3*6+3)
    assert ModelSpec(MLP, input_dim=4, num_classes=3, hidden=(6,)).total_dim == 51


def test_mlp_default_split_is_last_layer():
    spec = ModelSpec(MLP, input_dim=4, num_classes=3, hidden=(6,))
    assert spec.split_index == spec.total_dim - (3 * 6 + 3)
    assert ModelSpec(LOGISTIC, input_dim=4, num_classes=3).split_index == 0


def test_init_weights_deterministic_and_bounded():
    spec = ModelSpec(LOGISTIC, input_dim=7, num_classes=3)
    w1 = init_weights(spec, seed=9, scale=0.25)
    w2 = init_weights(spec, seed=9, scale=0.25)
    assert np.array_equal(w1, w2)
    assert np.abs(w1).max() <= 0.25
    assert not np.array_equal(w1, init_weights(spec, seed=10, scale=0.25))


def test_init_weights_zero_scale():
    spec = ModelSpec(LINEAR, input_dim=5)
    assert np.array_equal(init_weights(spec, 3, 0.0), np.zeros(6))


def test_loss_zero_model_zero_targets():
    spec = ModelSpec(LINEAR, input_dim=2)
    batch = Batch([[1.0, 2.0], [3.0, -1.0]], [0.0, 0.0])
    assert loss(spec, np.zeros(3), batch) == 0.0


def test_loss_uniform_softmax_is_log_c():
    for c in (2, 4, 10):
        spec = ModelSpec(LOGISTIC, input_dim=3, num_classes=c)
        batch = random_batch(spec, np.random.default_rng(c), n=8)
        assert loss(spec, np.zeros(spec.total_dim), batch) == pytest.approx(np.log(c), abs=1e-12)


def test_loss_hand_computed_squared_error():
    # prediction 1*2 + 0 = 2 against target 1: (2-1)^2 = 1
    spec = ModelSpec(LINEAR, input_dim=1)
    batch = Batch([[2.0]], [1.0])
    assert loss(spec, np.array([1.0, 0.0]), batch) == pytest.approx(1.0, abs=1e-15)


def test_gradient_hand_computed():
    # d/dw (wx+b-y)^2 = 2(wx+b-y)x = 4, d/db = 2(wx+b-y) = 2
    spec = ModelSpec(LINEAR, input_dim=1)
    batch = Batch([[2.0]], [1.0])
    g = gradient(spec, np.array([1.0, 0.0]), batch)
    assert g == pytest.approx([4.0, 2.0], abs=1e-15)


def test_gradient_zero_at_stationary_point():
    # least-squares solution of a tiny system is a stationary point
    spec = ModelSpec(LINEAR, input_dim=2)
    x = RNG.standard_normal((20, 2))
    y = x @ [1.5, -2.0] + 0.3
    batch = Batch(x, y)
    g = gradient(spec, np.array([1.5, -2.0, 0.3]), batch)
    assert np.linalg.norm(g) < 1e-8


def test_gradient_matches_finite_differences_100_points():
    failures = []
    for trial in range(100):
        spec = SPECS[trial % len(SPECS)]
        rng = np.random.default_rng(5000 + trial)
        batch = random_batch(spec, rng)
        w = 0.7 * rng.standard_normal(spec.total_dim)
        g = gradient(spec, w, batch)
        ref = fd_gradient(spec, w, batch)
        rel = np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-12)
        if rel >= 1e-5:
            failures.append((trial, spec.kind, rel))
    assert not failures, failures


def test_hvp_linear_closed_form():
    spec = ModelSpec(LINEAR, input_dim=3, bias=False)
    x = RNG.standard_normal((9, 3))
    batch = Batch(x, RNG.standard_normal(9))
    v = RNG.standard_normal(3)
    w = RNG.standard_normal(3)
    expect = (2.0 / 9) * x.T @ (x @ v)
    got = hvp(spec, w, batch, v, ANALYTIC)
    assert got == pytest.approx(expect, rel=1e-12)


def test_hvp_zero_direction():
    spec = ModelSpec(LOGISTIC, input_dim=4, num_classes=3)
    batch = random_batch(spec, RNG)
    w = RNG.standard_normal(spec.total_dim)
    assert np.array_equal(hvp(spec, w, batch, np.zeros_like(w), ANALYTIC), np.zeros_like(w))


@pytest.mark.parametrize("spec", [s for s in SPECS if s.kind != MLP], ids=str)
def test_hvp_analytic_matches_finite_difference(spec):
    rng = np.random.default_rng(echo := hash(spec.kind) % 1000)
    batch = random_batch(spec, rng, n=15)
    w = 0.5 * rng.standard_normal(spec.total_dim)
    v = rng.standard_normal(spec.total_dim)
    a = hvp(spec, w, batch, v, ANALYTIC)
    f = hvp(spec, w, batch, v, FINITE_DIFFERENCE)
    assert np.linalg.norm(a - f) / max(np.linalg.norm(a), 1e-12) < 1e-6


def test_hvp_analytic_rejected_for_mlp():
    spec = ModelSpec(MLP, input_dim=3, num_classes=3, hidden=(4,))
    batch = random_batch(spec, RNG)
    w = np.zeros(spec.total_dim)
    with pytest.raises(ConfigError):
        hvp(spec, w, batch, w, ANALYTIC)


def test_smoothness_single_sample_no_bias():
    spec = ModelSpec(LINEAR, input_dim=1, bias=False)
    assert smoothness_constant(spec, Batch([[1.0]], [0.0])) == pytest.approx(2.0, rel=1e-9)


def test_smoothness_scales_quadratically():
    spec = ModelSpec(LINEAR, input_dim=3)
    x = RNG.standard_normal((30, 3))
    y = RNG.standard_normal(30)
    a1 = smoothness_constant(spec, Batch(x, y))
    a3 = smoothness_constant(spec, Batch(3.0 * x, y))
    # bias column does not scale, so compare against the no-bias model
    spec_nb = ModelSpec(LINEAR, input_dim=3, bias=False)
    b1 = smoothness_constant(spec_nb, Batch(x, y))
    b3 = smoothness_constant(spec_nb, Batch(3.0 * x, y))
    assert b3 == pytest.approx(9.0 * b1, rel=1e-9)
    assert a3 <= 9.0 * a1 + 1e-9  # augmented version is sub-quadratic


def test_mlp_estimate_below_certified_bound_on_linear_case():
    # an mlp with no hidden layers is exactly the softmax linear model, so
    # the empirical Lipschitz estimate must sit below the certified constant
    rng = np.random.default_rng(77)
    as_mlp = ModelSpec(MLP, input_dim=4, num_classes=3, hidden=())
    as_logistic = ModelSpec(LOGISTIC, input_dim=4, num_classes=3)
    batch = random_batch(as_logistic, rng, n=25)
    certified = smoothness_constant(as_logistic, batch)
    estimate = smoothness_constant(as_mlp, batch)
    assert not alpha_certified(as_mlp) and alpha_certified(as_logistic)
    assert estimate <= certified + 1e-9


def test_gradient_lipschitz_with_certified_alpha():
    spec = ModelSpec(LINEAR, input_dim=4)
    rng = np.random.default_rng(31)
    batch = random_batch(spec, rng, n=40)
    alpha = smoothness_constant(spec, batch)
    worst = 0.0
    for _ in range(1000):
        w1 = rng.standard_normal(spec.total_dim)
        w2 = rng.standard_normal(spec.total_dim)
        lhs = np.linalg.norm(gradient(spec, w1, batch) - gradient(spec, w2, batch))
        worst = max(worst, lhs / np.linalg.norm(w1 - w2))
    assert worst <= alpha * (1 + 1e-9)


@pytest.mark.parametrize("kind,classes", [(LINEAR, 1), (LOGISTIC, 3)])
@given(t=st.floats(0.0, 1.0))
@settings(max_examples=25, deadline=None)
def test_loss_convex_along_segments(kind, classes, t):
    spec = ModelSpec(kind, input_dim=3, num_classes=classes)
    rng = np.random.default_rng(17)
    batch = random_batch(spec, rng, n=10)
    w1 = rng.standard_normal(spec.total_dim)
    w2 = rng.standard_normal(spec.total_dim)
    lhs = loss(spec, t * w1 + (1 - t) * w2, batch)
    rhs = t * loss(spec, w1, batch) + (1 - t) * loss(spec, w2, batch)
    assert lhs <= rhs + 1e-10


def test_accuracy_perfect_fit():
    spec = ModelSpec(LOGISTIC, input_dim=2, num_classes=2)
    batch = Batch([[5.0, 0.0], [-5.0, 0.0]], [0, 1])
    w = np.array([1.0, 0.0, -1.0, 0.0, 0.0, 0.0])  # class-0 row favors +x
    assert accuracy(spec, w, batch) == 1.0


def test_accuracy_zero_weights_tie_breaks_to_class_zero():
    spec = ModelSpec(LOGISTIC, input_dim=3, num_classes=4)
    rng = np.random.default_rng(8)
    y = rng.integers(0, 4, size=50)
    batch = Batch(rng.standard_normal((50, 3)), y)
    assert accuracy(spec, np.zeros(spec.total_dim), batch) == pytest.approx(np.mean(y == 0))


def test_accuracy_rejects_regression():
    spec = ModelSpec(LINEAR, input_dim=2)
    with pytest.raises(ConfigError):
        accuracy(spec, np.zeros(3), Batch([[1.0, 2.0]], [0.5]))


def test_dimension_mismatch_raises():
    spec = ModelSpec(LOGISTIC, input_dim=3, num_classes=2)
    batch = random_batch(spec, RNG)
    with pytest.raises(DimensionError):
        loss(spec, np.zeros(5), batch)
    with pytest.raises(DimensionError):
        gradient(spec, np.zeros(5), batch)


def test_batch_rejects_nonfinite():
    from fedgtst.errors import NumericalError

    with pytest.raises(NumericalError):
        Batch([[np.nan, 1.0]], [0])
