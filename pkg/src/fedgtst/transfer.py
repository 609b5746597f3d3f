"""Target-domain finetuning and empirical discrepancy estimators.

The discrepancy quantities are suprema over model classes, so everything
here is an estimator producing a LOWER bound on the true value: gradient
ascent with restarts for the loss-gap discrepancy, and best-head training
over sampled feature extractors for the head-gap discrepancy. Reports are
tagged accordingly and must never be treated as certified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .domains import Dataset
from .errors import ConfigError
from .models import (
    LINEAR,
    LOGISTIC,
    Batch,
    ModelSpec,
    accuracy,
    features,
    gradient,
    loss,
    smoothness_constant,
)
from .seeding import rng_for, split_seed

logger = logging.getLogger(__name__)

H_DISCREPANCY = "h-discrepancy"
CROSS_CLIENT = "cross-client"
GF_DISCREPANCY = "gf-discrepancy"

# nested-ladder floor for the ascent estimator; radii are halved down to
# this absolute value so estimates at power-of-two radii share candidates
_RADIUS_FLOOR = 0.125


@dataclass(frozen=True)
class TransferResult:
    target_loss: float
    target_accuracy: float | None
    finetune_epochs_used: int
    frozen_split_index: int

    def __post_init__(self):
        if self.target_loss < 0:
            raise ConfigError("loss must be >= 0")
        if self.target_accuracy is not None and not 0.0 <= self.target_accuracy <= 1.0:
            raise ConfigError("accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class DiscrepancyEstimate:
    value: float
    kind: str
    restarts: int
    certified: str = "lower-bound only"
    budget_exhausted: bool = False

    def __post_init__(self):
        if self.value < 0:
            raise ConfigError("discrepancy estimates are nonnegative")


# ---------------------------------------------------------------------------
# finetuning


def finetune_classifier(
    spec: ModelSpec,
    pretrained: np.ndarray,
    target_train: Dataset,
    lr: float,
    epochs: int,
) -> tuple[np.ndarray, int]:
    """Full-batch GD on the classifier head only; the feature block is
    bitwise untouched. Returns (weights, epochs actually run)."""
    if lr <= 0 or epochs < 0:
        raise ConfigError("lr must be > 0 and epochs >= 0")
    split = spec.split_index
    if split == 0:
        logger.info("split_index = 0: finetuning every weight (linear-probe-degenerate)")
    w = pretrained.copy()
    batch = target_train.to_batch()
    used = 0
    for _ in range(epochs):
        g = gradient(spec, w, batch)
        w[split:] = w[split:] - lr * g[split:]
        used += 1
    return w, used


def evaluate_target(
    spec: ModelSpec,
    w: np.ndarray,
    target_test: Dataset,
    epochs_used: int = 0,
) -> TransferResult:
    """Loss and accuracy of `w` on held-out target data."""
    if len(target_test) < 1:
        raise ConfigError("empty target test set")
    batch = target_test.to_batch()
    return TransferResult(
        target_loss=loss(spec, w, batch),
        target_accuracy=accuracy(spec, w, batch) if spec.is_classifier else None,
        finetune_epochs_used=epochs_used,
        frozen_split_index=spec.split_index,
    )


# ---------------------------------------------------------------------------
# loss-gap discrepancy (sup over weights of |L1 - L2|)


def _sample_in_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    u = rng.standard_normal(dim)
    n = np.linalg.norm(u)
    if n == 0.0:
        return np.zeros(dim)
    return (radius * rng.random() ** (1.0 / dim) / n) * u


def estimate_h_discrepancy(
    spec: ModelSpec,
    d1: Dataset,
    d2: Dataset,
    restarts: int = 8,
    ascent_steps: int = 60,
    weight_radius: float = 1.0,
    seed: int = 0,
) -> DiscrepancyEstimate:
    """Projected gradient ascent on |L_{d1}(w) - L_{d2}(w)| over ||w|| <= r.

    Multi-restart, best-over-all-iterates. The radius ladder is halved down
    to an absolute floor with radius-keyed streams, so estimates at radii
    related by powers of two share their candidate pools and the estimate is
    monotone along such ladders.
    """
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    if weight_radius <= 0:
        raise ConfigError("weight_radius must be > 0")
    b1, b2 = d1.to_batch(), d2.to_batch()

    def gap(w: np.ndarray) -> float:
        return abs(loss(spec, w, b1) - loss(spec, w, b2))

    dim = spec.total_dim
    best = gap(np.zeros(dim))
    radius = weight_radius
    while True:
        rng = rng_for(seed, f"h-discrepancy.radius.{radius!r}")
        for _ in range(restarts):
            w = _sample_in_ball(rng, dim, radius)
            best = max(best, gap(w))
            for t in range(ascent_steps):
                sign = 1.0 if loss(spec, w, b1) >= loss(spec, w, b2) else -1.0
                g = sign * (gradient(spec, w, b1) - gradient(spec, w, b2))
                gn = np.linalg.norm(g)
                if gn < 1e-12:
                    break
                step = radius * 0.25 * (1.0 / 16.0) ** (t / max(1, ascent_steps - 1))
                w = w + (step / gn) * g
                wn = np.linalg.norm(w)
                if wn > radius:
                    w = (radius / wn) * w
                best = max(best, gap(w))
        if radius <= _RADIUS_FLOOR:
            break
        radius /= 2.0
    return DiscrepancyEstimate(value=float(best), kind=H_DISCREPANCY, restarts=restarts)


def estimate_cross_client_divergence(
    spec: ModelSpec,
    dataset: Dataset,
    partition,
    restarts: int = 8,
    ascent_steps: int = 60,
    weight_radius: float = 1.0,
    seed: int = 0,
) -> DiscrepancyEstimate:
    """Mean pairwise loss-gap discrepancy over all client pairs."""
    K = partition.num_clients
    if K < 2:
        raise ConfigError("cross-client divergence needs K >= 2")
    shards = [dataset.subset(idx) for idx in partition.assignments]
    total = 0.0
    exhausted = False
    for k1 in range(K):
        for k2 in range(k1 + 1, K):
            est = estimate_h_discrepancy(
                spec,
                shards[k1],
                shards[k2],
                restarts,
                ascent_steps,
                weight_radius,
                seed=split_seed(seed, f"pair.{k1}.{k2}"),
            )
            total += 2.0 * est.value  # both orders of the pair
            exhausted |= est.budget_exhausted
    return DiscrepancyEstimate(
        value=total / (K * (K - 1)),
        kind=CROSS_CLIENT,
        restarts=restarts,
        budget_exhausted=exhausted,
    )


# ---------------------------------------------------------------------------
# head-gap discrepancy (sup over feature extractors of best-head loss gaps)


def head_spec_for(spec: ModelSpec, feature_dim: int) -> ModelSpec:
    """The classifier-head problem over extracted features."""
    if spec.kind == LINEAR:
        return ModelSpec(LINEAR, input_dim=feature_dim, num_classes=1, bias=spec.bias)
    return ModelSpec(
        LOGISTIC, input_dim=feature_dim, num_classes=spec.num_classes, bias=spec.bias
    )


def train_head_to_optimum(
    head: ModelSpec,
    batch: Batch,
    budget: int = 2000,
    grad_tol: float = 1e-8,
) -> tuple[float, float, bool]:
    """Solve the convex head problem to gradient norm <= grad_tol or until
    the iteration budget runs out. Returns (loss, grad norm, converged).

    L-BFGS does the minimization (deterministic given inputs); a short plain
    GD polish runs afterwards in case the line search stops a hair early.
    """
    from scipy.optimize import minimize

    result = minimize(
        lambda w: loss(head, w, batch),
        np.zeros(head.total_dim),
        jac=lambda w: gradient(head, w, batch),
        method="L-BFGS-B",
        options={"maxiter": budget, "gtol": grad_tol * 1e-2, "ftol": 0.0},
    )
    w = result.x
    alpha = smoothness_constant(head, batch)
    lr = 1.0 / alpha if alpha > 0 else 1.0
    gn = np.linalg.norm(gradient(head, w, batch))
    polish = 0
    while gn > grad_tol and polish < 200:
        w = w - lr * gradient(head, w, batch)
        gn = np.linalg.norm(gradient(head, w, batch))
        polish += 1
    if gn > grad_tol:
        logger.debug("head training exhausted budget (grad norm %.3e)", gn)
    return loss(head, w, batch), float(gn), bool(gn <= grad_tol)


def estimate_gf_discrepancy(
    spec: ModelSpec,
    d_k: Dataset,
    d_t: Dataset,
    feature_samples: list[np.ndarray],
    head_budget: int = 2000,
    head_grad_tol: float = 1e-8,
) -> DiscrepancyEstimate:
    """Max over sampled feature blocks of |inf-head-loss gap| between domains."""
    if not feature_samples:
        raise ConfigError("need at least one feature sample")
    split = spec.split_index
    best = 0.0
    exhausted = False
    for f_block in feature_samples:
        if f_block.shape != (split,):
            raise ConfigError(f"feature block must have shape ({split},)")
        w_full = np.concatenate([f_block, np.zeros(spec.total_dim - split)])
        z1 = features(spec, w_full, d_k.features)
        z2 = features(spec, w_full, d_t.features)
        head = head_spec_for(spec, z1.shape[1])
        v1, _, ok1 = train_head_to_optimum(
            head, Batch(z1, d_k.labels), head_budget, head_grad_tol
        )
        v2, _, ok2 = train_head_to_optimum(
            head, Batch(z2, d_t.labels), head_budget, head_grad_tol
        )
        exhausted |= not (ok1 and ok2)
        best = max(best, abs(v1 - v2))
    return DiscrepancyEstimate(
        value=float(best),
        kind=GF_DISCREPANCY,
        restarts=len(feature_samples),
        budget_exhausted=exhausted,
    )


def estimate_federated_gf_discrepancy(
    spec: ModelSpec,
    dataset: Dataset,
    partition,
    d_t: Dataset,
    feature_samples: list[np.ndarray],
    head_budget: int = 2000,
    head_grad_tol: float = 1e-8,
) -> DiscrepancyEstimate:
    """Average of per-client head-gap discrepancies against the target."""
    vals = []
    exhausted = False
    for idx in partition.assignments:
        est = estimate_gf_discrepancy(
            spec, dataset.subset(idx), d_t, feature_samples, head_budget, head_grad_tol
        )
        vals.append(est.value)
        exhausted |= est.budget_exhausted
    return DiscrepancyEstimate(
        value=float(np.mean(vals)),
        kind=GF_DISCREPANCY,
        restarts=len(feature_samples),
        budget_exhausted=exhausted,
    )


def pretraining_feature_samples(
    spec: ModelSpec,
    snapshots: dict[int, np.ndarray],
    total_rounds: int,
    seed: int,
    extra_draws: int = 8,
    draw_scale: float = 1.0,
) -> list[np.ndarray]:
    """Feature blocks along the pretraining trajectory plus random draws.

    Picks the snapshots nearest rounds {0, P/4, P/2, 3P/4, P} and appends
    `extra_draws` random feature blocks for diversity.
    """
    split = spec.split_index
    samples: list[np.ndarray] = []
    if snapshots:
        available = sorted(snapshots)
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            want = round(frac * total_rounds)
            nearest = min(available, key=lambda r: abs(r - want))
            samples.append(snapshots[nearest][:split].copy())
    rng = rng_for(seed, "gf-feature-draws")
    for _ in range(extra_draws):
        samples.append(draw_scale * rng.standard_normal(split))
    return samples
