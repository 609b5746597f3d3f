"""Cross-client Jacobian statistics and the per-round loss-bound algebra.

Conventions, fixed across the engine:
  avg_norm       ||J_p||  = norm of the mean client gradient at the broadcast
                            weights of round p
  variance       sigma^2  = mean of squared client gradient norms minus
                            avg_norm^2 (clamped at zero within 1e-12)
  beta2(lam)              = alpha * lam^2 / 2
  beta1(lam)              = lam - beta2(lam)
  round bound    next_loss <= prev_loss - beta1*||J||^2 + beta2*sigma^2
  optimal rate   lam* = ||J||^2 / (alpha * (sigma^2 + ||J||^2))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

VARIANCE_CLAMP = 1e-12


@dataclass(frozen=True)
class CrossClientStats:
    """Round-p gradient statistics over the participating clients.

    avg_jacobian is None when the stats were reloaded from a history file,
    which stores only the norms.
    """

    round: int
    avg_jacobian: np.ndarray | None
    avg_norm: float
    avg_sq_norm: float
    variance: float
    client_norms: dict[int, float]
    client_count: int

    @property
    def mean_sq_client_norm(self) -> float:
        return self.variance + self.avg_sq_norm

    def sum_sq_client_norms(self) -> float:
        return float(sum(n * n for _, n in sorted(self.client_norms.items())))


@dataclass(frozen=True)
class BoundCoefficients:
    beta1: float
    beta2: float
    learning_rate: float
    alpha: float

    @property
    def beta1_positive(self) -> bool:
        """Descent regime: equivalent to learning_rate < 2 / alpha."""
        return self.beta1 > 0.0


def cross_client_stats(
    jacobians: list[tuple[int, np.ndarray]], round: int
) -> CrossClientStats:
    """Aggregate per-client gradients into the round's statistics.

    Summation runs in increasing client-id order so results are
    bit-deterministic regardless of the caller's scheduling.
    """
    if not jacobians:
        raise ConfigError("need at least one client Jacobian")
    ordered = sorted(jacobians, key=lambda kv: kv[0])
    dim = ordered[0][1].shape
    total = np.zeros(dim)
    norms: dict[int, float] = {}
    sq_norms = []
    for cid, jac in ordered:
        if jac.shape != dim:
            raise DimensionError("client Jacobians have mismatched dimensions")
        total = total + jac
        sq = float(jac @ jac)
        sq_norms.append(sq)
        norms[cid] = float(np.sqrt(sq))
    K = len(ordered)
    avg = total / K
    avg_sq_norm = float(avg @ avg)
    avg_norm = float(np.sqrt(avg_sq_norm))
    mean_sq = float(np.mean(sq_norms))
    variance = mean_sq - avg_sq_norm
    # cancellation floor: identical inputs must give exactly zero, so snap
    # residuals that are negligible relative to the gradient energy
    if variance < -VARIANCE_CLAMP * max(1.0, mean_sq):
        raise NumericalError(
            f"negative cross-client variance {variance} beyond clamp tolerance"
        )
    if abs(variance) <= VARIANCE_CLAMP * mean_sq:
        variance = 0.0
    variance = max(variance, 0.0)
    return CrossClientStats(
        round=round,
        avg_jacobian=avg,
        avg_norm=avg_norm,
        avg_sq_norm=avg_sq_norm,
        variance=variance,
        client_norms=norms,
        client_count=K,
    )


def beta_coefficients(lam: float, alpha: float) -> BoundCoefficients:
    """Loss-bound coefficients for one round at learning rate lam."""
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    if lam < 0:
        raise ConfigError("learning rate must be >= 0")
    beta2 = alpha * lam * lam / 2.0
    return BoundCoefficients(beta1=lam - beta2, beta2=beta2, learning_rate=lam, alpha=alpha)


def optimal_learning_rate(stats: CrossClientStats, alpha: float) -> float:
    """The rate minimizing the round bound: ||J||^2 / (alpha (sigma^2 + ||J||^2)).

    Always in (0, 1/alpha]. Raises when every client gradient is zero, which
    signals convergence; the caller should stop training rather than divide.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    denom = stats.variance + stats.avg_sq_norm
    if denom <= 0.0:
        raise NumericalError(
            "all client Jacobians are zero; training has converged"
        )
    return stats.avg_sq_norm / (alpha * denom)


def optimal_learning_rate_sum_form(stats: CrossClientStats, alpha: float) -> float:
    """Equivalent form K ||J||^2 / (alpha sum_k ||J^(k)||^2)."""
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    total = stats.sum_sq_client_norms()
    if total <= 0.0:
        raise NumericalError(
            "all client Jacobians are zero; training has converged"
        )
    return stats.client_count * stats.avg_sq_norm / (alpha * total)


def round_bound_rhs(
    prev_loss: float, lam: float, alpha: float, stats: CrossClientStats
) -> float:
    """Upper bound on the post-round source loss after one common-rate GD step."""
    coef = beta_coefficients(lam, alpha)
    return prev_loss - coef.beta1 * stats.avg_sq_norm + coef.beta2 * stats.variance


def optimal_round_decrement(stats: CrossClientStats, alpha: float) -> float:
    """Bound decrement at lam*: ||J||^4 / (2 alpha (sigma^2 + ||J||^2)).

    Zero when the round's gradients vanish (the bound is then flat in lam).
    """
    denom = stats.variance + stats.avg_sq_norm
    if denom <= 0.0:
        return 0.0
    return stats.avg_sq_norm**2 / (2.0 * alpha * denom)


def maintext_round_decrement(stats: CrossClientStats, alpha: float) -> float:
    """Decrement as printed in the tightened target-loss bound:
    2 ||J||^2 / (alpha (1 + sigma^2 ||J||^-2)) = 4x the optimal decrement."""
    denom = stats.variance + stats.avg_sq_norm
    if denom <= 0.0:
        return 0.0
    return 2.0 * stats.avg_sq_norm**2 / (alpha * denom)
