"""The federated round protocol and its two baselines.

Three algorithms share one round skeleton (broadcast, local training,
upload, aggregate):

  fedavg       plain local training, nothing but models on the wire.
  fedgtst      local training regularized toward a server guide norm
               (the max of client gradient norms from the previous round);
               a small subset of clients additionally runs standard
               training so the exchanged norms cannot collapse. Extra
               traffic per round: one scalar per participant up, one
               guide scalar down.
  fediir-lite  local training regularized toward the previous round's
               averaged gradient, which the server must broadcast whole;
               communication grows by two model-sized vectors per
               participant per round.

Within a round every client update is a pure function of the broadcast
state, the client's data, and derived seeds, so updates may run on a thread
pool; aggregation always reduces in increasing client-id order, making
results independent of scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .domains import Dataset, PartitionPlan
from .errors import ConfigError, NumericalError
from .models import (
    ANALYTIC,
    FINITE_DIFFERENCE,
    MLP,
    Batch,
    ModelSpec,
    gradient,
    hvp,
    loss,
    smoothness_constant,
)
from .seeding import rng_for
from .statistics import CrossClientStats, cross_client_stats, optimal_learning_rate

logger = logging.getLogger(__name__)

FEDAVG = "fedavg"
FEDGTST = "fedgtst"
FEDIIR_LITE = "fediir-lite"
ALGORITHMS = (FEDAVG, FEDGTST, FEDIIR_LITE)

ZERO_GRADIENT_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FixedLR:
    value: float

    def rate(self, round_no: int, stats, alpha) -> float:
        return self.value


@dataclass(frozen=True)
class StepDecayLR:
    initial: float
    factor: float
    period: int

    def rate(self, round_no: int, stats, alpha) -> float:
        return self.initial / self.factor ** ((round_no - 1) // self.period)


@dataclass(frozen=True)
class OptimalFromStats:
    def rate(self, round_no: int, stats: CrossClientStats, alpha: float) -> float:
        if alpha is None:
            raise ConfigError("optimal-from-stats schedule needs a smoothness constant")
        return optimal_learning_rate(stats, alpha)


LRSchedule = FixedLR | StepDecayLR | OptimalFromStats


@dataclass(frozen=True)
class RoundConfig:
    algorithm: str = FEDAVG
    participation_fraction: float = 1.0
    std_subset_fraction: float = 0.0
    xi: float = 0.0
    lr_schedule: LRSchedule = FixedLR(0.01)
    local_steps: int = 1
    batch_size: int | None = None  # None = full batch
    optimizer: str = "gd"
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigError("participation_fraction must lie in (0, 1]")
        if not 0.0 <= self.std_subset_fraction <= 1.0:
            raise ConfigError("std_subset_fraction must lie in [0, 1]")
        if self.xi < 0:
            raise ConfigError("xi must be >= 0")
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if isinstance(self.lr_schedule, OptimalFromStats):
            if self.optimizer != "gd" or self.local_steps != 1:
                raise ConfigError(
                    "optimal-from-stats requires gd with a single local step"
                )
        if self.algorithm == FEDGTST and self.xi == 0.0:
            # allowed (it reduces the protocol to fedavg) but almost always
            # a config mistake, so say so once
            logger.warning("fedgtst with xi = 0 degenerates to fedavg")

    @property
    def assumption_settings(self) -> bool:
        """Single full-batch GD step with no regularizer: the regime the
        round-wise loss bound is proven for."""
        return (
            self.optimizer == "gd"
            and self.local_steps == 1
            and self.batch_size is None
            and (self.algorithm == FEDAVG or self.xi == 0.0)
        )


# ---------------------------------------------------------------------------
# state


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    last_surrogate_norm: float = 0.0


@dataclass(frozen=True)
class ServerState:
    global_weights: np.ndarray
    guide_norm: float = 0.0
    round: int = 0
    rng_seed: int = 0
    avg_jacobian: np.ndarray | None = None
    history: tuple = ()

    def __post_init__(self):
        if self.guide_norm < 0:
            raise ConfigError("guide norm must be >= 0")


@dataclass(frozen=True)
class RoundRecord:
    """Complete trace of one federated round (1-based round numbers)."""

    round: int
    participant_ids: tuple[int, ...]
    std_subset_ids: tuple[int, ...]
    learning_rate: float
    pre_loss: float
    post_loss: float
    stats: CrossClientStats
    guide_norm: float
    surrogate_norms: dict[int, float]
    comm_scalars: int
    comm_vector_entries: int
    # settings echoes, so bound verification can audit its preconditions
    algorithm: str
    xi_effective: float
    local_steps: int
    optimizer: str
    batch_size: int | None
    total_clients: int


# ---------------------------------------------------------------------------
# participant selection


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def select_participants(K: int, fraction: float, round_no: int, seed: int) -> tuple[int, ...]:
    """Uniform sample without replacement of max(1, round(fraction*K)) ids."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    size = min(K, max(1, _round_half_up(fraction * K)))
    rng = rng_for(seed, f"participation.round.{round_no}")
    return tuple(sorted(int(i) for i in rng.choice(K, size=size, replace=False)))


def select_standard_subset(
    participants: tuple[int, ...],
    fraction: float,
    round_no: int,
    seed: int,
    K: int | None = None,
) -> tuple[int, ...]:
    """Subset of participants doing an extra standard-training pass.

    The subset size is a fraction of the total client count K (defaulting
    to the participant count when K is not given), capped by participation.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("fraction must lie in [0, 1]")
    if fraction == 0.0 or not participants:
        return ()
    if K is None:
        K = len(participants)
    size = min(len(participants), max(1, _round_half_up(fraction * K)))
    rng = rng_for(seed, f"std-subset.round.{round_no}")
    picked = rng.choice(len(participants), size=size, replace=False)
    ordered = sorted(participants)
    return tuple(sorted(ordered[int(i)] for i in picked))


# ---------------------------------------------------------------------------
# local training


def _hvp_mode(spec: ModelSpec) -> str:
    return FINITE_DIFFERENCE if spec.kind == MLP else ANALYTIC


def _descend(
    spec: ModelSpec,
    w0: np.ndarray,
    data: Batch,
    lr: float,
    steps: int,
    objective_grad: Callable[[np.ndarray, Batch], np.ndarray],
    config: RoundConfig | None = None,
    step_rng: np.random.Generator | None = None,
    context: str = "local training",
) -> np.ndarray:
    optimizer = config.optimizer if config else "gd"
    batch_size = config.batch_size if config else None
    w = w0
    if optimizer == "adam":
        b1, b2 = config.adam_betas
        m = np.zeros_like(w0)
        v = np.zeros_like(w0)
    for step in range(steps):
        batch = data
        if batch_size is not None and batch_size < data.size:
            if step_rng is None:
                raise ConfigError("minibatch mode needs a step rng")
            pick = step_rng.choice(data.size, size=batch_size, replace=False)
            batch = Batch(data.features[pick], data.labels[pick])
        g = objective_grad(w, batch)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite objective gradient in {context}, step {step}")
        if optimizer == "gd":
            w = w - lr * g
        else:
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            mh = m / (1.0 - b1 ** (step + 1))
            vh = v / (1.0 - b2 ** (step + 1))
            w = w - lr * mh / (np.sqrt(vh) + 1e-8)
        if not np.isfinite(w).all():
            raise NumericalError(f"non-finite weights in {context}, step {step}")
    return w


def _norm_alignment_grad(
    spec: ModelSpec, w: np.ndarray, batch: Batch, guide_norm: float, xi: float
) -> np.ndarray:
    """Gradient of loss + xi (||J(w)|| - guide)^2.

    The chain rule needs H(w) J(w); when ||J|| is below the zero floor the
    regularizer term is dropped (the norm is not differentiable at 0 and the
    residual there is a constant anyway).
    """
    J = gradient(spec, w, batch)
    if xi == 0.0:
        return J
    n = float(np.linalg.norm(J))
    if n < ZERO_GRADIENT_FLOOR:
        return J
    Hj = hvp(spec, w, batch, J, _hvp_mode(spec))
    return J + (2.0 * xi * (n - guide_norm) / n) * Hj


def _gradient_alignment_grad(
    spec: ModelSpec, w: np.ndarray, batch: Batch, j_ref: np.ndarray | None, xi: float
) -> np.ndarray:
    """Gradient of loss + xi ||J(w) - j_ref||^2 (the fediir-lite objective)."""
    J = gradient(spec, w, batch)
    if xi == 0.0 or j_ref is None:
        return J
    Hd = hvp(spec, w, batch, J - j_ref, _hvp_mode(spec))
    return J + 2.0 * xi * Hd


def local_update_regularized(
    spec: ModelSpec,
    w0: np.ndarray,
    client_batch: Batch,
    guide_norm: float,
    xi: float,
    lr: float,
    steps: int,
    config: RoundConfig | None = None,
    step_rng: np.random.Generator | None = None,
    context: str = "regularized update",
) -> tuple[np.ndarray, float]:
    """Guide-norm-regularized local training.

    Returns the updated weights and the plain-loss gradient norm at the
    updated weights (the value the client reports to the server).
    """
    if lr <= 0:
        raise ConfigError("lr must be > 0")
    if xi < 0:
        raise ConfigError("xi must be >= 0")
    w = _descend(
        spec,
        w0,
        client_batch,
        lr,
        steps,
        lambda wv, b: _norm_alignment_grad(spec, wv, b, guide_norm, xi),
        config,
        step_rng,
        context,
    )
    return w, float(np.linalg.norm(gradient(spec, w, client_batch)))


def local_update_standard(
    spec: ModelSpec,
    w0: np.ndarray,
    client_batch: Batch,
    lr: float,
    steps: int,
    config: RoundConfig | None = None,
    step_rng: np.random.Generator | None = None,
    context: str = "standard update",
) -> tuple[np.ndarray, float]:
    """Plain local training; returns weights and post-update gradient norm."""
    if lr <= 0:
        raise ConfigError("lr must be > 0")
    w = _descend(
        spec,
        w0,
        client_batch,
        lr,
        steps,
        lambda wv, b: gradient(spec, wv, b),
        config,
        step_rng,
        context,
    )
    return w, float(np.linalg.norm(gradient(spec, w, client_batch)))


def local_update_aligned(
    spec: ModelSpec,
    w0: np.ndarray,
    client_batch: Batch,
    j_ref: np.ndarray | None,
    xi: float,
    lr: float,
    steps: int,
    config: RoundConfig | None = None,
    step_rng: np.random.Generator | None = None,
    context: str = "aligned update",
) -> tuple[np.ndarray, float]:
    """Global-gradient-aligned local training (fediir-lite objective)."""
    if lr <= 0:
        raise ConfigError("lr must be > 0")
    w = _descend(
        spec,
        w0,
        client_batch,
        lr,
        steps,
        lambda wv, b: _gradient_alignment_grad(spec, wv, b, j_ref, xi),
        config,
        step_rng,
        context,
    )
    return w, float(np.linalg.norm(gradient(spec, w, client_batch)))


def surrogate_norm(reg_norm: float, std_norm: float | None = None) -> float:
    """Max of the regularized and (optional) standard training norms."""
    if reg_norm < 0 or (std_norm is not None and std_norm < 0):
        raise ConfigError("norms must be >= 0")
    return reg_norm if std_norm is None else max(reg_norm, std_norm)


def aggregate(models: list[tuple[int, np.ndarray]]) -> np.ndarray:
    """Unweighted mean over participants, summed in client-id order."""
    if not models:
        raise ConfigError("nothing to aggregate")
    ordered = sorted(models, key=lambda kv: kv[0])
    dim = ordered[0][1].shape
    for _, w in ordered:
        if w.shape != dim:
            raise ConfigError("model dimensions differ")
    return np.mean(np.stack([w for _, w in ordered]), axis=0)


def update_guide_norm(surrogate_norms: list[float]) -> float:
    if not surrogate_norms:
        raise ConfigError("no surrogate norms transmitted")
    top = max(surrogate_norms)
    if top == 0.0:
        logger.warning("all surrogate norms are zero; training has converged")
    return top


# ---------------------------------------------------------------------------
# communication accounting (entries of vectors / extra scalars per round)


def comm_cost(algorithm: str, participants: int, model_dim: int) -> tuple[int, int]:
    """(scalars, vector entries) exchanged in one round.

    Model down + model up for everyone; fedgtst adds one scalar per
    participant plus the guide broadcast; fediir-lite additionally ships
    each local gradient up and the averaged gradient down.
    """
    vec = 2 * model_dim * participants
    scal = 0
    if algorithm == FEDGTST:
        scal = participants + 1
    elif algorithm == FEDIIR_LITE:
        vec += 2 * model_dim * participants
    return scal, vec


# ---------------------------------------------------------------------------
# the round


def _client_batch(dataset: Dataset, client: ClientState) -> Batch:
    if len(client.indices) == 0:
        raise ConfigError(f"client {client.client_id} has no data")
    return dataset.subset(client.indices).to_batch()


def run_round(
    server: ServerState,
    clients: list[ClientState],
    dataset: Dataset,
    spec: ModelSpec,
    config: RoundConfig,
    alpha: float | None = None,
    workers: int = 1,
) -> tuple[ServerState, RoundRecord]:
    """Execute one federated round and return the new server state.

    Deterministic given (server.rng_seed, server.round) regardless of
    worker count. The first round ever (server.round == 0) runs with the
    regularizer disabled so the first exchanged norms are genuine.
    """
    K = len(clients)
    round_no = server.round + 1
    participants = select_participants(
        K, config.participation_fraction, round_no, server.rng_seed
    )
    phi: tuple[int, ...] = ()
    if config.algorithm == FEDGTST:
        phi = select_standard_subset(
            participants, config.std_subset_fraction, round_no, server.rng_seed, K=K
        )
    xi_eff = 0.0 if server.round == 0 else config.xi
    broadcast = server.global_weights
    by_id = {c.client_id: c for c in clients}
    batches = {k: _client_batch(dataset, by_id[k]) for k in participants}

    def _map(fn, ids):
        if workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return dict(zip(ids, pool.map(fn, ids)))
        return {k: fn(k) for k in ids}

    # phase 1: gradients at the broadcast weights (the round's statistics)
    jacs = _map(lambda k: gradient(spec, broadcast, batches[k]), participants)
    stats = cross_client_stats([(k, jacs[k]) for k in participants], round_no)
    lr = config.lr_schedule.rate(round_no, stats, alpha)

    # phase 2: local updates
    def _update(k: int):
        batch = batches[k]
        step_rng = (
            rng_for(server.rng_seed, f"minibatch.round.{round_no}.client.{k}")
            if config.batch_size is not None
            else None
        )
        ctx = f"round {round_no}, client {k}"
        if config.algorithm == FEDGTST:
            w, reg_norm = local_update_regularized(
                spec, broadcast, batch, server.guide_norm, xi_eff, lr,
                config.local_steps, config, step_rng, ctx,
            )
            std_norm = None
            if k in phi:
                _, std_norm = local_update_standard(
                    spec, broadcast, batch, lr, config.local_steps, config,
                    step_rng, ctx + " (standard pass)",
                )
            return w, surrogate_norm(reg_norm, std_norm)
        if config.algorithm == FEDIIR_LITE:
            w, _ = local_update_aligned(
                spec, broadcast, batch, server.avg_jacobian, xi_eff, lr,
                config.local_steps, config, step_rng, ctx,
            )
            return w, None
        w, _ = local_update_standard(
            spec, broadcast, batch, lr, config.local_steps, config, step_rng, ctx
        )
        return w, None

    results = _map(_update, participants)
    new_weights = aggregate([(k, results[k][0]) for k in participants])

    surrogate_norms: dict[int, float] = {}
    new_guide = 0.0
    if config.algorithm == FEDGTST:
        surrogate_norms = {k: results[k][1] for k in participants}
        new_guide = update_guide_norm([surrogate_norms[k] for k in sorted(surrogate_norms)])
        for k in participants:
            by_id[k].last_surrogate_norm = surrogate_norms[k]

    pre_loss = sum(loss(spec, broadcast, batches[k]) for k in participants) / len(participants)
    post_loss = sum(loss(spec, new_weights, batches[k]) for k in participants) / len(participants)
    scal, vec = comm_cost(config.algorithm, len(participants), spec.total_dim)

    record = RoundRecord(
        round=round_no,
        participant_ids=participants,
        std_subset_ids=phi,
        learning_rate=float(lr),
        pre_loss=pre_loss,
        post_loss=post_loss,
        stats=stats,
        guide_norm=new_guide,
        surrogate_norms=surrogate_norms,
        comm_scalars=scal,
        comm_vector_entries=vec,
        algorithm=config.algorithm,
        xi_effective=xi_eff,
        local_steps=config.local_steps,
        optimizer=config.optimizer,
        batch_size=config.batch_size,
        total_clients=K,
    )
    new_server = ServerState(
        global_weights=new_weights,
        guide_norm=new_guide,
        round=round_no,
        rng_seed=server.rng_seed,
        avg_jacobian=stats.avg_jacobian,
        history=server.history + (record,),
    )
    return new_server, record


def clients_from_partition(partition: PartitionPlan) -> list[ClientState]:
    clients = [ClientState(k, idx) for k, idx in enumerate(partition.assignments)]
    for c in clients:
        if len(c.indices) == 0:
            raise ConfigError(
                f"client {c.client_id} received no samples; "
                "use fewer clients or a different partition seed"
            )
    return clients


def certified_alpha(spec: ModelSpec, dataset: Dataset, partition: PartitionPlan) -> float:
    """Smoothness constant valid for every client's local loss.

    The round-wise bound applies the quadratic upper estimate to each
    client's loss separately, so the constant must dominate all per-client
    constants, not just the pooled dataset's.
    """
    return max(
        smoothness_constant(spec, dataset.subset(idx).to_batch())
        for idx in partition.assignments
    )


def run_pretraining(
    spec: ModelSpec,
    initial: np.ndarray,
    dataset: Dataset,
    partition: PartitionPlan,
    config: RoundConfig,
    rounds: int,
    early_stop_patience: int | None = None,
    seed: int = 0,
    alpha: float | None = None,
    workers: int = 1,
    snapshot_sink: dict[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, list[RoundRecord]]:
    """Run up to `rounds` federated rounds with optional early stopping.

    Stops once the post-round source loss has failed to improve by at least
    1e-6 for `early_stop_patience` consecutive rounds. Returns the final
    global weights and the full round history. When `snapshot_sink` is
    given it is filled with {round: global weights}, including round 0.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    clients = clients_from_partition(partition)
    if alpha is None and isinstance(config.lr_schedule, OptimalFromStats):
        alpha = certified_alpha(spec, dataset, partition)
    server = ServerState(global_weights=initial, rng_seed=seed)
    if snapshot_sink is not None:
        snapshot_sink[0] = initial.copy()
    records: list[RoundRecord] = []
    best: float | None = None
    stale = 0
    for _ in range(rounds):
        server, record = run_round(server, clients, dataset, spec, config, alpha, workers)
        records.append(record)
        if snapshot_sink is not None:
            snapshot_sink[record.round] = server.global_weights.copy()
        if best is None:
            best = record.pre_loss  # the initial source loss
        if early_stop_patience is not None:
            if record.post_loss <= best - 1e-6:
                stale = 0
            else:
                stale += 1
                if stale >= early_stop_patience:
                    best = min(best, record.post_loss)
                    break
        best = min(best, record.post_loss)
    return server.global_weights, records
