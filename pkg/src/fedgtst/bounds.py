"""Numerical verification of the loss inequalities against recorded runs.

Each verifier produces a BoundReport: per-round (lhs, rhs, slack) rows plus
the smoothness constant actually used, so a report is self-contained and
auditable. A report is *certified* only when every ingredient is exactly
computable: convex model kind, certified smoothness constant, and a history
produced under the proof regime (single full-batch GD step, one common rate
per round, full participation, no regularizer). Anything else downgrades to
diagnostic mode with a wider tolerance and an explanatory note instead of
raising.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .federation import RoundRecord
from .models import ModelSpec, alpha_certified
from .statistics import (
    beta_coefficients,
    maintext_round_decrement,
    optimal_learning_rate,
    optimal_round_decrement,
    round_bound_rhs,
)
from .transfer import DiscrepancyEstimate

CERTIFIED_TOL = 1e-9
DIAGNOSTIC_TOL = 1e-6

ROUND_UB = "round-ub"
TELESCOPED_SOURCE = "telescoped-source"
LEMMA1_FULL = "lemma1-full"
THEOREM2_APPENDIX = "theorem2-appendix-form"
THEOREM2_MAINTEXT = "theorem2-maintext-form"
THEOREM1 = "theorem1"

BOUND_IDS = (
    ROUND_UB,
    TELESCOPED_SOURCE,
    LEMMA1_FULL,
    THEOREM2_APPENDIX,
    THEOREM2_MAINTEXT,
    THEOREM1,
)


@dataclass(frozen=True)
class BoundEntry:
    round: int
    lhs: float
    rhs: float
    slack: float
    violated: bool
    informational: bool = False


@dataclass(frozen=True)
class BoundReport:
    bound_id: str
    entries: tuple[BoundEntry, ...]
    alpha_used: float | None
    certified: bool
    tolerance: float
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.bound_id not in BOUND_IDS:
            raise ConfigError(f"unknown bound id {self.bound_id!r}")

    @property
    def violations(self) -> tuple[BoundEntry, ...]:
        return tuple(e for e in self.entries if e.violated)

    @property
    def holds(self) -> bool:
        return not self.violations


def _entry(round_no: int, lhs: float, rhs: float, tol: float, informational=False) -> BoundEntry:
    slack = rhs - lhs
    return BoundEntry(
        round=round_no,
        lhs=lhs,
        rhs=rhs,
        slack=slack,
        violated=(not informational) and slack < -tol,
        informational=informational,
    )


def _regime_notes(history: list[RoundRecord]) -> list[str]:
    """Reasons the history falls outside the proof regime (empty = inside)."""
    notes = []
    if any(r.optimizer != "gd" for r in history):
        notes.append("non-GD optimizer")
    if any(r.local_steps != 1 for r in history):
        notes.append("multiple local steps")
    if any(r.batch_size is not None for r in history):
        notes.append("minibatch training")
    if any(r.xi_effective != 0.0 for r in history):
        notes.append("regularized local objective (xi > 0)")
    if any(len(r.participant_ids) != r.total_clients for r in history):
        notes.append("partial participation")
    return notes


def _certify(
    history: list[RoundRecord], spec: ModelSpec | None
) -> tuple[bool, float, list[str]]:
    notes = _regime_notes(history)
    if spec is None:
        notes.append("model spec not supplied; cannot certify convexity")
    else:
        if not spec.is_convex:
            notes.append("non-convex model kind")
        if not alpha_certified(spec):
            notes.append("smoothness constant not certified")
    certified = not notes
    tol = CERTIFIED_TOL if certified else DIAGNOSTIC_TOL
    if not certified:
        notes.insert(0, "diagnostic mode")
    return certified, tol, notes


def verify_round_bound(
    history: list[RoundRecord], alpha: float, spec: ModelSpec | None = None
) -> BoundReport:
    """Per-round check: post-round source loss against the one-step bound."""
    if not history:
        raise ConfigError("empty history")
    certified, tol, notes = _certify(history, spec)
    entries = []
    for rec in history:
        rhs = round_bound_rhs(rec.pre_loss, rec.learning_rate, alpha, rec.stats)
        entries.append(_entry(rec.round, rec.post_loss, rhs, tol))
        if not beta_coefficients(rec.learning_rate, alpha).beta1_positive:
            notes.append(
                f"round {rec.round}: rate {rec.learning_rate:.6g} >= 2/alpha, "
                "bound coefficient nonpositive"
            )
    return BoundReport(ROUND_UB, tuple(entries), alpha, certified, tol, tuple(notes))


def _cumulative_rhs(history: list[RoundRecord], alpha: float, initial_loss: float):
    """Running initial_loss - sum beta1 ||J||^2 + sum beta2 sigma^2."""
    rhs = initial_loss
    out = []
    for rec in history:
        coef = beta_coefficients(rec.learning_rate, alpha)
        rhs = rhs - coef.beta1 * rec.stats.avg_sq_norm + coef.beta2 * rec.stats.variance
        out.append(rhs)
    return out


def verify_telescoped_source(
    history: list[RoundRecord],
    alpha: float,
    initial_loss: float,
    spec: ModelSpec | None = None,
) -> BoundReport:
    """Telescoped bound: source loss after each prefix of rounds against the
    accumulated decrements from the initial loss. The last row is the
    final-round inequality."""
    if not history:
        raise ConfigError("empty history")
    certified, tol, notes = _certify(history, spec)
    entries = [
        _entry(rec.round, rec.post_loss, rhs, tol)
        for rec, rhs in zip(history, _cumulative_rhs(history, alpha, initial_loss))
    ]
    return BoundReport(
        TELESCOPED_SOURCE, tuple(entries), alpha, certified, tol, tuple(notes)
    )


def _require_optimal_schedule(history: list[RoundRecord], alpha: float) -> None:
    for rec in history:
        lam_star = optimal_learning_rate(rec.stats, alpha)
        if abs(rec.learning_rate - lam_star) > 1e-9 * max(1.0, abs(lam_star)):
            raise ConfigError(
                f"round {rec.round}: recorded rate {rec.learning_rate!r} is not "
                f"the bound-optimal rate {lam_star!r}; this check requires the "
                "optimal-from-stats schedule"
            )


def verify_theorem2(
    history: list[RoundRecord],
    alpha: float,
    initial_loss: float,
    d_estimate: DiscrepancyEstimate | float,
    final_target_loss: float,
    form: str = "appendix",
    spec: ModelSpec | None = None,
) -> BoundReport:
    """Optimal-rate target-loss bound, in either printed form.

    The appendix form subtracts ||J||^4 / (2 alpha (sigma^2 + ||J||^2)) per
    round; the main-form decrement is exactly 4x larger. Both are reported
    as separate bound ids rather than silently reconciled. Never certified:
    the discrepancy term is an estimator lower bound, so a violation here is
    inconclusive while a pass is (only) supporting evidence.
    """
    if form not in ("appendix", "maintext"):
        raise ConfigError(f"unknown form {form!r}")
    _require_optimal_schedule(history, alpha)
    _, _, notes = _certify(history, spec)
    d_value = d_estimate.value if isinstance(d_estimate, DiscrepancyEstimate) else float(d_estimate)
    decrement = optimal_round_decrement if form == "appendix" else maintext_round_decrement
    tol = DIAGNOSTIC_TOL
    rhs = initial_loss + d_value
    entries = []
    for i, rec in enumerate(history):
        rhs -= decrement(rec.stats, alpha)
        final = i == len(history) - 1
        entries.append(_entry(rec.round, final_target_loss, rhs, tol, informational=not final))
    if not entries:
        entries.append(_entry(0, final_target_loss, initial_loss + d_value, tol))
    notes = [
        "diagnostic: discrepancy term is a lower-bound estimate",
        "intermediate rows show the running bound; only the final row is checked",
    ] + [n for n in notes if n != "diagnostic mode"]
    bound_id = THEOREM2_APPENDIX if form == "appendix" else THEOREM2_MAINTEXT
    return BoundReport(bound_id, tuple(entries), alpha, False, tol, tuple(notes))


def verify_lemma1_full(
    history: list[RoundRecord],
    alpha: float,
    initial_loss: float,
    d_estimate: DiscrepancyEstimate | float,
    final_target_loss: float,
    spec: ModelSpec | None = None,
) -> BoundReport:
    """Un-optimized target-loss bound: telescoped source decrements plus the
    source-target discrepancy term. Diagnostic for the same reason as the
    optimal-rate form."""
    if not history:
        raise ConfigError("empty history")
    _, _, regime = _certify(history, spec)
    d_value = d_estimate.value if isinstance(d_estimate, DiscrepancyEstimate) else float(d_estimate)
    tol = DIAGNOSTIC_TOL
    running = _cumulative_rhs(history, alpha, initial_loss)
    entries = []
    for i, (rec, rhs) in enumerate(zip(history, running)):
        final = i == len(history) - 1
        entries.append(
            _entry(rec.round, final_target_loss, rhs + d_value, tol, informational=not final)
        )
    notes = [
        "diagnostic: discrepancy term is a lower-bound estimate",
    ] + [n for n in regime if n != "diagnostic mode"]
    return BoundReport(LEMMA1_FULL, tuple(entries), alpha, False, tol, tuple(notes))


def verify_theorem1(
    local_optimal_losses: list[float],
    cross_client_div: DiscrepancyEstimate,
    gf_div: DiscrepancyEstimate,
    target_loss: float,
    local_gradient_norms: list[float] | None = None,
) -> BoundReport:
    """Static bound: optimal target loss against averaged local optima plus
    the two divergence terms. Always diagnostic."""
    if not local_optimal_losses:
        raise ConfigError("need at least one local optimum")
    notes = ["diagnostic: divergence terms are lower-bound estimates"]
    if local_gradient_norms is not None:
        bad = [i for i, g in enumerate(local_gradient_norms) if g > 1e-8]
        if bad:
            notes.append(f"unconverged local optima at clients {bad}")
    rhs = float(np.mean(local_optimal_losses)) + cross_client_div.value + gf_div.value
    entry = _entry(0, target_loss, rhs, DIAGNOSTIC_TOL)
    return BoundReport(
        THEOREM1, (entry,), None, False, DIAGNOSTIC_TOL, tuple(notes)
    )


# ---------------------------------------------------------------------------
# serialization (JSONL, one round entry per line)


def write_report_jsonl(report: BoundReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in report.entries:
            fh.write(
                json.dumps(
                    {
                        "bound-id": report.bound_id,
                        "round": e.round,
                        "lhs": e.lhs,
                        "rhs": e.rhs,
                        "slack": e.slack,
                        "violated": e.violated,
                        "informational": e.informational,
                        "alpha-used": report.alpha_used,
                        "certified": report.certified,
                        "tolerance": report.tolerance,
                    }
                )
                + "\n"
            )


def read_report_jsonl(path) -> BoundReport:
    entries = []
    bound_id = None
    alpha = None
    certified = False
    tol = DIAGNOSTIC_TOL
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            try:
                bound_id = row["bound-id"]
                alpha = row["alpha-used"]
                certified = row["certified"]
                tol = row["tolerance"]
                entries.append(
                    BoundEntry(
                        round=row["round"],
                        lhs=row["lhs"],
                        rhs=row["rhs"],
                        slack=row["slack"],
                        violated=row["violated"],
                        informational=row.get("informational", False),
                    )
                )
            except KeyError as exc:
                raise DataFormatError(f"{path}:{lineno}: missing field {exc}") from exc
    if bound_id is None:
        raise DataFormatError(f"{path}: empty report")
    return BoundReport(bound_id, tuple(entries), alpha, certified, tol)
