"""Regret, constraint-violation, and estimation-error accounting.

Pure folds over RoundRecords: every quantity here is recomputable from the
stored records alone, and trial aggregation is a plain mean / standard
error that does not depend on trial ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environment import RoundRecord
from .linalg import subspace_distance

REGRET_CLAMP = 1e-12


class EnvironmentInconsistencyError(RuntimeError):
    """A stored record contradicts the optimality of its stored optimum."""


def instantaneous_regret(record: RoundRecord, optimal_expected: float) -> float:
    """Expected-reward gap to the optimal action, clamped at zero against
    floating-point negatives below REGRET_CLAMP."""
    gap = optimal_expected - record.expected_reward
    if gap < -REGRET_CLAMP:
        raise EnvironmentInconsistencyError(
            f"round {record.round} task {record.task}: stored optimum "
            f"{optimal_expected} below played expected reward {record.expected_reward}"
        )
    return max(gap, 0.0)


def violation_check(record: RoundRecord, alpha: float) -> bool:
    """True iff the played action's expected reward strictly misses the
    (1 - alpha) fraction of the baseline reward."""
    return record.expected_reward < (1.0 - alpha) * record.baseline_reward


def estimation_error(theta_hat: np.ndarray, theta_star: np.ndarray) -> float:
    """Relative Frobenius error ||theta_hat - theta_star||_F / ||theta_star||_F."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if theta_hat.shape != theta_star.shape:
        raise ValueError(f"shape mismatch {theta_hat.shape} vs {theta_star.shape}")
    denom = np.linalg.norm(theta_star, "fro")
    if denom == 0.0:
        raise ValueError("estimation error undefined for a zero ground truth")
    return float(np.linalg.norm(theta_hat - theta_star, "fro") / denom)


@dataclass
class TrialMetrics:
    """Per-trial roll-up; the by-epoch lists are cumulative at epoch ends."""

    cumulative_regret: float
    violations: int
    regret_by_epoch: list[float]
    violations_by_epoch: list[int]
    est_error_by_epoch: list[float | None] = field(default_factory=list)
    sd_by_epoch: list[float | None] = field(default_factory=list)
    sd_trace: list[tuple[int, int, float]] = field(default_factory=list)


def summarize_trial(
    records: list[RoundRecord],
    boundaries: tuple[int, ...],
    alpha: float,
    theta_by_epoch: list[np.ndarray | None] | None = None,
    theta_star: np.ndarray | None = None,
    basis_by_epoch: list[np.ndarray | None] | None = None,
    b_star: np.ndarray | None = None,
    sd_trace: list[tuple[int, int, float]] | None = None,
) -> TrialMetrics:
    """Fold one trial's records into cumulative regret / violation curves,
    attaching per-epoch estimation errors and subspace distances when the
    corresponding estimates and ground truth are available."""
    regret = 0.0
    violations = 0
    regret_by_epoch = [0.0] * len(boundaries)
    violations_by_epoch = [0] * len(boundaries)
    for rec in records:
        regret += instantaneous_regret(rec, rec.optimal_reward)
        violations += int(violation_check(rec, alpha))
        regret_by_epoch[rec.epoch - 1] = regret
        violations_by_epoch[rec.epoch - 1] = violations
    # Epochs with no records inherit the running totals of the previous one.
    for m in range(1, len(boundaries)):
        if regret_by_epoch[m] == 0.0 and violations_by_epoch[m] == 0:
            regret_by_epoch[m] = regret_by_epoch[m - 1]
            violations_by_epoch[m] = max(violations_by_epoch[m], violations_by_epoch[m - 1])

    est_by_epoch: list[float | None] = []
    if theta_by_epoch is not None and theta_star is not None:
        for th in theta_by_epoch:
            est_by_epoch.append(None if th is None else estimation_error(th, theta_star))
    sd_by_epoch: list[float | None] = []
    if basis_by_epoch is not None and b_star is not None:
        for bb in basis_by_epoch:
            sd_by_epoch.append(None if bb is None else subspace_distance(bb, b_star))
    return TrialMetrics(
        cumulative_regret=regret,
        violations=violations,
        regret_by_epoch=regret_by_epoch,
        violations_by_epoch=violations_by_epoch,
        est_error_by_epoch=est_by_epoch,
        sd_by_epoch=sd_by_epoch,
        sd_trace=list(sd_trace or []),
    )


def mean_and_se(values: list[float]) -> tuple[float, float]:
    """Sample mean and standard error; SE is 0 for a single value."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("nothing to aggregate")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))
