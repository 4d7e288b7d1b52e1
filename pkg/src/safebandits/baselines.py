"""Benchmark learners sharing the environment interface: conservative
per-task Thompson sampling, a trace-norm convex-relaxation learner, and a
method-of-moments learner.

The trace-norm and method-of-moments learners explore without regard to
the stage-wise constraint; their violation counts are a reported output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .environment import RoundRecord, rng_for, STREAM_ALGO
from .linalg import (
    DegenerateMatrixError,
    _sign_canonicalize,
    least_squares,
    svd_soft_threshold,
)
from .solver import ConfigurationError, EpochSchedule, greedy_action

# Lanes within the per-trial algorithm stream.
TS_LANE = 0
TRACE_LANE = 1
MOM_LANE = 2


class StepSizeError(RuntimeError):
    """Proximal gradient diverged; the step size is too large."""


# ---------------------------------------------------------------------------
# Conservative per-task Thompson sampling
# ---------------------------------------------------------------------------

@dataclass
class TsTaskState:
    """Regularized least-squares state for one task."""

    gram: np.ndarray            # (d, d) = reg * I + sum x x^T
    moment: np.ndarray          # (d,)   = sum x y
    theta_rls: np.ndarray       # gram^{-1} moment
    confidence_radius: float
    rounds: int = 0

    @classmethod
    def create(cls, d: int, reg: float, radius: float) -> "TsTaskState":
        return cls(
            gram=reg * np.eye(d),
            moment=np.zeros(d),
            theta_rls=np.zeros(d),
            confidence_radius=radius,
            rounds=0,
        )

    def update(self, x: np.ndarray, reward: float, radius: float) -> None:
        self.gram += np.outer(x, x)
        self.moment += x * reward
        self.theta_rls = np.linalg.solve(self.gram, self.moment)
        self.confidence_radius = radius
        self.rounds += 1


def ts_confidence_radius(
    n: int, d: int, delta: float, sigma_eta: float, reg: float, norm_bound: float
) -> float:
    """Standard self-normalized radius: noise term plus the prior term."""
    return sigma_eta * math.sqrt(d * math.log((1.0 + n) / delta)) + math.sqrt(reg) * norm_bound


def ts_select_action(
    state: TsTaskState,
    actions: np.ndarray,
    baseline_index: int,
    baseline_reward: float,
    alpha: float,
    rng: np.random.Generator,
) -> int:
    """Sample theta from the posterior and play its argmax over the safe
    set; fall back to the baseline action when the safe set is empty.

    Safe set: candidates whose pessimistic value x^T theta_rls -
    beta ||x||_{gram^-1} reaches (1 - alpha) times the baseline reward.
    """
    actions = np.asarray(actions)
    beta = state.confidence_radius
    sol = np.linalg.solve(state.gram, actions.T)            # (d, K)
    quad = np.einsum("kd,dk->k", actions, sol)
    pessimistic = actions @ state.theta_rls - beta * np.sqrt(np.maximum(quad, 0.0))
    safe = pessimistic >= (1.0 - alpha) * baseline_reward
    if not safe.any():
        return int(baseline_index)
    chol = np.linalg.cholesky(state.gram)
    perturb = np.linalg.solve(chol.T, rng.standard_normal(state.gram.shape[0]))
    scores = actions @ (state.theta_rls + beta * perturb)
    scores[~safe] = -np.inf
    return int(np.argmax(scores))


@dataclass
class BaselineRun:
    records: list[RoundRecord]
    theta_by_epoch: list[np.ndarray | None]
    basis_by_epoch: list[np.ndarray | None]
    sd_trace: list = field(default_factory=list)


def run_conservative_ts(
    env,
    schedule: EpochSchedule,
    alpha: float,
    delta: float,
    trial_seed: int,
    reg: float = 1.0,
    norm_bound: float | None = None,
) -> BaselineRun:
    """T independent conservative Thompson-sampling tasks on the shared
    environment stream."""
    model = env.model
    T, d = model.tasks, model.d
    if norm_bound is None:
        norm_bound = model.col_norm_bounds[1]
    rngs = [rng_for(trial_seed, STREAM_ALGO, TS_LANE, t) for t in range(T)]
    radius0 = ts_confidence_radius(0, d, delta, env.sigma_eta, reg, norm_bound)
    states = [TsTaskState.create(d, reg, radius0) for _ in range(T)]

    records: list[RoundRecord] = []
    theta_by_epoch: list[np.ndarray | None] = []
    for m, (lo, hi) in enumerate(schedule.ranges(), start=1):
        for n in range(lo, hi):
            for t in range(T):
                rnd = env.new_round(t)
                idx = ts_select_action(
                    states[t], rnd.actions, rnd.baseline_index, rnd.baseline_reward,
                    alpha, rngs[t],
                )
                x = rnd.actions[idx]
                reward, expected, noise = env.play(rnd, x)
                records.append(RoundRecord(
                    epoch=m, round=n + 1, task=t, action=x, reward=reward,
                    expected_reward=expected, optimal_reward=rnd.optimal_reward,
                    baseline_reward=rnd.baseline_reward,
                    safe=expected >= (1.0 - alpha) * rnd.baseline_reward,
                    noise=noise,
                ))
                radius = ts_confidence_radius(
                    states[t].rounds + 1, d, delta, env.sigma_eta, reg, norm_bound
                )
                states[t].update(x, reward, radius)
        theta_by_epoch.append(np.column_stack([s.theta_rls for s in states]))
    return BaselineRun(records, theta_by_epoch, [None] * schedule.epochs)


# ---------------------------------------------------------------------------
# Trace-norm convex relaxation
# ---------------------------------------------------------------------------

def trace_norm_objective(
    theta: np.ndarray, features: np.ndarray, rewards: np.ndarray, lam: float
) -> float:
    pred = np.einsum("tnd,dt->tn", features, theta)
    fit = 0.5 * float(np.sum((rewards - pred) ** 2))
    nuclear = float(np.sum(np.linalg.svd(theta, compute_uv=False)))
    return fit + lam * nuclear


def trace_norm_fit(
    features: np.ndarray,
    rewards: np.ndarray,
    lam: float,
    iters: int,
    step: float,
) -> np.ndarray:
    """Proximal gradient on 0.5 sum_t ||y_t - F_t theta_t||^2 + lam ||Theta||_*.

    Stops after `iters` steps or once the iterate's relative change drops
    below 1e-8; raises StepSizeError if the objective ever increases
    (it cannot under a step below the gradient's Lipschitz constant).
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    features = np.asarray(features, dtype=float)   # (T, n, d)
    rewards = np.asarray(rewards, dtype=float)     # (T, n)
    d = features.shape[2]
    T = features.shape[0]
    theta = np.zeros((d, T))
    obj = trace_norm_objective(theta, features, rewards, lam)
    initial_obj = obj
    for _ in range(iters):
        pred = np.einsum("tnd,dt->tn", features, theta)
        grad = np.einsum("tnd,tn->dt", features, pred - rewards)
        theta_next = svd_soft_threshold(theta - step * grad, step * lam)
        obj_next = trace_norm_objective(theta_next, features, rewards, lam)
        if obj_next > 10.0 * max(initial_obj, 1e-12):
            raise StepSizeError(
                f"objective grew from {initial_obj:.3e} to {obj_next:.3e}; reduce the step"
            )
        if obj_next > obj + 1e-9 * max(1.0, obj):
            raise StepSizeError(
                f"objective increased within one step ({obj:.6e} -> {obj_next:.6e})"
            )
        change = np.linalg.norm(theta_next - theta, "fro")
        theta, obj = theta_next, obj_next
        if change <= 1e-8 * max(1.0, np.linalg.norm(theta, "fro")):
            break
    return theta


def default_trace_step(features: np.ndarray) -> float:
    """1 / max_t sigma_max(F_t^T F_t): the descent-safe step for the 0.5-scaled fit."""
    top = max(
        float(np.linalg.norm(np.asarray(f), 2)) ** 2 for f in features
    )
    return 1.0 / top


def default_trace_lambda(
    sigma_eta: float, d: int, T: int, samples_per_task: int, scale: float = 1.0
) -> float:
    return scale * sigma_eta * math.sqrt(T * (d + T) * samples_per_task)


def run_trace_norm(
    env,
    schedule: EpochSchedule,
    alpha: float,
    trial_seed: int,
    lambda_scale: float = 1.0,
    iters: int = 200,
) -> BaselineRun:
    """Unconstrained learner: random exploration in epoch 1, then greedy on
    a trace-norm fit of all data collected so far, refit after each epoch."""
    model = env.model
    T, d = model.tasks, model.d
    rng = rng_for(trial_seed, STREAM_ALGO, TRACE_LANE)

    records: list[RoundRecord] = []
    theta_by_epoch: list[np.ndarray | None] = []
    all_feats: list[np.ndarray] = []
    all_rews: list[np.ndarray] = []
    theta_hat: np.ndarray | None = None
    for m, (lo, hi) in enumerate(schedule.ranges(), start=1):
        n_epoch = hi - lo
        feats = np.empty((T, n_epoch, d))
        rews = np.empty((T, n_epoch))
        for j, n in enumerate(range(lo, hi)):
            for t in range(T):
                rnd = env.new_round(t)
                if theta_hat is None:
                    idx = int(rng.integers(rnd.actions.shape[0]))
                    x = rnd.actions[idx]
                else:
                    _, x = greedy_action(theta_hat[:, t], rnd.actions)
                reward, expected, noise = env.play(rnd, x)
                records.append(RoundRecord(
                    epoch=m, round=n + 1, task=t, action=x, reward=reward,
                    expected_reward=expected, optimal_reward=rnd.optimal_reward,
                    baseline_reward=rnd.baseline_reward,
                    safe=expected >= (1.0 - alpha) * rnd.baseline_reward,
                    noise=noise,
                ))
                feats[t, j] = x
                rews[t, j] = reward
        all_feats.append(feats)
        all_rews.append(rews)
        stacked_f = np.concatenate(all_feats, axis=1)
        stacked_y = np.concatenate(all_rews, axis=1)
        lam = default_trace_lambda(env.sigma_eta, d, T, stacked_f.shape[1], lambda_scale)
        step = default_trace_step(stacked_f)
        theta_hat = trace_norm_fit(stacked_f, stacked_y, lam, iters, step)
        theta_by_epoch.append(theta_hat)
    return BaselineRun(records, theta_by_epoch, [None] * schedule.epochs)


# ---------------------------------------------------------------------------
# Method of moments
# ---------------------------------------------------------------------------

def mom_estimate(
    features: np.ndarray,
    rewards: np.ndarray,
    r: int,
    later_features: np.ndarray,
    later_rewards: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subspace from the y^2-weighted second moment of first-phase features,
    coefficients from least squares on the second phase: (B, W, Theta)."""
    features = np.asarray(features, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    total = features.shape[0] * features.shape[1]
    moment = np.einsum("tnd,tn,tne->de", features, rewards**2, features) / total
    eigvals, eigvecs = np.linalg.eigh(moment)
    eigvals, eigvecs = eigvals[::-1], eigvecs[:, ::-1]
    if eigvals[r - 1] <= 1e-12 * max(eigvals[0], 1e-300):
        raise DegenerateMatrixError(
            f"moment matrix rank below r={r} (eigenvalue {eigvals[r - 1]:.3e})",
            singular_value=float(eigvals[r - 1]),
        )
    b = _sign_canonicalize(eigvecs[:, :r])
    T = features.shape[0]
    w = np.empty((r, T))
    for t in range(T):
        w[:, t] = least_squares(np.asarray(later_features[t]) @ b, later_rewards[t])
    return b, w, b @ w


def run_mom(
    env,
    schedule: EpochSchedule,
    alpha: float,
    trial_seed: int,
) -> BaselineRun:
    """Unconstrained learner: random exploration through epochs 1-2, a
    single moment/least-squares fit, then greedy play."""
    if schedule.epochs < 2:
        raise ConfigurationError("method of moments needs at least two epochs")
    model = env.model
    T, d, r = model.tasks, model.d, model.rank
    rng = rng_for(trial_seed, STREAM_ALGO, MOM_LANE)

    records: list[RoundRecord] = []
    theta_by_epoch: list[np.ndarray | None] = []
    basis_by_epoch: list[np.ndarray | None] = []
    phases: list[tuple[np.ndarray, np.ndarray]] = []
    theta_hat = None
    b_hat = None
    for m, (lo, hi) in enumerate(schedule.ranges(), start=1):
        n_epoch = hi - lo
        feats = np.empty((T, n_epoch, d))
        rews = np.empty((T, n_epoch))
        for j, n in enumerate(range(lo, hi)):
            for t in range(T):
                rnd = env.new_round(t)
                if theta_hat is None:
                    idx = int(rng.integers(rnd.actions.shape[0]))
                    x = rnd.actions[idx]
                else:
                    _, x = greedy_action(theta_hat[:, t], rnd.actions)
                reward, expected, noise = env.play(rnd, x)
                records.append(RoundRecord(
                    epoch=m, round=n + 1, task=t, action=x, reward=reward,
                    expected_reward=expected, optimal_reward=rnd.optimal_reward,
                    baseline_reward=rnd.baseline_reward,
                    safe=expected >= (1.0 - alpha) * rnd.baseline_reward,
                    noise=noise,
                ))
                feats[t, j] = x
                rews[t, j] = reward
        if m <= 2:
            phases.append((feats, rews))
        if m == 2:
            b_hat, w_hat, theta_hat = mom_estimate(
                phases[0][0], phases[0][1], r, phases[1][0], phases[1][1]
            )
        theta_by_epoch.append(None if theta_hat is None else theta_hat)
        basis_by_epoch.append(None if b_hat is None else b_hat)
    return BaselineRun(records, theta_by_epoch, basis_by_epoch)
