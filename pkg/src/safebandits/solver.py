"""Safe alternating GD/minimization learner for the constrained
multi-task bandit.

Epoch 1 plays conservatively mixed baseline actions, estimates the shared
low-rank subspace by truncated spectral initialization, and refines it with
sample-split alternating least-squares / projected gradient iterations.
Later epochs play greedily against the previous epoch's estimate and keep
refining, warm-started from the previous basis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .environment import ActionRound, RoundRecord, rng_for, STREAM_SOLVER
from .linalg import (
    DegenerateMatrixError,
    least_squares,
    qr_orthonormalize,
    subspace_distance,
    top_r_svd,
)


class ScheduleError(ValueError):
    """Epoch schedule cannot be built from the given parameters."""


class ConfigurationError(ValueError):
    """Solver parameters are infeasible for the data sizes in play."""


class ParameterError(ValueError):
    """A learning-rate or mixing parameter is outside its valid domain."""


class InitializationError(RuntimeError):
    """Spectral initialization received degenerate data."""


# Mixing values here keep the first-epoch design Gram well conditioned;
# outside them the solver still runs but warns.
RHO_SAFE_REGIONS = ((0.0, 0.25), (0.75, 1.0))


@dataclass
class SolverParams:
    """Knobs of the alternating learner.

    gd_step=None activates the data-driven step-size heuristic with scale
    gd_step_scale; trunc_multiplier=None activates the data-driven
    truncation multiplier (clamped to >= 9). step_cap bounds
    gamma * ||W||^2 per iteration for numerical stability. target_error is
    reporting-only.
    """

    rho: float = 0.1
    gd_iters: int = 10
    gd_step: float | None = None
    gd_step_scale: float = 0.4
    step_cap: float = 0.9
    trunc_multiplier: float | None = None
    target_error: float = 0.1
    sample_split: bool = False
    enforce_safety: bool = True

    def validate(self) -> "SolverParams":
        if self.gd_iters < 1:
            raise ConfigurationError("gd_iters must be at least 1")
        if not (0.0 <= self.rho <= 1.0):
            raise ParameterError(f"rho={self.rho} outside [0, 1]")
        if not any(lo <= self.rho <= hi for lo, hi in RHO_SAFE_REGIONS):
            warnings.warn(
                f"rho={self.rho} outside the analyzed regions "
                f"[0, 0.25] and [0.75, 1]; contraction constants may degrade",
                RuntimeWarning,
            )
        if self.gd_step is None and not (0.0 < self.gd_step_scale <= 0.5):
            raise ParameterError("gd_step_scale must lie in (0, 0.5]")
        if self.gd_step is not None and self.gd_step <= 0:
            raise ParameterError("gd_step must be positive when given")
        if not (0.0 < self.step_cap < 1.0):
            raise ParameterError("step_cap must lie in (0, 1)")
        if self.trunc_multiplier is not None and self.trunc_multiplier <= 0:
            raise ParameterError("trunc_multiplier must be positive when given")
        return self


@dataclass(frozen=True)
class EpochSchedule:
    """Strictly increasing cumulative round counts, ending at the horizon."""

    boundaries: tuple[int, ...]

    @property
    def horizon(self) -> int:
        return self.boundaries[-1]

    @property
    def epochs(self) -> int:
        return len(self.boundaries)

    def ranges(self) -> list[tuple[int, int]]:
        """Half-open global round ranges [lo, hi) per epoch."""
        lows = (0,) + self.boundaries[:-1]
        return list(zip(lows, self.boundaries))

    def min_epoch_length(self) -> int:
        return min(hi - lo for lo, hi in self.ranges())


def epoch_boundaries(
    n: int | None = None,
    mode: str = "doubling",
    epochs: int | None = None,
    per_epoch: int | None = None,
) -> EpochSchedule:
    """Build the horizon partition.

    doubling: M = ceil(log2 log2 N) epochs with G_m = round(N^(1 - 2^-m)),
    last boundary forced to N and duplicates dropped. fixed: `epochs`
    equal epochs of `per_epoch` rounds.
    """
    if mode == "fixed":
        if not epochs or not per_epoch or epochs < 1 or per_epoch < 1:
            raise ScheduleError("fixed mode needs positive epochs and per-epoch rounds")
        return EpochSchedule(tuple(per_epoch * (m + 1) for m in range(epochs)))
    if mode != "doubling":
        raise ScheduleError(f"unknown schedule mode {mode!r}")
    if n is None or n < 4:
        raise ScheduleError(f"doubling schedule needs a horizon N >= 4, got {n}")
    m_total = math.ceil(math.log2(math.log2(n)))
    bounds: list[int] = []
    for m in range(1, m_total):
        g = int(math.floor(n ** (1.0 - 2.0 ** (-m)) + 0.5))
        if g > (bounds[-1] if bounds else 0) and g < n:
            bounds.append(g)
    bounds.append(n)
    return EpochSchedule(tuple(bounds))


@dataclass(frozen=True)
class Estimate:
    """Learner state after one epoch: theta_hat = b_hat @ w_hat."""

    b_hat: np.ndarray      # (d, r)
    w_hat: np.ndarray      # (r, T)
    theta_hat: np.ndarray  # (d, T)
    epoch: int
    gd_iter: int


def rho_upper_bound(
    alpha: float,
    baseline_reward: float,
    r: int,
    T: int,
    G1: int,
    delta: float,
    mu: float,
    sigma_max: float,
) -> float:
    """Largest exploration mix for which the conservative action provably
    stays safe: alpha r_b / (r_b + sqrt(2 (r/T) log(G1 T / delta)) mu s_max).

    Nonpositive baseline rewards return 0 (only pure baseline play is
    covered by the bound there).
    """
    if baseline_reward <= 0:
        return 0.0
    if not (0.0 <= alpha < 1.0):
        raise ParameterError(f"alpha={alpha} outside [0, 1)")
    if min(r, T, G1) < 1 or not (0 < delta < 1) or mu < 1 or sigma_max <= 0:
        raise ParameterError("rho bound needs positive counts, delta in (0,1), mu >= 1")
    tail = math.sqrt(2.0 * (r / T) * math.log(G1 * T / delta)) * mu * sigma_max
    return alpha * baseline_reward / (baseline_reward + tail)


def conservative_action(baseline: np.ndarray, zeta: np.ndarray, rho: float) -> np.ndarray:
    """Convex mix (1 - rho) * baseline + rho * zeta."""
    if not (0.0 <= rho <= 1.0):
        raise ParameterError(f"rho={rho} outside [0, 1]")
    return (1.0 - rho) * np.asarray(baseline) + rho * np.asarray(zeta)


def truncation_threshold(rewards: np.ndarray, trunc_multiplier: float) -> float:
    """Energy-based truncation level: multiplier times the mean squared
    reward. Samples with y^2 above it are zeroed in the init sum."""
    rewards = np.asarray(rewards, dtype=float).ravel()
    if rewards.size == 0:
        raise ValueError("need at least one reward to set the truncation level")
    if trunc_multiplier <= 0:
        raise ValueError("truncation multiplier must be positive")
    return float(trunc_multiplier * np.mean(rewards**2))


def estimate_trunc_multiplier(per_task_rewards: np.ndarray) -> float:
    """Data-driven truncation multiplier 9 * T max_t mean(y_t^2) / sum_t
    mean(y_t^2), clamped to the theoretical floor 9.

    Falls back to 9 (with a warning) when the rewards carry no energy.
    """
    rews = [np.asarray(row, dtype=float).ravel() for row in per_task_rewards]
    if any(row.size == 0 for row in rews):
        raise ValueError("every task needs at least one first-epoch sample")
    means = np.array([np.mean(row**2) for row in rews])
    total = float(means.sum())
    if total <= 0.0:
        warnings.warn("all-zero first-epoch rewards; using truncation multiplier 9",
                      RuntimeWarning)
        return 9.0
    return max(9.0, 9.0 * len(means) * float(means.max()) / total)


def init_matrix(features: np.ndarray, rewards: np.ndarray, tau: float) -> np.ndarray:
    """Truncated first-moment matrix: column t is the per-sample average of
    x * y over task t's init split, with samples where y^2 > tau zeroed."""
    features = np.asarray(features, dtype=float)   # (T, n, d)
    rewards = np.asarray(rewards, dtype=float)     # (T, n)
    y_trunc = np.where(rewards**2 <= tau, rewards, 0.0)
    n = features.shape[1]
    return np.einsum("tnd,tn->dt", features, y_trunc) / n


def spectral_init(features: np.ndarray, rewards: np.ndarray, tau: float, r: int) -> np.ndarray:
    """Top-r left singular basis of the truncated first-moment matrix."""
    theta0 = init_matrix(features, rewards, tau)
    if not np.any(theta0):
        raise InitializationError(
            "spectral initialization saw an all-zero moment matrix "
            "(all samples truncated or zero rewards)"
        )
    return top_r_svd(theta0, r).left


def split_samples(
    n_samples: int, gd_iters: int, with_init_set: bool = False, min_size: int = 1
) -> list[slice]:
    """Contiguous equal partition of per-task samples into 2L sets
    (2L + 1 with an init set); the remainder is appended to the last split.

    Split 0 (when present) feeds initialization, splits 1..L the
    minimization steps, and splits L+1..2L the gradient steps.
    """
    pieces = 2 * gd_iters + (1 if with_init_set else 0)
    base = n_samples // pieces
    if base < min_size:
        raise ConfigurationError(
            f"cannot split {n_samples} samples into {pieces} sets of at least "
            f"{min_size}: needs {pieces * min_size} samples per task"
        )
    sizes = [base] * pieces
    sizes[-1] += n_samples - base * pieces
    out, start = [], 0
    for size in sizes:
        out.append(slice(start, start + size))
        start += size
    return out


def min_step_w(b: np.ndarray, features: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """Exact per-task least squares: column t solves min_w ||y_t - F_t b w||."""
    T = len(features)
    w = np.empty((b.shape[1], T))
    for t in range(T):
        w[:, t] = least_squares(np.asarray(features[t]) @ b, rewards[t])
    return w


def grad_b(
    b: np.ndarray, w: np.ndarray, features: np.ndarray, rewards: np.ndarray
) -> np.ndarray:
    """Gradient of 0.5 sum_t ||y_t - F_t b w_t||^2 with respect to b."""
    features = np.asarray(features, dtype=float)   # (T, n, d)
    rewards = np.asarray(rewards, dtype=float)     # (T, n)
    proj = np.einsum("tnd,dr->tnr", features, b)
    resid = np.einsum("tnr,rt->tn", proj, w) - rewards
    weighted = np.einsum("tnd,tn->dt", features, resid)
    return weighted @ w.T


def grad_step_b(
    b: np.ndarray,
    w: np.ndarray,
    features: np.ndarray,
    rewards: np.ndarray,
    gamma: float,
    split_size: int,
) -> np.ndarray:
    """One projected gradient step: QR(b - (gamma / split_size) grad)."""
    if split_size < 1:
        raise ConfigurationError("gradient split is empty")
    step = b - (gamma / split_size) * grad_b(b, w, features, rewards)
    try:
        return qr_orthonormalize(step)
    except DegenerateMatrixError as exc:
        raise DegenerateMatrixError(
            f"basis collapsed after gradient step (gamma={gamma:.3e}): {exc}",
            singular_value=exc.singular_value,
        ) from exc


def practical_gd_step(theta0_norm: float, rho: float, c: float = 0.4) -> float:
    """Data-driven step size c / ((1 + 0.04 / (1 - 2 rho)^2)^2 ||Theta0||^2),
    with ||Theta0|| standing in for the unknown top singular value."""
    if theta0_norm <= 0:
        raise ParameterError("theta0_norm must be positive")
    if abs(1.0 - 2.0 * rho) < 1e-12:
        raise ParameterError("step-size heuristic is singular at rho = 0.5")
    return c / ((1.0 + 0.04 / (1.0 - 2.0 * rho) ** 2) ** 2 * theta0_norm**2)


def greedy_action(theta_t: np.ndarray, actions: np.ndarray) -> tuple[int, np.ndarray]:
    """Candidate maximizing the estimated reward; ties go to the lowest index."""
    actions = np.asarray(actions)
    if actions.shape[0] == 0:
        raise ValueError("empty action set")
    idx = int(np.argmax(actions @ np.asarray(theta_t)))
    return idx, actions[idx]


@dataclass
class SolverRun:
    """Everything the harness needs from one trial of the solver."""

    records: list[RoundRecord]
    estimates: list[Estimate]
    theta_by_epoch: list[np.ndarray | None]
    basis_by_epoch: list[np.ndarray | None]
    sd_trace: list[tuple[int, int, float]] = field(default_factory=list)
    gamma: float = float("nan")
    trunc_multiplier: float = float("nan")
    trunc_threshold: float = float("nan")
    rho_effective: tuple[float, float] = (float("nan"), float("nan"))
    gd_iter_floor: float | None = None
    gd_iter_floor_met: bool | None = None


def _epoch_split_plan(n_epoch: int, params: SolverParams, r: int, first_epoch: bool):
    """(init_slice, min_slices, grad_slices, grad_rounds) for one epoch."""
    L = params.gd_iters
    if params.sample_split:
        slices = split_samples(n_epoch, L, with_init_set=first_epoch, min_size=r)
        offset = 1 if first_epoch else 0
        init_sl = slices[0] if first_epoch else None
        return init_sl, slices[offset:offset + L], slices[offset + L:offset + 2 * L]
    full = slice(0, n_epoch)
    return (full if first_epoch else None), [full] * L, [full] * L


def run_safe_altgdmin(
    env,
    schedule: EpochSchedule,
    params: SolverParams,
    alpha: float,
    delta: float,
    trial_seed: int,
) -> SolverRun:
    """Run the full algorithm against an environment for one trial.

    Exploration vectors come from per-(trial, task) solver-side streams so
    the environment stream stays shared across algorithms.
    """
    params.validate()
    model = env.model
    T, d, r = model.tasks, model.d, model.rank
    L = params.gd_iters
    g1 = schedule.boundaries[0]
    shortest = schedule.min_epoch_length()
    if params.sample_split and shortest < (2 * L + 1) * r:
        raise ConfigurationError(
            f"shortest epoch has {shortest} rounds per task; sample splitting "
            f"with L={L} needs at least {(2 * L + 1) * r}"
        )
    if shortest < r:
        raise ConfigurationError(
            f"shortest epoch has {shortest} rounds per task; the minimization "
            f"step needs at least r={r}"
        )
    zeta_rngs = [rng_for(trial_seed, STREAM_SOLVER, t) for t in range(T)]

    records: list[RoundRecord] = []
    estimates: list[Estimate] = []
    sd_trace: list[tuple[int, int, float]] = []
    gamma = params.gd_step
    trunc_mult = float("nan")
    tau = float("nan")
    rho_lo, rho_hi = math.inf, -math.inf
    gap_sum = 0.0
    rb_sum = 0.0
    b = None
    prev_theta: np.ndarray | None = None

    for m, (lo, hi) in enumerate(schedule.ranges(), start=1):
        n_epoch = hi - lo
        feats = np.empty((T, n_epoch, d))
        rews = np.empty((T, n_epoch))
        for j, n in enumerate(range(lo, hi)):
            for t in range(T):
                rnd = env.new_round(t)
                if m == 1:
                    zeta = zeta_rngs[t].standard_normal(d)
                    rho_eff = params.rho
                    if params.enforce_safety:
                        bound = rho_upper_bound(
                            alpha, rnd.baseline_reward, r, T, g1, delta,
                            model.mu, model.sigma_max,
                        )
                        rho_eff = min(rho_eff, bound)
                    rho_lo, rho_hi = min(rho_lo, rho_eff), max(rho_hi, rho_eff)
                    x = conservative_action(rnd.actions[rnd.baseline_index], zeta, rho_eff)
                    gap_sum += rnd.baseline_gap
                    rb_sum += rnd.baseline_reward
                else:
                    _, x = greedy_action(prev_theta[:, t], rnd.actions)
                reward, expected, noise = env.play(rnd, x)
                records.append(RoundRecord(
                    epoch=m,
                    round=n + 1,
                    task=t,
                    action=x,
                    reward=reward,
                    expected_reward=expected,
                    # The conservative mix lies outside the candidate set and
                    # can edge past the best candidate; the round's effective
                    # optimum covers everything that was playable.
                    optimal_reward=max(rnd.optimal_reward, expected),
                    baseline_reward=rnd.baseline_reward,
                    safe=expected >= (1.0 - alpha) * rnd.baseline_reward,
                    noise=noise,
                ))
                feats[t, j] = x
                rews[t, j] = reward

        init_sl, min_slices, grad_slices = _epoch_split_plan(n_epoch, params, r, m == 1)
        if m == 1:
            trunc_mult = (params.trunc_multiplier if params.trunc_multiplier is not None
                          else estimate_trunc_multiplier(rews))
            tau = truncation_threshold(rews, trunc_mult)
            theta0 = init_matrix(feats[:, init_sl], rews[:, init_sl], tau)
            if not np.any(theta0):
                raise InitializationError(
                    "epoch 1 spectral initialization degenerate: moment matrix is zero"
                )
            svd0 = top_r_svd(theta0, r)
            b = svd0.left
            sd_trace.append((1, 0, subspace_distance(b, model.b_star)))
            if gamma is None:
                rho_for_gamma = rho_lo if params.enforce_safety else params.rho
                gamma = practical_gd_step(
                    float(svd0.singular_values[0]), rho_for_gamma, params.gd_step_scale
                )

        w = None
        for ell in range(1, L + 1):
            msl, gsl = min_slices[ell - 1], grad_slices[ell - 1]
            w = min_step_w(b, feats[:, msl], rews[:, msl])
            # Keep gamma * ||W||^2 below step_cap so I - gamma W W^T stays PSD
            # even when the data-driven scale estimate is off.
            w_norm = float(np.linalg.norm(w, 2))
            gamma_eff = gamma if w_norm == 0.0 else min(gamma, params.step_cap / w_norm**2)
            try:
                b = grad_step_b(
                    b, w, feats[:, gsl], rews[:, gsl], gamma_eff, gsl.stop - gsl.start
                )
            except DegenerateMatrixError as exc:
                sd_now = subspace_distance(b, model.b_star)
                raise DegenerateMatrixError(
                    f"epoch {m} GD iteration {ell} degenerate (current SD {sd_now:.3e}): {exc}",
                    singular_value=exc.singular_value,
                ) from exc
            sd_trace.append((m, ell, subspace_distance(b, model.b_star)))

        est = Estimate(b_hat=b, w_hat=w, theta_hat=b @ w, epoch=m, gd_iter=L)
        estimates.append(est)
        prev_theta = est.theta_hat

    floor = _gd_iter_floor(model, schedule, params, alpha, delta,
                           gap_sum / (g1 * T), rb_sum / (g1 * T))
    return SolverRun(
        records=records,
        estimates=estimates,
        theta_by_epoch=[e.theta_hat for e in estimates],
        basis_by_epoch=[e.b_hat for e in estimates],
        sd_trace=sd_trace,
        gamma=float(gamma),
        trunc_multiplier=float(trunc_mult),
        trunc_threshold=float(tau),
        rho_effective=(rho_lo, rho_hi) if rho_lo <= rho_hi else (params.rho, params.rho),
        gd_iter_floor=floor,
        gd_iter_floor_met=None if floor is None else params.gd_iters >= floor,
    )


def _gd_iter_floor(model, schedule, params, alpha, delta, mean_gap, mean_rb):
    """Functional form of the theoretical iteration floor, evaluated with
    unit leading constant and epoch-1 average gap/baseline; diagnostics only."""
    rho = params.rho
    if abs(1.0 - 2.0 * rho) < 1e-12:
        return None
    denom = (2.0 * (1.0 + 2.0 / (1.0 - 2.0 * rho) ** 2) * model.mu * model.sigma_max
             * math.sqrt(2.0 * model.rank / model.tasks
                         * math.log(schedule.horizon * model.tasks / delta)))
    numer = mean_gap + alpha * mean_rb
    if numer <= 0 or denom <= 0:
        return None
    return model.kappa**2 * math.log(max(numer / denom, 1e-300))
