"""Synthetic multi-task bandit world.

A hidden rank-r reward matrix Theta* = B* W* drives T linear bandit tasks.
Each round every task receives K fresh i.i.d. standard Gaussian candidate
actions; the baseline policy plays the baseline_rank-th best of them, and
rewards are observed under additive Gaussian noise.

Per-(trial, task) RNG streams make the full action/noise stream
bit-reproducible and independent of how tasks are scheduled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .linalg import DimensionError, qr_orthonormalize, top_r_svd

# Spawn keys for the per-trial random streams. Environment draws must be
# identical across algorithms, so only algorithm-side streams carry slot ids.
STREAM_MODEL = 0
STREAM_ENV = 1
STREAM_SOLVER = 2
STREAM_ALGO = 3


def rng_for(trial_seed: int, stream: int, *key: int) -> np.random.Generator:
    """Deterministic generator for one (trial, stream, key...) lane."""
    return np.random.default_rng(np.random.SeedSequence([trial_seed, stream, *key]))


@dataclass(frozen=True)
class TaskModel:
    """Ground truth of the environment plus its spectral summary.

    theta_star = b_star @ w_star holds to machine precision; sigma_max,
    sigma_min, kappa refer to the r nonzero singular values of theta_star;
    mu is the column-imbalance bound u/l; nsr = T sigma_eta^2 / sigma_min^2.
    """

    theta_star: np.ndarray       # (d, T)
    b_star: np.ndarray           # (d, r), orthonormal columns
    w_star: np.ndarray           # (r, T)
    sigma_max: float
    sigma_min: float
    kappa: float
    mu: float
    nsr: float
    col_norm_bounds: tuple[float, float]

    @property
    def d(self) -> int:
        return self.theta_star.shape[0]

    @property
    def tasks(self) -> int:
        return self.theta_star.shape[1]

    @property
    def rank(self) -> int:
        return self.b_star.shape[1]


def generate_task_model(
    d: int,
    r: int,
    T: int,
    col_norm_bounds: tuple[float, float] = (1.0, 2.0),
    rng_seed=0,
    sigma_eta: float = 1e-3,
) -> TaskModel:
    """Draw B* as the QR of a Gaussian matrix and W* with Gaussian column
    directions rescaled to norms uniform in [l, u], so the column-norm
    bounds hold by construction."""
    if not (1 <= r <= min(d, T)):
        raise DimensionError(f"rank r={r} must lie in [1, min(d={d}, T={T})]")
    l, u = col_norm_bounds
    if not (0 < l <= u):
        raise ValueError(f"column-norm bounds need 0 < l <= u, got ({l}, {u})")
    rng = np.random.default_rng(rng_seed)
    b = qr_orthonormalize(rng.standard_normal((d, r)))
    w = rng.standard_normal((r, T))
    targets = rng.uniform(l, u, size=T)
    w = w / np.linalg.norm(w, axis=0) * targets
    theta = b @ w
    s = np.linalg.svd(w, compute_uv=False)
    return TaskModel(
        theta_star=theta,
        b_star=b,
        w_star=w,
        sigma_max=float(s[0]),
        sigma_min=float(s[r - 1]),
        kappa=float(s[0] / s[r - 1]),
        mu=float(u / l),
        nsr=float(T * sigma_eta**2 / s[r - 1] ** 2),
        col_norm_bounds=(float(l), float(u)),
    )


def task_model_from_theta(theta_star: np.ndarray, r: int, sigma_eta: float = 1e-3) -> TaskModel:
    """Wrap an explicit reward matrix (e.g. the MovieLens implied truth)."""
    theta_star = np.asarray(theta_star, dtype=float)
    svd = top_r_svd(theta_star, r)
    norms = np.linalg.norm(theta_star, axis=0)
    l, u = float(norms.min()), float(norms.max())
    smax, smin = float(svd.singular_values[0]), float(svd.singular_values[r - 1])
    return TaskModel(
        theta_star=theta_star,
        b_star=svd.left,
        w_star=svd.left.T @ theta_star,
        sigma_max=smax,
        sigma_min=smin,
        kappa=smax / smin,
        mu=u / max(l, np.finfo(float).tiny),
        nsr=float(theta_star.shape[1] * sigma_eta**2 / smin**2),
        col_norm_bounds=(l, u),
    )


@dataclass(frozen=True, slots=True)
class ActionRound:
    """One task's candidate set for one round, with its order statistics
    and the round's pre-drawn reward noise."""

    task: int
    actions: np.ndarray           # (K, d)
    expected_rewards: np.ndarray  # (K,) true expected reward per candidate
    optimal_index: int
    baseline_index: int
    noise: float = 0.0

    @property
    def optimal_reward(self) -> float:
        return float(self.expected_rewards[self.optimal_index])

    @property
    def baseline_reward(self) -> float:
        return float(self.expected_rewards[self.baseline_index])

    @property
    def baseline_gap(self) -> float:
        return self.optimal_reward - self.baseline_reward


@dataclass(frozen=True, slots=True)
class RoundRecord:
    """Unit of metrics aggregation: what one task played in one round."""

    epoch: int
    round: int
    task: int
    action: np.ndarray
    reward: float
    expected_reward: float
    optimal_reward: float
    baseline_reward: float
    safe: bool
    noise: float


def sample_action_round(
    model: TaskModel,
    task: int,
    K: int,
    baseline_rank: int,
    rng: np.random.Generator,
    reward_floor: float | None = None,
    gap_window: tuple[float, float] | None = None,
    max_attempts: int = 1000,
) -> ActionRound:
    """K fresh i.i.d. standard Gaussian actions; baseline is the
    baseline_rank-th best by true expected reward.

    With reward_floor set, action sets whose baseline reward falls at or
    below the floor are redrawn (the stage-wise constraint is vacuous or
    inverted for nonpositive baselines). gap_window optionally redraws
    rounds whose optimal-minus-baseline gap leaves [gap_lo, gap_hi].
    """
    if not (1 <= baseline_rank <= K):
        raise ValueError(f"baseline_rank={baseline_rank} must be in [1, K={K}]")
    theta_t = model.theta_star[:, task]
    best = None
    for _ in range(max_attempts):
        actions = rng.standard_normal((K, model.d))
        expected = actions @ theta_t
        order = np.argsort(-expected, kind="stable")
        optimal = int(order[0])
        baseline = int(order[baseline_rank - 1])
        r_b = float(expected[baseline])
        gap = float(expected[optimal]) - r_b
        ok = True
        if reward_floor is not None and r_b <= reward_floor:
            ok = False
        if gap_window is not None and not (gap_window[0] <= gap <= gap_window[1]):
            ok = False
        candidate = (r_b, actions, expected, optimal, baseline)
        if ok:
            best = candidate
            break
        if best is None or r_b > best[0]:
            best = candidate
    else:
        warnings.warn(
            f"action-set resampling hit {max_attempts} attempts for task {task}; "
            "keeping the best draw seen",
            RuntimeWarning,
        )
    _, actions, expected, optimal, baseline = best
    return ActionRound(
        task=task,
        actions=actions,
        expected_rewards=expected,
        optimal_index=optimal,
        baseline_index=baseline,
    )


def observe_reward(
    model: TaskModel, task: int, x: np.ndarray, sigma_eta: float, rng: np.random.Generator
) -> tuple[float, float]:
    """Noisy linear reward for action x on one task: (reward, noise)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.d,):
        raise DimensionError(f"action has shape {x.shape}, expected ({model.d},)")
    noise = float(sigma_eta * rng.standard_normal())
    return float(x @ model.theta_star[:, task]) + noise, noise


class SyntheticEnvironment:
    """Per-trial environment: lazily draws rounds from per-task streams.

    The draw order inside new_round is fixed (candidate matrix, then one
    noise normal), so two algorithms consuming the same trial's streams see
    byte-identical action sets and noise regardless of what they play.
    """

    name = "synthetic"

    def __init__(
        self,
        model: TaskModel,
        K: int,
        baseline_rank: int,
        sigma_eta: float,
        task_rngs: list[np.random.Generator],
        reward_floor: float | None = 0.0,
        gap_window: tuple[float, float] | None = None,
    ):
        if len(task_rngs) != model.tasks:
            raise DimensionError("need one RNG stream per task")
        self.model = model
        self.K = K
        self.baseline_rank = baseline_rank
        self.sigma_eta = sigma_eta
        self.reward_floor = reward_floor
        self.gap_window = gap_window
        self._rngs = task_rngs

    @property
    def tasks(self) -> int:
        return self.model.tasks

    @property
    def d(self) -> int:
        return self.model.d

    def new_round(self, task: int) -> ActionRound:
        rng = self._rngs[task]
        rnd = sample_action_round(
            self.model,
            task,
            self.K,
            self.baseline_rank,
            rng,
            reward_floor=self.reward_floor,
            gap_window=self.gap_window,
        )
        # One noise normal per (round, task), drawn unconditionally so the
        # stream is identical no matter which action gets played.
        noise = float(self.sigma_eta * rng.standard_normal())
        return replace(rnd, noise=noise)

    def play(self, rnd: ActionRound, x: np.ndarray) -> tuple[float, float, float]:
        """Reward for playing x in this round: (reward, expected, noise).

        The noise was drawn with the round, so every algorithm sees the
        same realization for the same (round, task) whatever it plays.
        """
        expected = float(np.asarray(x) @ self.model.theta_star[:, rnd.task])
        return expected + rnd.noise, expected, rnd.noise


def make_synthetic_environment(
    model: TaskModel,
    trial_seed: int,
    K: int,
    baseline_rank: int,
    sigma_eta: float,
    reward_floor: float | None = 0.0,
    gap_window: tuple[float, float] | None = None,
) -> SyntheticEnvironment:
    rngs = [rng_for(trial_seed, STREAM_ENV, t) for t in range(model.tasks)]
    return SyntheticEnvironment(
        model, K, baseline_rank, sigma_eta, rngs, reward_floor, gap_window
    )
