"""MovieLens-100K feature pipeline.

Parses the tab-separated ratings file, densifies the 943 x 1682 rating
matrix (item-mean fill), factors it with multiplicative-update NMF at
latent dimension sqrt(d), clusters item factors into T task groups with
k-means, and serves outer-product features whose implied reward parameter
is the vectorized identity, so the implied reward matrix has rank 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .environment import (
    ActionRound,
    TaskModel,
    rng_for,
    task_model_from_theta,
    STREAM_ENV,
)

N_USERS = 943
N_ITEMS = 1682


class RatingsParseError(ValueError):
    """Malformed or out-of-range line in the ratings file."""


@dataclass(frozen=True)
class RatingMatrix:
    """Normalized ratings in [0, 1] with an observation mask."""

    values: np.ndarray  # (943, 1682) float, unobserved entries 0
    mask: np.ndarray    # (943, 1682) bool


def parse_ratings(lines) -> RatingMatrix:
    """Parse `user<TAB>item<TAB>rating<TAB>timestamp` lines; ratings are
    divided by 5. Duplicate (user, item) pairs keep the last value and
    trigger one warning."""
    values = np.zeros((N_USERS, N_ITEMS))
    mask = np.zeros((N_USERS, N_ITEMS), dtype=bool)
    duplicates = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise RatingsParseError(
                f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
            )
        try:
            user, item, rating = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise RatingsParseError(f"line {lineno}: non-integer field ({exc})") from exc
        if not (1 <= user <= N_USERS) or not (1 <= item <= N_ITEMS):
            raise RatingsParseError(
                f"line {lineno}: ids ({user}, {item}) outside "
                f"[1, {N_USERS}] x [1, {N_ITEMS}]"
            )
        if not (1 <= rating <= 5):
            raise RatingsParseError(f"line {lineno}: rating {rating} outside 1..5")
        if mask[user - 1, item - 1]:
            duplicates += 1
        values[user - 1, item - 1] = rating / 5.0
        mask[user - 1, item - 1] = True
    if duplicates:
        warnings.warn(
            f"{duplicates} duplicate (user, item) ratings; last write wins",
            RuntimeWarning,
        )
    return RatingMatrix(values=values, mask=mask)


def load_ratings(path) -> RatingMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_ratings(fh)


def fill_missing(ratings: RatingMatrix) -> np.ndarray:
    """Dense nonnegative matrix: unobserved entries get the item mean,
    items nobody rated get the global mean."""
    observed = ratings.values[ratings.mask]
    if observed.size == 0:
        raise ValueError("rating matrix has no observed entries")
    global_mean = float(observed.mean())
    counts = ratings.mask.sum(axis=0)
    sums = (ratings.values * ratings.mask).sum(axis=0)
    item_means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    dense = np.where(ratings.mask, ratings.values, item_means[None, :])
    return dense


def nmf_factorize(
    matrix: np.ndarray, k: int, iters: int = 300, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Multiplicative-update NMF: matrix ~= U @ H with U (m, k) and H (k, n)
    nonnegative. The Frobenius objective is non-increasing per update;
    stops early when its relative change drops below 1e-6."""
    matrix = np.asarray(matrix, dtype=float)
    if np.any(matrix < 0):
        raise ValueError("NMF input must be nonnegative")
    if k < 1:
        raise ValueError("latent dimension must be at least 1")
    m, n = matrix.shape
    rng = np.random.default_rng(seed)
    scale = math.sqrt(max(matrix.mean(), 1e-12) / k)
    u = scale * (0.1 + rng.random((m, k)))
    h = scale * (0.1 + rng.random((k, n)))
    eps = 1e-12
    prev = float(np.linalg.norm(matrix - u @ h, "fro"))
    for _ in range(iters):
        h *= (u.T @ matrix) / np.maximum(u.T @ u @ h, eps)
        u *= (matrix @ h.T) / np.maximum(u @ (h @ h.T), eps)
        err = float(np.linalg.norm(matrix - u @ h, "fro"))
        if prev - err < 1e-6 * max(prev, eps):
            prev = err
            break
        prev = err
    return u, h


def kmeans_cluster(columns: np.ndarray, T: int, seed: int = 0, max_iters: int = 300) -> np.ndarray:
    """Cluster points (rows of `columns`) into T groups: k-means++ seeding,
    Lloyd iterations to an assignment fixed point, empty clusters repaired
    by stealing the point farthest from its current centroid."""
    pts = np.asarray(columns, dtype=float)
    n = pts.shape[0]
    if T > n:
        raise ValueError(f"cannot make {T} clusters from {n} points")
    rng = np.random.default_rng(seed)

    centers = np.empty((T, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, T):
        total = d2.sum()
        if total <= 0:
            centers[j] = pts[rng.integers(n)]
        else:
            centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iters):
        dists = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(T):
            if not np.any(new_assign == j):
                far = int(np.argmax(dists[np.arange(n), new_assign]))
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(T):
            centers[j] = pts[assign == j].mean(axis=0)
    return assign


@dataclass(frozen=True)
class MovielensTasks:
    """Factored and clustered MovieLens world: users x sqrt(d) and
    sqrt(d) x items nonnegative factors, item-to-task assignment, and the
    implied per-task reward parameter vec(I_sqrt(d))."""

    u_factors: np.ndarray          # (943, k)
    h_factors: np.ndarray          # (k, 1682)
    cluster_assignment: np.ndarray  # (1682,) in [0, T)
    theta_star_implied: np.ndarray  # (k*k,)

    @property
    def k(self) -> int:
        return self.u_factors.shape[1]

    @property
    def tasks(self) -> int:
        return int(self.cluster_assignment.max()) + 1

    def cluster_items(self, task: int) -> np.ndarray:
        items = np.flatnonzero(self.cluster_assignment == task)
        if items.size == 0:
            raise ValueError(f"task {task} has an empty item cluster")
        return items


def build_movielens_tasks(
    ratings: RatingMatrix, d: int, T: int, nmf_iters: int = 300, seed: int = 0
) -> MovielensTasks:
    k = math.isqrt(d)
    if k * k != d:
        raise ValueError(f"d={d} must be a perfect square for outer-product features")
    dense = fill_missing(ratings)
    u, h = nmf_factorize(dense, k, iters=nmf_iters, seed=seed)
    assign = kmeans_cluster(h.T, T, seed=seed)
    return MovielensTasks(
        u_factors=u,
        h_factors=h,
        cluster_assignment=assign,
        theta_star_implied=np.eye(k).ravel(),
    )


def implied_task_model(tasks: MovielensTasks, sigma_eta: float) -> TaskModel:
    theta = np.tile(tasks.theta_star_implied[:, None], (1, tasks.tasks))
    return task_model_from_theta(theta, r=1, sigma_eta=sigma_eta)


def build_task_features(
    tasks: MovielensTasks,
    task: int,
    K: int,
    baseline_rank: int,
    rng: np.random.Generator,
) -> ActionRound:
    """K candidate actions vec(u_i h_j^T) from a random user row and a random
    item column of the task's cluster; the expected reward under the implied
    parameter is u_i . h_j (trace identity, checked per sample)."""
    if not (1 <= baseline_rank <= K):
        raise ValueError(f"baseline_rank={baseline_rank} must be in [1, K={K}]")
    items = tasks.cluster_items(task)
    users = rng.integers(tasks.u_factors.shape[0], size=K)
    cols = items[rng.integers(items.size, size=K)]
    actions = np.empty((K, tasks.k * tasks.k))
    expected = np.empty(K)
    for i in range(K):
        u_row = tasks.u_factors[users[i]]
        h_col = tasks.h_factors[:, cols[i]]
        actions[i] = np.outer(u_row, h_col).ravel()
        expected[i] = float(u_row @ h_col)
        assert abs(actions[i] @ tasks.theta_star_implied - expected[i]) <= 1e-12
    order = np.argsort(-expected, kind="stable")
    return ActionRound(
        task=task,
        actions=actions,
        expected_rewards=expected,
        optimal_index=int(order[0]),
        baseline_index=int(order[baseline_rank - 1]),
    )


class MovielensEnvironment:
    """Environment serving outer-product features; same interface as the
    synthetic environment, same per-(trial, task) stream discipline."""

    name = "movielens"

    def __init__(
        self,
        tasks: MovielensTasks,
        K: int,
        baseline_rank: int,
        sigma_eta: float,
        task_rngs: list[np.random.Generator],
    ):
        self.tasks_spec = tasks
        self.model = implied_task_model(tasks, sigma_eta)
        self.K = K
        self.baseline_rank = baseline_rank
        self.sigma_eta = sigma_eta
        self._rngs = task_rngs

    @property
    def tasks(self) -> int:
        return self.model.tasks

    @property
    def d(self) -> int:
        return self.model.d

    def new_round(self, task: int) -> ActionRound:
        rng = self._rngs[task]
        rnd = build_task_features(self.tasks_spec, task, self.K, self.baseline_rank, rng)
        noise = float(self.sigma_eta * rng.standard_normal())
        return replace(rnd, noise=noise)

    def play(self, rnd: ActionRound, x: np.ndarray) -> tuple[float, float, float]:
        expected = float(np.asarray(x) @ self.model.theta_star[:, rnd.task])
        return expected + rnd.noise, expected, rnd.noise


def make_movielens_environment(
    tasks: MovielensTasks, trial_seed: int, K: int, baseline_rank: int, sigma_eta: float
) -> MovielensEnvironment:
    rngs = [rng_for(trial_seed, STREAM_ENV, t) for t in range(tasks.tasks)]
    return MovielensEnvironment(tasks, K, baseline_rank, sigma_eta, rngs)
