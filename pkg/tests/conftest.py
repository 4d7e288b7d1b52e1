import os

import numpy as np
import pytest

# A user-supplied real MovieLens-100K file is used when present; otherwise the
# pipeline tests run on a synthesized file with the same shape and format.
MOVIELENS_ENV_VAR = "MOVIELENS_100K_PATH"


def synthesize_ratings_file(path, n_ratings=100_000, seed=12345):
    """ML-100K-shaped ratings from a low-rank nonnegative preference model."""
    rng = np.random.default_rng(seed)
    n_users, n_items = 943, 1682
    u = rng.gamma(2.0, 0.5, size=(n_users, 4))
    v = rng.gamma(2.0, 0.5, size=(n_items, 4))
    scores = u @ v.T
    scores = 1 + 4 * (scores - scores.min()) / (scores.max() - scores.min())
    pairs = set()
    lines = []
    while len(pairs) < n_ratings:
        us = rng.integers(1, n_users + 1, size=20_000)
        it = rng.integers(1, n_items + 1, size=20_000)
        noise = rng.normal(0, 0.7, size=20_000)
        for a, b, eps in zip(us, it, noise):
            if (a, b) in pairs:
                continue
            pairs.add((a, b))
            r = int(np.clip(round(scores[a - 1, b - 1] + eps), 1, 5))
            lines.append(f"{a}\t{b}\t{r}\t881250949")
            if len(pairs) >= n_ratings:
                break
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def ratings_path(tmp_path_factory):
    real = os.environ.get(MOVIELENS_ENV_VAR)
    if real and os.path.exists(real):
        return real
    path = tmp_path_factory.mktemp("movielens") / "u.data"
    return str(synthesize_ratings_file(path))
