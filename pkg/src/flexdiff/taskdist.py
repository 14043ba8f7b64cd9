"""Training-task distributions over latent/observed index vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskSample:
    X: np.ndarray
    Y: np.ndarray
    N: int

    def violations(self, K):
        out = []
        xs, ys = set(self.X.tolist()), set(self.Y.tolist())
        if not len(self.X):
            out.append("empty X")
        if len(self.X) + len(self.Y) > K:
            out.append("exceeds K")
        if len(xs) != len(self.X) or len(ys) != len(self.Y) or xs & ys:
            out.append("repeated index")
        if any(i < 0 or i >= self.N for i in xs | ys):
            out.append("index out of range")
        return out


def draw_group(N, K, rng):
    """One regularly spaced group: ``(size, spacing, indices, observed)``.

    The spacing is log-uniform on ``[1, (N-1)/size]``; when that interval is
    empty the upper end is used.
    """
    n_group = int(rng.integers(1, K + 1))
    hi = (N - 1) / n_group
    s_group = math.exp(rng.uniform(0.0, math.log(hi))) if hi > 1 else hi
    x_group = rng.uniform(0.0, N - (n_group - 1) * s_group)
    observed = rng.random() < 0.5
    idx = {int(math.floor(x_group + s_group * i)) for i in range(n_group)}
    return n_group, s_group, idx, observed


def sample_task_structured(N, K, rng):
    """Groups of regularly spaced frames with log-uniform spacing.

    Groups are drawn until one would push the total past ``K``; that group is
    discarded. The first accepted group is always latent, later ones are
    observed with probability one half. When ``N <= K`` the loop also stops
    once every frame has been taken, since no later group could overflow.
    """
    X: set[int] = set()
    Y: set[int] = set()
    while True:
        _, _, idx, observed = draw_group(N, K, rng)
        G = idx - X - Y
        total = len(X) + len(Y) + len(G)
        if total > K:
            break
        if not X or not observed:
            X |= G
        else:
            Y |= G
        if total == N:
            break
    return TaskSample(np.array(sorted(X), dtype=np.int64), np.array(sorted(Y), dtype=np.int64), N)


def sample_task_uniform(N, K, rng, literal=False):
    """Uniform ablation: ``n_total`` distinct positions, a uniform prefix observed.

    Positions come from all ``N`` frames; ``literal=True`` restricts them to
    the first ``K`` frames instead.
    """
    if N < K:
        raise ValueError(f"uniform task distribution needs N >= K ({N} < {K})")
    n_total = int(rng.integers(1, K + 1))
    Z = rng.choice(K if literal else N, size=n_total, replace=False)
    n_obs = int(rng.integers(0, n_total))
    return TaskSample(np.sort(Z[n_obs:]).astype(np.int64), np.sort(Z[:n_obs]).astype(np.int64), N)


def sample_task_single(N, rng, k=20):
    """The one task Autoreg uses: ``k//2`` consecutive frames given the ``k - k//2`` before them."""
    if N < k:
        raise ValueError(f"video length {N} too short for the {k}-frame task")
    n_obs = k - k // 2
    o = int(rng.integers(0, N - k + 1))
    return TaskSample(np.arange(o + n_obs, o + k, dtype=np.int64), np.arange(o, o + n_obs, dtype=np.int64), N)


TASK_DISTRIBUTIONS = ("structured", "uniform", "single")


def task_sampler(name, N, K, literal_uniform=False):
    """Return ``rng -> (X, Y)`` for the named distribution."""
    if name == "structured":
        def draw(rng):
            s = sample_task_structured(N, K, rng)
            return s.X, s.Y
    elif name == "uniform":
        def draw(rng):
            s = sample_task_uniform(N, K, rng, literal=literal_uniform)
            return s.X, s.Y
    elif name == "single":
        def draw(rng):
            s = sample_task_single(N, rng, k=K)
            return s.X, s.Y
    else:
        raise ValueError(f"unknown task distribution {name!r}; choose from {TASK_DISTRIBUTIONS}")
    return draw


def size_histogram(samples, K):
    """Counts of ``(|X|, |Y|)`` as a ``(K+1, K+1)`` array indexed ``[nx, ny]``."""
    h = np.zeros((K + 1, K + 1), dtype=np.int64)
    for s in samples:
        h[len(s.X), len(s.Y)] += 1
    return h


def render_svg(samples, N, cell=8):
    """One row per sample: latent blue, observed red, ignored white."""
    rows = []
    W, H = N * cell, len(samples) * cell
    rows.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">')
    rows.append(f'<rect width="{W}" height="{H}" fill="#ffffff"/>')
    for r, s in enumerate(samples):
        for idx, color in [(s.X, "#1f5fbf"), (s.Y, "#c8322d")]:
            for i in idx.tolist():
                rows.append(f'<rect x="{i * cell}" y="{r * cell}" width="{cell}" height="{cell}" fill="{color}"/>')
    rows.append("</svg>")
    return "\n".join(rows) + "\n"
