"""Offline greedy choice of conditioning frames for fixed latent stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import Geometry
from .rng import stream
from .schemes import SamplingScheme, SamplingStage, SchemeError, validate


@dataclass
class OptimizerConfig:
    t_grid: tuple
    videos_per_eval: int = 10
    target_obs_count: int | None = None  # default: fill the K budget

    def __post_init__(self):
        if not self.t_grid:
            raise ValueError("t_grid must be non-empty")
        if self.videos_per_eval < 1:
            raise ValueError("videos_per_eval must be >= 1")

    @classmethod
    def evenly_spaced(cls, T, n=10, **kw):
        """``n`` timesteps ``T/n, 2T/n, ..., T``."""
        grid = tuple(sorted({max(1, int(round(T * j / n))) for j in range(1, n + 1)}))
        return cls(grid, **kw)


def estimate_stage_loss(denoiser, schedule, X_s, Y_cand, eval_videos, t_grid, seed, key=()):
    """Mean denoising loss over ``t_grid`` and ``eval_videos``.

    Noise for ``(video v, grid slot j)`` comes from the stream
    ``(seed, *key, v, j)``: it depends on the evaluation key but never on the
    candidate set, so every candidate in a greedy step sees identical noise.
    """
    X_s = np.asarray(X_s, dtype=np.int64)
    Y = np.asarray(Y_cand, dtype=np.int64)
    if len(set(Y.tolist())) != len(Y) or set(Y.tolist()) & set(X_s.tolist()):
        raise ValueError("candidate conditioning set repeats an index or overlaps X_s")
    V = np.asarray(eval_videos, dtype=np.float64)
    n, N, fd = V.shape
    if max(X_s.max(), Y.max() if len(Y) else 0) >= N or min(X_s.min(), Y.min() if len(Y) else 0) < 0:
        raise ValueError("index out of range for evaluation videos")
    nt = len(t_grid)
    nx, ny = len(X_s), len(Y)
    x0 = np.repeat(V[:, X_s], nt, axis=0)            # (n*nt, nx, fd)
    y = np.repeat(V[:, Y], nt, axis=0)
    t = np.tile(np.asarray(t_grid), n)
    eps = np.stack([stream(seed, *key, v, j).standard_normal((nx, fd)) for v in range(n) for j in range(nt)])
    abar = schedule.alpha_bars[t - 1][:, None, None]
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    frames = np.concatenate([x_t, y], axis=1).astype(np.float32)
    B = n * nt
    indicator = np.concatenate([np.zeros((B, nx)), np.ones((B, ny))], axis=1)
    positions = np.tile(np.concatenate([X_s, Y]), (B, 1))
    pred = denoiser.batch(frames, indicator, t, Geometry(positions, None, denoiser.config))[:, :nx]
    per = ((eps - pred) ** 2).sum(axis=(1, 2))
    return float(per.mean())


def forced_neighbors(X_s, available):
    """Closest available index before and after every latent index."""
    avail = np.array(sorted(set(available) - set(X_s)), dtype=np.int64)
    out = set()
    for x in X_s:
        before, after = avail[avail < x], avail[avail > x]
        if len(before):
            out.add(int(before[-1]))
        if len(after):
            out.add(int(after[0]))
    return sorted(out)


@dataclass
class OptimizeResult:
    scheme: SamplingScheme
    trace: list = field(default_factory=list)  # (stage, step, candidate, loss, chosen)

    def trace_csv(self):
        lines = ["stage,step,candidate,loss,chosen"]
        lines += [f"{s},{k},{c},{l!r},{int(ch)}" for s, k, c, l, ch in self.trace]
        return "\n".join(lines) + "\n"


def optimize_observed(latent_stages, N, n_obs, K, stage_loss, target_obs_count=None):
    """Greedy per-stage selection of conditioning frames.

    ``stage_loss(stage, step, X_s, Y) -> float`` scores a candidate set.
    Each stage starts from the forced neighbours of its latent frames and
    appends the lowest-loss eligible frame (observed or already sampled,
    smaller index on ties) until the target size is reached.
    """
    avail = set(range(n_obs))
    stages = []
    trace = []
    for s, X in enumerate(latent_stages):
        X = [int(i) for i in X]
        budget = K - len(X)
        target = budget if target_obs_count is None else min(target_obs_count, budget)
        Y = forced_neighbors(X, avail)
        if len(Y) > budget:
            raise ValueError(f"stage {s}: {len(Y)} forced neighbours exceed the budget {budget}")
        step = 0
        while len(Y) < target:
            cands = sorted(avail - set(X) - set(Y))
            if not cands:
                raise ValueError(f"stage {s}: no eligible candidates left at |Y|={len(Y)} < {target}")
            losses = [stage_loss(s, step, X, sorted(Y + [c])) for c in cands]
            best = int(np.argmin(losses))  # first minimum = smallest index
            for c, l in zip(cands, losses):
                trace.append((s, step, c, l, c == cands[best]))
            Y.append(cands[best])
            step += 1
        stages.append(SamplingStage(X, sorted(Y)))
        avail |= set(X)
    scheme = SamplingScheme(stages, N, K, n_obs, "optimized")
    problems = validate(scheme)
    if problems:
        raise SchemeError(problems)
    return OptimizeResult(scheme, trace)


def denoising_stage_loss(denoiser, schedule, eval_videos, t_grid, seed):
    """A ``stage_loss`` backed by the model's denoising loss with common noise per (stage, step)."""
    def loss(stage, step, X, Y):
        return estimate_stage_loss(denoiser, schedule, X, Y, eval_videos, t_grid, seed, key=(stage, step))
    return loss


def optimize_scheme(denoiser, schedule, base_scheme, eval_videos, config: OptimizerConfig, seed=0):
    """Optimise conditioning frames for the latent stages of ``base_scheme``."""
    videos = np.asarray(eval_videos)[: config.videos_per_eval]
    loss = denoising_stage_loss(denoiser, schedule, videos, config.t_grid, seed)
    latents = [st.X for st in base_scheme.stages]
    return optimize_observed(latents, base_scheme.N, base_scheme.n_obs, base_scheme.K, loss,
                             config.target_obs_count)
