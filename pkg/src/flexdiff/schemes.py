"""Sampling schemes: representation, validation, execution and the catalog.

A scheme is an ordered list of stages ``(X_s, Y_s)``: frames to generate and
frames to condition on. Frames ``0..n_obs-1`` are observed up front.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import ddpm_sample_batch
from .rng import stream


@dataclass(frozen=True)
class SamplingStage:
    X: tuple
    Y: tuple

    def __post_init__(self):
        object.__setattr__(self, "X", tuple(int(i) for i in self.X))
        object.__setattr__(self, "Y", tuple(int(i) for i in self.Y))


@dataclass
class SamplingScheme:
    stages: list
    N: int
    K: int
    n_obs: int
    name: str = "custom"

    def __len__(self):
        return len(self.stages)

    def to_json(self):
        doc = {"N": self.N, "K": self.K, "n_obs": self.n_obs,
               "stages": [{"X": list(s.X), "Y": list(s.Y)} for s in self.stages]}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text, name="file"):
        doc = json.loads(text)
        stages = [SamplingStage(s["X"], s["Y"]) for s in doc["stages"]]
        return cls(stages, int(doc["N"]), int(doc["K"]), int(doc["n_obs"]), name)


@dataclass(frozen=True)
class Violation:
    stage: int | None
    kind: str
    message: str

    def __str__(self):
        where = "scheme" if self.stage is None else f"stage {self.stage}"
        return f"{where}: {self.kind}: {self.message}"


def validate(scheme: SamplingScheme):
    """Every violated constraint, with its stage index (1-based). Empty means valid."""
    out = []
    N, K = scheme.N, scheme.K
    available = set(range(min(scheme.n_obs, N)))
    observed = set(available)
    sampled = set()
    for s, st in enumerate(scheme.stages, start=1):
        X, Y = st.X, st.Y
        if not X:
            out.append(Violation(s, "empty", "stage samples no frames"))
        if len(set(X)) != len(X) or len(set(Y)) != len(Y):
            out.append(Violation(s, "duplicate", "repeated index within a stage"))
        if set(X) & set(Y):
            out.append(Violation(s, "overlap", f"indices both latent and observed: {sorted(set(X) & set(Y))}"))
        if len(X) + len(Y) > K:
            out.append(Violation(s, "budget", f"|X|+|Y|={len(X) + len(Y)} > K={K}"))
        bad = sorted(i for i in set(X) | set(Y) if not 0 <= i < N)
        if bad:
            out.append(Violation(s, "range", f"indices outside 0..{N - 1}: {bad}"))
        early = sorted(i for i in Y if i not in available and 0 <= i < N)
        if early:
            out.append(Violation(s, "causal", f"conditions on frames not yet sampled: {early}"))
        if set(X) & observed:
            out.append(Violation(s, "observed", f"overwrites observed frames {sorted(set(X) & observed)}"))
        if set(X) & sampled:
            out.append(Violation(s, "resample", f"resamples frames {sorted(set(X) & sampled)}"))
        sampled |= set(X)
        available |= {i for i in X if 0 <= i < N}
    missing = sorted(set(range(N)) - available)
    if missing:
        out.append(Violation(None, "coverage", f"frames never sampled: {missing}"))
    return out


# helpers -----------------------------------------------------------------

def _even(lo, hi, m):
    """``m`` distinct integers evenly spread over ``[lo, hi]`` including both ends."""
    if m <= 0 or hi < lo:
        return []
    m = min(m, hi - lo + 1)
    if m == 1:
        return [lo]
    return sorted({int(round(lo + (hi - lo) * j / (m - 1))) for j in range(m)})


def nearest_conditioning(X, available, budget):
    """Closest available frames on either side of each latent frame first,
    then the remaining available frames by distance to the nearest latent."""
    X = sorted(X)
    avail = np.array(sorted(set(available) - set(X)), dtype=np.int64)
    if budget <= 0 or len(avail) == 0:
        return []
    xa = np.array(X)
    dist = np.abs(avail[:, None] - xa[None, :]).min(axis=1)
    forced = set()
    for x in X:
        before = avail[avail < x]
        after = avail[avail > x]
        if len(before):
            forced.add(int(before[-1]))
        if len(after):
            forced.add(int(after[0]))
    # rank: forced first, then distance, earlier frames win ties
    order = sorted(range(len(avail)), key=lambda i: (int(avail[i]) not in forced, dist[i], avail[i]))
    return sorted(int(avail[i]) for i in order[:budget])


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _check_sizes(N, n_obs, K):
    if K < 2:
        raise ValueError("K must be at least 2")
    if not 1 <= n_obs <= N:
        raise ValueError(f"need 1 <= n_obs <= N (n_obs={n_obs}, N={N})")


def _gap_fill(N, K, available, name_stages):
    """Fill every gap between available frames with consecutive groups."""
    h = K // 2
    avail = set(available)
    stages = []
    missing = [i for i in range(N) if i not in avail]
    runs, run = [], []
    for i in missing:
        if run and i != run[-1] + 1:
            runs.append(run)
            run = []
        run.append(i)
    if run:
        runs.append(run)
    for run in runs:
        for chunk in _chunks(run, h):
            Y = nearest_conditioning(chunk, avail, K - len(chunk))
            stages.append(SamplingStage(chunk, Y))
            avail |= set(chunk)
    name_stages.extend(stages)
    return avail


# catalog -----------------------------------------------------------------

def make_autoreg(N, n_obs, K):
    """Next ``K//2`` frames given the ``K - K//2`` frames just before them."""
    _check_sizes(N, n_obs, K)
    if 2 * n_obs < K:
        raise ValueError(f"autoreg needs n_obs >= K/2 (n_obs={n_obs}, K={K})")
    h, c = K // 2, K - K // 2
    stages = []
    for pos in range(n_obs, N, h):
        X = range(pos, min(pos + h, N))
        stages.append(SamplingStage(X, range(max(0, pos - c), pos)))
    return SamplingScheme(stages, N, K, n_obs, "autoreg")


def make_long_range(N, n_obs, K):
    """Autoreg latents; condition on the ``K//4`` most recent frames plus
    ``K//4`` frames spread over the observed prefix."""
    _check_sizes(N, n_obs, K)
    r = K // 4
    if r < 1:
        raise ValueError("long-range needs K >= 4")
    if n_obs < math.ceil(K / 4):
        raise ValueError(f"long-range needs n_obs >= K/4 (n_obs={n_obs}, K={K})")
    h = K // 2
    stages = []
    for pos in range(n_obs, N, h):
        X = list(range(pos, min(pos + h, N)))
        recent = list(range(max(0, pos - r), pos))
        pool = [i for i in range(n_obs) if i not in recent]
        picks = [pool[j] for j in _even(0, len(pool) - 1, r)] if pool else []
        stages.append(SamplingStage(X, sorted(picks + recent)))
    return SamplingScheme(stages, N, K, n_obs, "long-range")


def _coarse_level(N, n_obs, K):
    m = K // 2
    span = N - n_obs
    if span <= 0:
        return None
    if span <= m:
        X = list(range(n_obs, N))
    else:
        X = sorted({n_obs - 1 + int(round(span * j / m)) for j in range(1, m + 1)})
    Y = _even(0, n_obs - 1, min(K - len(X), K // 2))
    return SamplingStage(X, Y)


def _intermediate_points(available, N, K):
    h = K // 2
    avail = sorted(available)
    bounds = avail + ([N] if avail[-1] != N - 1 else [])
    points = []
    for a, b in zip(bounds, bounds[1:]):
        g = b - a - 1
        if g <= h:
            continue
        k = min(h, math.ceil((g - h) / (h + 1)))
        points.extend(a + int(round((b - a) * j / (k + 1))) for j in range(1, k + 1))
    return points


def make_hierarchy(N, n_obs, K, levels=2):
    """Coarse evenly spaced frames first, then infill.

    With ``levels=3`` an intermediate pass samples frames inside each wide
    gap before the final infill, so no final group spans a wide gap.
    """
    _check_sizes(N, n_obs, K)
    if levels not in (2, 3):
        raise ValueError("levels must be 2 or 3")
    stages = []
    first = _coarse_level(N, n_obs, K)
    avail = set(range(n_obs))
    if first is not None:
        stages.append(first)
        avail |= set(first.X)
        if levels == 3:
            pts = _intermediate_points(avail, N, K)
            for chunk in _chunks(pts, K // 2):
                Y = nearest_conditioning(chunk, avail, K - len(chunk))
                stages.append(SamplingStage(chunk, Y))
                avail |= set(chunk)
        _gap_fill(N, K, avail, stages)
    return SamplingScheme(stages, N, K, n_obs, f"hierarchy{levels}")


def make_two_res(N, n_obs, K, skip=2):
    """Every ``skip``-th frame autoregressively, then infill the rest."""
    _check_sizes(N, n_obs, K)
    if skip < 2:
        raise ValueError("skip must be >= 2")
    lat = K - K // 2
    cond = K - lat
    coarse = list(range(n_obs - 1 + skip, N, skip))
    stages = []
    avail = set(range(n_obs))
    for chunk in _chunks(coarse, lat):
        aligned = sorted(i for i in avail if (i - (n_obs - 1)) % skip == 0 and i < chunk[0])
        Y = aligned[-cond:]
        if len(Y) < cond:
            extra = nearest_conditioning(chunk, avail - set(Y), cond - len(Y))
            Y = sorted(set(Y) | set(extra))
        stages.append(SamplingStage(chunk, Y))
        avail |= set(chunk)
    rest = [i for i in range(N) if i not in avail]
    for chunk in _chunks(rest, K // 2):
        stages.append(SamplingStage(chunk, nearest_conditioning(chunk, avail, K - len(chunk))))
        avail |= set(chunk)
    return SamplingScheme(stages, N, K, n_obs, f"two-res{skip}")


# adaptive conditioning ---------------------------------------------------

def adaptive_select(available, frames, X_s, budget):
    """Greedy max-min diversity choice of conditioning frames.

    ``frames`` maps index -> frame vector (an ``(N, fd)`` array works).
    Starts from the closest available frame before the first latent index,
    after the last one, and every available frame between them, then adds
    the available frame farthest (Euclidean) from its nearest chosen frame.
    """
    available = sorted(set(available) - set(X_s))
    if not available:
        raise ValueError("no available frames to condition on")
    lo, hi = min(X_s), max(X_s)
    before = [i for i in available if i < lo]
    after = [i for i in available if i > hi]
    forced = [i for i in available if lo < i < hi]
    if before:
        forced.append(before[-1])
    if after:
        forced.append(after[0])
    forced = sorted(set(forced), key=lambda i: (min(abs(i - x) for x in X_s), i))
    Y = forced[:budget]
    chosen = set(Y)
    cand = np.array([i for i in available if i not in chosen], dtype=np.int64)
    if not Y and len(cand) and budget > 0:
        Y.append(int(cand[0]))
        cand = cand[1:]
    if len(Y) >= budget or not len(cand):
        return sorted(Y)
    F = np.stack([np.asarray(frames[i], dtype=np.float64).ravel() for i in cand])
    nearest = np.full(len(cand), np.inf)
    for j in Y:
        nearest = np.minimum(nearest, np.linalg.norm(F - np.asarray(frames[j], dtype=np.float64).ravel(), axis=1))
    alive = np.ones(len(cand), dtype=bool)
    while len(Y) < budget and alive.any():
        k = int(np.argmax(np.where(alive, nearest, -1.0)))  # first maximum: smallest index wins ties
        Y.append(int(cand[k]))
        alive[k] = False
        nearest = np.minimum(nearest, np.linalg.norm(F - F[k], axis=1))
    return sorted(Y)


@dataclass
class AdaptiveScheme:
    """Hierarchy-2 latents with conditioning chosen per video at sampling time."""

    base: SamplingScheme
    name: str = "adaptive-hierarchy2"
    chosen: list = field(default_factory=list)

    @property
    def N(self):
        return self.base.N

    @property
    def K(self):
        return self.base.K

    @property
    def n_obs(self):
        return self.base.n_obs

    @property
    def stages(self):
        return self.base.stages

    def __len__(self):
        return len(self.base)

    def select(self, s, available, frames):
        X = self.base.stages[s].X
        return adaptive_select(available, frames, X, self.K - len(X))

    def realize(self, video):
        """Concrete scheme the adaptive rule picks for a fully known video."""
        avail = set(range(self.n_obs))
        stages = []
        for s, st in enumerate(self.base.stages):
            stages.append(SamplingStage(st.X, self.select(s, avail, video)))
            avail |= set(st.X)
        return SamplingScheme(stages, self.N, self.K, self.n_obs, self.name)


def make_adaptive_hierarchy(N, n_obs, K):
    return AdaptiveScheme(make_hierarchy(N, n_obs, K, levels=2))


CATALOG = {
    "autoreg": make_autoreg,
    "long-range": make_long_range,
    "hierarchy2": lambda N, n_obs, K: make_hierarchy(N, n_obs, K, 2),
    "hierarchy3": lambda N, n_obs, K: make_hierarchy(N, n_obs, K, 3),
    "two-res": make_two_res,
    "adaptive-hierarchy2": make_adaptive_hierarchy,
}


def make_scheme(name, N, n_obs, K, skip=2):
    if name not in CATALOG:
        raise ValueError(f"unknown scheme {name!r}; choose from {sorted(CATALOG)}")
    if name == "two-res":
        return make_two_res(N, n_obs, K, skip)
    return CATALOG[name](N, n_obs, K)


# execution ---------------------------------------------------------------

class SchemeError(ValueError):
    def __init__(self, violations):
        super().__init__("invalid sampling scheme:\n" + "\n".join(map(str, violations)))
        self.violations = violations


def sample_videos(denoiser, schedule, videos, scheme, seed=0, sampler=ddpm_sample_batch, video_ids=None):
    """Complete a batch of ``(B, N, fd)`` videos stage by stage.

    Only frames ``Y_s`` are read at stage ``s``; generated frames are written
    to ``X_s``. Video ``b`` draws from the stream ``(seed, video_ids[b])``, so
    its result does not depend on which other videos share the batch.
    """
    V = np.array(videos, dtype=np.float64, copy=True)
    if V.ndim == 2:
        V = V[None]
    B, N, fd = V.shape
    adaptive = isinstance(scheme, AdaptiveScheme)
    if not adaptive:
        problems = validate(scheme)
        if problems:
            raise SchemeError(problems)
    if scheme.N != N:
        raise ValueError(f"scheme is for N={scheme.N}, videos have N={N}")
    if scheme.K > denoiser.config.max_frames:
        raise ValueError(f"scheme K={scheme.K} exceeds the model's K={denoiser.config.max_frames}")
    ids = range(B) if video_ids is None else video_ids
    rngs = [stream(seed, i) for i in ids]
    avail = set(range(scheme.n_obs))
    for s, st in enumerate(scheme.stages):
        X = np.tile(np.asarray(st.X, dtype=np.int64), (B, 1))
        if adaptive:
            Y = np.array([scheme.select(s, avail, V[b]) for b in range(B)], dtype=np.int64).reshape(B, -1)
        else:
            Y = np.tile(np.asarray(st.Y, dtype=np.int64), (B, 1))
        y = np.take_along_axis(V, Y[:, :, None], axis=1)
        x = sampler(denoiser, schedule, y, X, Y, rngs)
        V[np.arange(B)[:, None], X] = x
        avail |= set(st.X)
    return V


def sample_video(denoiser, schedule, video, scheme, seed=0):
    """Single-video form of :func:`sample_videos`."""
    return sample_videos(denoiser, schedule, np.asarray(video)[None], scheme, seed)[0]


# rendering ---------------------------------------------------------------

def render_svg(scheme, cell=10):
    """One row per stage: sampled blue, conditioned red, ignored-but-available
    gray, not yet sampled white."""
    N = scheme.N
    W, H = N * cell, max(1, len(scheme.stages)) * cell
    rows = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="#ffffff"/>']
    avail = set(range(scheme.n_obs))
    for r, st in enumerate(scheme.stages):
        for i in range(N):
            if i in st.X:
                color = "#1f5fbf"
            elif i in st.Y:
                color = "#c8322d"
            elif i in avail:
                color = "#bdbdbd"
            else:
                continue
            rows.append(f'<rect x="{i * cell}" y="{r * cell}" width="{cell}" height="{cell}" fill="{color}"/>')
        avail |= set(st.X)
    rows.append("</svg>")
    return "\n".join(rows) + "\n"
