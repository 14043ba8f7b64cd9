"""Synthetic long-range datasets, their metrics, and the FDMV dataset format.

TownDrive: a point agent drives a grid town, frames are its (x, y) position.
ColoredRooms: an agent hops between rooms whose colours are fixed for the
whole video; frames are (room one-hot, room colour, phase within visit).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FPS = 10


@dataclass
class Dataset:
    videos: np.ndarray                      # (count, N, frame_dim)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.videos = np.asarray(self.videos, dtype=np.float32)
        if self.videos.ndim != 3:
            raise ValueError("videos must be (count, N, frame_dim)")
        if not np.all(np.isfinite(self.videos)):
            raise ValueError("non-finite frame values")

    def __len__(self):
        return len(self.videos)

    @property
    def N(self):
        return self.videos.shape[1]

    @property
    def frame_dim(self):
        return self.videos.shape[2]

    def split(self, n_test):
        meta = dict(self.metadata)
        return (Dataset(self.videos[:-n_test], meta), Dataset(self.videos[-n_test:], meta))


# generators ------------------------------------------------------------------

def gen_town_drive(count, N, grid_size=4, v_max=3.0, light_density=0.3, rng=None, block=10.0,
                   stop_frames=(5, 30)):
    """Drive between random intersections along grid roads.

    Each route leg runs at a speed drawn from ``[0.5, 1] * v_max``; on reaching
    an intersection the agent waits ``stop_frames`` frames with probability
    ``light_density``. Positions never leave the road lines.
    """
    if N < 20:
        raise ValueError("TownDrive videos need N >= 20")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    videos = np.zeros((count, N, 2))
    for v in range(count):
        node = rng.integers(0, grid_size, size=2)
        pos = node * block
        path = []
        speed = v_max
        wait = 0
        for f in range(N):
            if f:
                if wait > 0:
                    wait -= 1
                else:
                    step = speed / FPS
                    while step > 1e-12:
                        if not path:
                            goal = rng.integers(0, grid_size, size=2)
                            while np.array_equal(goal, node):
                                goal = rng.integers(0, grid_size, size=2)
                            path = _route(node, goal, rng)
                            speed = v_max * rng.uniform(0.5, 1.0)
                            step = min(step, speed / FPS)
                        target = path[0] * block
                        gap = float(np.abs(target - pos).sum())
                        if gap <= step:
                            pos = target.astype(float)
                            node = path.pop(0)
                            step = 0.0
                            if rng.random() < light_density:
                                wait = int(rng.integers(stop_frames[0], stop_frames[1] + 1))
                        else:
                            pos = pos + (target - pos) / gap * step
                            step = 0.0
            videos[v, f] = pos
    meta = {"generator": "town-drive", "grid_size": grid_size, "block": block, "v_max": v_max,
            "light_density": light_density, "fps": FPS}
    return Dataset(videos, meta)


def _route(node, goal, rng):
    """Manhattan route as a list of successive neighbouring intersections."""
    node = np.array(node)
    path = []
    axes = [0, 1] if rng.random() < 0.5 else [1, 0]
    for ax in axes:
        while node[ax] != goal[ax]:
            node = node.copy()
            node[ax] += 1 if goal[ax] > node[ax] else -1
            path.append(node)
    return path


def on_road(positions, block=10.0, tol=1e-6):
    """True where a position lies on a grid line of the town."""
    p = np.asarray(positions) / block
    return (np.abs(p - np.round(p)) < tol).any(axis=-1)


def gen_colored_rooms(count, N, n_rooms=4, palette_size=4, rng=None, dwell=(4, 12)):
    """Random walk over rooms; room colours are drawn per video and fixed."""
    if palette_size < 2:
        raise ValueError("palette_size must be >= 2")
    if n_rooms < 2:
        raise ValueError("need at least two rooms")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    fd = n_rooms + 2
    videos = np.zeros((count, N, fd))
    for v in range(count):
        colors = rng.integers(0, palette_size, size=n_rooms)
        room = int(rng.integers(n_rooms))
        f = 0
        while f < N:
            stay = int(rng.integers(dwell[0], dwell[1] + 1))
            for k in range(min(stay, N - f)):
                videos[v, f, room] = 1.0
                videos[v, f, n_rooms] = colors[room]
                videos[v, f, n_rooms + 1] = k / stay
                f += 1
            room = int((room + rng.integers(1, n_rooms)) % n_rooms)
    meta = {"generator": "colored-rooms", "n_rooms": n_rooms, "palette_size": palette_size, "fps": FPS}
    return Dataset(videos, meta)


# speed metrics ---------------------------------------------------------------

def estimate_speeds(video, lag=10, fps=FPS, channels=(0, 1)):
    """Speed between frames ``lag`` apart: distance divided by ``lag / fps`` seconds."""
    pos = np.asarray(video, dtype=np.float64)[:, list(channels)]
    if len(pos) <= lag:
        raise ValueError(f"video of {len(pos)} frames too short for lag {lag}")
    return np.linalg.norm(pos[lag:] - pos[:-lag], axis=1) / (lag / fps)


def outlier_pct(speeds, threshold=10.0):
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.size == 0:
        raise ValueError("no speeds")
    return 100.0 * np.count_nonzero(speeds > threshold) / speeds.size


def wasserstein1d(a, b):
    """1-Wasserstein distance between two empirical distributions.

    Integrates ``|F^-1(u) - G^-1(u)|`` over the merged quantile breakpoints,
    which handles unequal sample sizes exactly.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1d needs non-empty samples")
    u = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
    edges = np.concatenate([[0.0], u, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    qa = a[np.minimum((mid * a.size).astype(np.int64), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(np.int64), b.size - 1)]
    return float(np.sum(np.diff(edges) * np.abs(qa - qb)))


def speed_stats(videos, threshold=10.0, lag=10, fps=FPS):
    return np.concatenate([estimate_speeds(v, lag, fps) for v in videos])


def speed_metrics(sampled, reference, threshold=10.0, lag=10, fps=FPS, start=0):
    """Outlier percentage of ``sampled`` and WD to ``reference`` after filtering.

    ``start`` drops speed windows that begin before that frame (e.g. the
    observed prefix).
    """
    s = np.concatenate([estimate_speeds(v, lag, fps)[start:] for v in sampled])
    r = np.concatenate([estimate_speeds(v, lag, fps)[start:] for v in reference])
    op = outlier_pct(s, threshold)
    s_in, r_in = s[s <= threshold], r[r <= threshold]
    wd = wasserstein1d(s_in, r_in) if s_in.size and r_in.size else float("inf")
    return {"op": op, "wd": wd}


def speed_histogram(speeds, threshold=10.0, bins=50):
    counts, edges = np.histogram(np.asarray(speeds)[np.asarray(speeds) <= threshold], bins=bins,
                                 range=(0.0, threshold))
    return counts, edges


# colour consistency ----------------------------------------------------------

def color_accuracy(video, n_rooms, n_obs=0, tol=0.5):
    """Fraction of frames whose colour matches their room's reference colour.

    A room's reference is its colour at its first frame in the observed prefix,
    or at its first visit otherwise. Rooms are decoded by argmax.
    """
    video = np.asarray(video, dtype=np.float64)
    if not np.all(np.isfinite(video)):
        raise ValueError("frame not decodable: non-finite values")
    rooms = np.argmax(video[:, :n_rooms], axis=1)
    colors = video[:, n_rooms]
    ref = {}
    for i in list(range(min(n_obs, len(video)))) + list(range(n_obs, len(video))):
        ref.setdefault(int(rooms[i]), colors[i])
    good = [abs(colors[i] - ref[int(rooms[i])]) <= tol for i in range(len(video))]
    return float(np.mean(good))


# Fréchet distance on per-video features ---------------------------------------

def video_features(video, lag=10, fps=FPS):
    """Mean speed, speed variance, net displacement, per-channel mean and variance."""
    video = np.asarray(video, dtype=np.float64)
    sp = estimate_speeds(video, lag, fps)
    disp = np.linalg.norm(video[-1, :2] - video[0, :2])
    return np.concatenate([[sp.mean(), sp.var(), disp], video.mean(axis=0), video.var(axis=0)])


def frechet_from_stats(mu1, s1, mu2, s2):
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(s1).astype(np.float64), np.atleast_2d(s2).astype(np.float64)
    w, U = np.linalg.eigh(0.5 * (s1 + s1.T))
    root1 = (U * np.sqrt(np.clip(w, 0, None))) @ U.T
    middle = root1 @ s2 @ root1
    ev = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    tr_sqrt = np.sum(np.sqrt(np.clip(ev, 0, None)))
    return float(max(0.0, np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt))


def frechet_gaussian(features_a, features_b, ridge=1e-6):
    """Fréchet distance between Gaussian fits of two feature sets (rows = samples)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two feature vectors per side")
    eye = ridge * np.eye(a.shape[1])
    return frechet_from_stats(a.mean(0), np.cov(a, rowvar=False).reshape(eye.shape) + eye,
                              b.mean(0), np.cov(b, rowvar=False).reshape(eye.shape) + eye)


def feature_frechet(videos_a, videos_b):
    return frechet_gaussian([video_features(v) for v in videos_a], [video_features(v) for v in videos_b])


# FDMV file format ------------------------------------------------------------

_MAGIC = b"FDMV"
_VERSION = 1


def save_dataset(path, dataset: Dataset):
    path = Path(path)
    n, N, fd = dataset.videos.shape
    header = _MAGIC + struct.pack("<IIII", _VERSION, n, N, fd)
    path.write_bytes(header + np.ascontiguousarray(dataset.videos, dtype="<f4").tobytes())
    meta = "".join(f"{k}={dataset.metadata[k]}\n" for k in sorted(dataset.metadata))
    Path(str(path) + ".meta").write_text(meta)


def load_dataset(path):
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not an FDMV dataset")
    version, n, N, fd = struct.unpack_from("<IIII", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported FDMV version {version}")
    videos = np.frombuffer(buf, dtype="<f4", count=n * N * fd, offset=20).reshape(n, N, fd)
    meta = {}
    meta_path = Path(str(path) + ".meta")
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = _parse_scalar(v)
    return Dataset(videos.astype(np.float32), meta)


def _parse_scalar(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def render_histogram_svg(series, threshold=10.0, bins=50, width=400, height=200):
    """Overlaid speed histograms; ``series`` maps label -> speeds."""
    palette = ["#1f5fbf", "#c8322d", "#2e8b57", "#8a2be2"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">', f'<rect width="{width}" height="{height}" fill="#ffffff"/>']
    dens = {}
    for label, sp in series.items():
        c, _ = speed_histogram(sp, threshold, bins)
        dens[label] = c / max(1, c.sum())
    top = max([d.max() for d in dens.values()] + [1e-12])
    bw = width / bins
    for k, (label, d) in enumerate(dens.items()):
        color = palette[k % len(palette)]
        pts = " ".join(f"{(i + 0.5) * bw:.2f},{height - d[i] / top * (height - 20):.2f}" for i in range(bins))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="5" y="{14 + 14 * k}" font-size="11" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
