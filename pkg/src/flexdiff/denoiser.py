"""The flexible noise-prediction network.

Frames are vectors, so the image U-net collapses to per-frame residual MLP
blocks. Between them sits temporal attention whose pairwise terms come from
a small network of the signed frame-index difference. Observed frames enter
the network alongside the noisy latent frames and are flagged by an extra
indicator channel; only the latent rows are read back out.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .rng import as_generator


@dataclass(frozen=True)
class DenoiserConfig:
    frame_dim: int
    channels: int = 64
    blocks: int = 2
    heads: int = 4
    max_frames: int = 10
    steps: int = 250
    max_video_length: int = 1000
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.frame_dim < 1:
            raise ValueError("frame_dim must be positive")
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.channels % 2:
            raise ValueError("channels must be even for the timestep embedding")
        if self.max_frames < 2:
            raise ValueError("max_frames (K) must be at least 2")
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if self.steps < 1 or self.max_video_length < 1:
            raise ValueError("steps and max_video_length must be positive")

    @property
    def head_dim(self):
        return self.channels // self.heads

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: int(v) for k, v in kv.items() if k in names})


def init_params(config: DenoiserConfig, rng) -> ParamSet:
    """LeCun-normal weights, unit norm gains, zero biases (float32)."""
    rng = as_generator(rng)
    C, fd, H = config.channels, config.frame_dim, config.mlp_ratio * config.channels
    p = ParamSet()

    def dense(name, fan_in, fan_out, scale=1.0):
        p[name + ".w"] = (rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in)).astype(np.float32)
        p[name + ".b"] = np.zeros(fan_out, dtype=np.float32)

    def norm(name):
        p[name + ".g"] = np.ones(C, dtype=np.float32)
        p[name + ".b"] = np.zeros(C, dtype=np.float32)

    dense("in", fd + 1, C)
    dense("time.0", C, C)
    dense("time.1", C, C)
    for i in range(config.blocks):
        b = f"blocks.{i}"
        norm(f"{b}.mlp.norm")
        dense(f"{b}.mlp.0", C, H)
        dense(f"{b}.mlp.1", H, C)
        norm(f"{b}.attn.norm")
        for proj in ("q", "k", "v"):
            p[f"{b}.attn.w{proj}"] = (rng.standard_normal((C, C)) / np.sqrt(C)).astype(np.float32)
        dense(f"{b}.attn.out", C, C)
        dense(f"{b}.rpe.0", 3, C)
        dense(f"{b}.rpe.1", C, 3 * C, scale=0.1)
    norm("out.norm")
    dense("out", C, fd)
    return p


def timestep_embedding(t, channels):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = channels // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def rpe_features(d, n_max):
    """Three-dimensional embedding of signed frame offsets."""
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    return np.stack([np.sign(d), a / n_max, np.log1p(a) / np.log1p(n_max)], axis=-1)


def _dense(p, name, x):
    return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def _norm(p, name, x):
    return ad.add(ad.mul(ad.layer_norm(x), p[name + ".g"]), p[name + ".b"])


def rpe_table(p, layer, offsets, config):
    """Evaluate the RPE network of ``layer`` on each offset: ``(U, 3, heads, head_dim)``."""
    feats = rpe_features(offsets, config.max_video_length).astype(ad.default_dtype())
    b = f"blocks.{layer}.rpe"
    hidden = ad.silu(_dense(p, f"{b}.0", feats))
    out = _dense(p, f"{b}.1", hidden)
    return ad.reshape(out, (len(offsets), 3, config.heads, config.head_dim))


def rpe(params, d, config, layer=0):
    """Query/key/value position vectors for a single offset ``d``, each ``(heads, head_dim)``."""
    with ad.no_grad():
        table = rpe_table(params, layer, np.array([d]), config).data[0]
    return table[0], table[1], table[2]


class Geometry:
    """Per-call frame layout: positions, their pairwise offsets, attention mask."""

    def __init__(self, positions, mask, config):
        positions = np.asarray(positions, dtype=np.int64)
        if positions.ndim != 2:
            raise ValueError("positions must be (batch, frames)")
        if positions.size and (positions.min() < 0 or positions.max() >= config.max_video_length):
            raise ValueError(f"frame position outside [0, {config.max_video_length})")
        B, K = positions.shape
        if mask is None:
            mask = np.ones((B, K, K), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, K, K):
            raise ValueError(f"mask shape {mask.shape} != {(B, K, K)}")
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask has a fully masked row")
        self.positions = positions
        self.mask = mask
        offsets = positions[:, :, None] - positions[:, None, :]
        self.offsets, inverse = np.unique(offsets, return_inverse=True)
        self.pair_index = inverse.reshape(B, K, K)
        self._tables = None

    def freeze_tables(self, params, config):
        """Precompute RPE tables for repeated no-grad calls with fixed params."""
        with ad.no_grad():
            self._tables = [rpe_table(params, i, self.offsets, config) for i in range(config.blocks)]
        return self

    def tables(self, params, config):
        if self._tables is not None:
            return self._tables
        return [rpe_table(params, i, self.offsets, config) for i in range(config.blocks)]


def _attention(p, layer, z, table, geom, config):
    B, K, C = z.shape
    H, dh = config.heads, config.head_dim
    b = f"blocks.{layer}.attn"
    zn = _norm(p, f"{b}.norm", z)
    q = ad.reshape(ad.matmul(zn, p[f"{b}.wq"]), (B, K, H, dh))
    k = ad.reshape(ad.matmul(zn, p[f"{b}.wk"]), (B, K, H, dh))
    v = ad.reshape(ad.matmul(zn, p[f"{b}.wv"]), (B, K, H, dh))
    pq, pk, pv = (ad.take(ad.take(table, i, axis=1), geom.pair_index, axis=0) for i in range(3))
    e = ad.mul(ad.einsum("bihd,bjhd->bhij", q, k), 1.0 / np.sqrt(dh))
    e = ad.add(e, ad.einsum("bijhd,bjhd->bhij", pq, k))
    e = ad.add(e, ad.einsum("bihd,bijhd->bhij", q, pk))
    alpha = ad.softmax(e, axis=-1, mask=geom.mask[:, None, :, :])
    o = ad.add(ad.einsum("bhij,bjhd->bihd", alpha, v), ad.einsum("bhij,bijhd->bihd", alpha, pv))
    o = ad.reshape(o, (B, K, C))
    return ad.add(z, _dense(p, f"{b}.out", o)), alpha


def temporal_attention(params, z_in, positions, mask, config, layer=0, return_weights=False):
    """Temporal attention of one block on a single ``(K', C)`` frame sequence."""
    z = ad.reshape(z_in if isinstance(z_in, Tensor) else ad.tensor(z_in), (1,) + tuple(np.shape(z_in)))
    geom = Geometry(np.asarray(positions)[None], None if mask is None else np.asarray(mask)[None], config)
    table = geom.tables(params, config)[layer]
    out, alpha = _attention(params, layer, z, table, geom, config)
    out = ad.reshape(out, out.shape[1:])
    if return_weights:
        return out, alpha.data[0]
    return out


def _mlp(p, layer, z):
    b = f"blocks.{layer}.mlp"
    h = ad.silu(_dense(p, f"{b}.0", _norm(p, f"{b}.norm", z)))
    return ad.add(z, _dense(p, f"{b}.1", h))


def forward(params, config, frames, indicator, t, geom, attention=True):
    """Batched network evaluation.

    ``frames`` is ``(B, K', frame_dim)`` holding noisy latents and clean
    observations, ``indicator`` is ``(B, K')`` with 1 on observed slots, ``t``
    is ``(B,)``. Returns the noise prediction for every slot, ``(B, K', frame_dim)``.
    """
    frames = frames if isinstance(frames, Tensor) else ad.Tensor(np.asarray(frames, dtype=ad.default_dtype()))
    ind = np.asarray(indicator, dtype=frames.data.dtype)[..., None]
    h = _dense(params, "in", ad.concat([frames, ind], axis=-1))
    temb = timestep_embedding(t, config.channels).astype(frames.data.dtype)
    temb = _dense(params, "time.1", ad.silu(_dense(params, "time.0", temb)))
    h = ad.add(h, ad.reshape(temb, (temb.shape[0], 1, config.channels)))
    tables = geom.tables(params, config) if attention else None
    for i in range(config.blocks):
        h = _mlp(params, i, h)
        if attention:
            h, _ = _attention(params, i, h, tables[i], geom, config)
    return _dense(params, "out", ad.silu(_norm(params, "out.norm", h)))


def _check_indices(X, Y, config):
    X = np.asarray(X, dtype=np.int64).reshape(-1)
    Y = np.asarray(Y, dtype=np.int64).reshape(-1)
    if len(X) == 0:
        raise ValueError("no latent frames")
    if len(X) + len(Y) > config.max_frames:
        raise ValueError(f"|X|+|Y|={len(X) + len(Y)} exceeds K={config.max_frames}")
    if len(set(X.tolist())) != len(X) or len(set(Y.tolist())) != len(Y) or set(X.tolist()) & set(Y.tolist()):
        raise ValueError("latent and observed indices must be distinct")
    return X, Y


def epsilon_theta(params, config, x_t, y, t, X, Y, cross_video_mask=None):
    """Noise prediction for latent frames ``x_t`` at positions ``X`` given
    observed frames ``y`` at positions ``Y``. Returns ``(|X|, frame_dim)``."""
    X, Y = _check_indices(X, Y, config)
    fd = config.frame_dim
    x_t = x_t if isinstance(x_t, Tensor) else ad.Tensor(np.asarray(x_t, dtype=ad.default_dtype()))
    y_arr = np.asarray(y, dtype=x_t.data.dtype).reshape(len(Y), fd)
    frames = ad.reshape(ad.concat([x_t, y_arr], axis=0), (1, len(X) + len(Y), fd))
    indicator = np.concatenate([np.zeros(len(X)), np.ones(len(Y))])[None]
    positions = np.concatenate([X, Y])[None]
    mask = None if cross_video_mask is None else np.asarray(cross_video_mask)[None]
    geom = Geometry(positions, mask, config)
    out = forward(params, config, frames, indicator, np.array([t]), geom)
    return ad.take(ad.reshape(out, out.shape[1:]), np.arange(len(X)), axis=0)


class Denoiser:
    """Bundle of config and parameters, callable as ``eps(x_t, y, t, X, Y)``."""

    def __init__(self, config: DenoiserConfig, params: ParamSet):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config, rng):
        return cls(config, init_params(config, rng))

    def __call__(self, x_t, y, t, X, Y):
        with ad.no_grad():
            return epsilon_theta(self.params, self.config, x_t, y, t, X, Y).data

    def batch(self, frames, indicator, t, geom):
        """No-grad batched prediction over all slots (numpy in, numpy out)."""
        with ad.no_grad():
            return forward(self.params, self.config, frames, indicator, t, geom).data

    def geometry(self, positions, mask=None, frozen=True):
        geom = Geometry(positions, mask, self.config)
        return geom.freeze_tables(self.params, self.config) if frozen else geom


# training batch padding ------------------------------------------------------

@dataclass
class PaddedBatch:
    frames: np.ndarray      # (B, K, fd) clean frame values
    indicator: np.ndarray   # (B, K) 1 for observed slots
    positions: np.ndarray   # (B, K)
    latent: np.ndarray      # (B, K) bool, slots that are denoising targets
    segment: np.ndarray     # (B, K) 0 for the example, 1 for filler frames
    mask: np.ndarray        # (B, K, K) attention allowed

    @property
    def n_filler(self):
        return (self.segment == 1).sum(axis=1)


def pad_batch(examples, filler_videos, K, rng):
    """Pad every ``(x0, y, X, Y)`` example to ``K`` frames.

    Missing slots are filled with frames drawn without replacement from a
    uniformly chosen video of ``filler_videos``, kept at their true positions
    and marked latent. Attention is masked so the two videos never interact.
    """
    if filler_videos is None or len(filler_videos) == 0:
        raise ValueError("empty filler video source")
    B = len(examples)
    fd = np.shape(filler_videos[0])[-1]
    frames = np.zeros((B, K, fd), dtype=np.float32)
    indicator = np.zeros((B, K), dtype=np.float32)
    positions = np.zeros((B, K), dtype=np.int64)
    latent = np.zeros((B, K), dtype=bool)
    segment = np.zeros((B, K), dtype=np.int64)
    for b, (x0, y, X, Y) in enumerate(examples):
        nx, ny = len(X), len(Y)
        n = nx + ny
        if n > K:
            raise ValueError(f"example {b} has {n} frames > K={K}")
        frames[b, :nx] = np.reshape(x0, (nx, fd))
        frames[b, nx:n] = np.reshape(y, (ny, fd))
        indicator[b, nx:n] = 1.0
        positions[b, :nx] = X
        positions[b, nx:n] = Y
        latent[b, :nx] = True
        fill = K - n
        if fill:
            video = filler_videos[int(rng.integers(len(filler_videos)))]
            if len(video) < fill:
                raise ValueError("filler video shorter than the padding it must supply")
            idx = np.sort(rng.choice(len(video), size=fill, replace=False))
            frames[b, n:] = video[idx]
            positions[b, n:] = idx
            latent[b, n:] = True
            segment[b, n:] = 1
    mask = segment[:, :, None] == segment[:, None, :]
    return PaddedBatch(frames, indicator, positions, latent, segment, mask)
