"""Conditional DDPM: schedule, noising, loss, reverse transitions, training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamSet
from .denoiser import Denoiser, forward, pad_batch, Geometry
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention ``alpha``, cumulative ``alpha_bar`` and reverse std ``sigma``.

    Arrays are indexed by ``t - 1``; use :meth:`at` for 1-based access.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def at(self, t):
        self.check_t(t)
        i = t - 1
        return self.alphas[i], self.alpha_bars[i], self.sigmas[i]

    def check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas), np.sqrt(betas))


def forward_step(schedule, x_prev, t, rng=None, eps=None):
    """One noising step ``x_t ~ q(x_t | x_{t-1})``."""
    alpha, _, _ = schedule.at(t)
    x_prev = np.asarray(x_prev)
    if eps is None:
        eps = rng.standard_normal(x_prev.shape)
    return np.sqrt(alpha) * x_prev + np.sqrt(1.0 - alpha) * eps


def forward_marginal(schedule, x0, t, eps):
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    _, abar, _ = schedule.at(t)
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"x0 shape {np.shape(x0)} != eps shape {np.shape(eps)}")
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(eps)


def denoising_loss(eps_model, schedule, x0, y, X, Y, t, eps):
    """``||eps - eps_model(x_t, y, t, X, Y)||^2`` with unit weighting.

    ``eps_model`` may return a numpy array or an autodiff tensor; the result
    has the same kind (float or scalar tensor).
    """
    X = np.asarray(X).reshape(-1)
    Y = np.asarray(Y).reshape(-1)
    if len(X) == 0:
        raise ValueError("empty latent index set")
    if set(X.tolist()) & set(Y.tolist()):
        raise ValueError("latent and observed indices overlap")
    if np.shape(x0)[0] != len(X):
        raise ValueError("x0 rows must match |X|")
    x_t = forward_marginal(schedule, x0, t, eps).astype(ad.default_dtype())
    pred = eps_model(x_t, y, t, X, Y)
    if isinstance(pred, ad.Tensor):
        return ad.sum(ad.square(ad.sub(np.asarray(eps, dtype=pred.data.dtype), pred)))
    return float(np.sum((np.asarray(eps) - pred) ** 2))


def reverse_mean(schedule, x_t, eps_pred, t):
    alpha, abar, _ = schedule.at(t)
    return (x_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_pred) / np.sqrt(alpha)


def reverse_step(eps_model, schedule, x_t, y, t, X, Y, rng=None, z=None):
    """Draw ``x_{t-1} ~ p(x_{t-1} | x_t, y)``; no noise is added at ``t = 1``."""
    schedule.check_t(t)
    mu = reverse_mean(schedule, np.asarray(x_t), eps_model(x_t, y, t, X, Y), t)
    if t == 1:
        return mu
    if z is None:
        z = rng.standard_normal(np.shape(x_t))
    return mu + schedule.sigmas[t - 1] * z


def ddpm_sample(eps_model, schedule, y, X, Y, rng, frame_dim):
    """Sample latent frames at ``X`` conditioned on ``y`` observed at ``Y``."""
    X = np.asarray(X).reshape(-1)
    if len(X) == 0:
        raise ValueError("empty latent index set")
    x = rng.standard_normal((len(X), frame_dim))
    for t in range(schedule.T, 0, -1):
        x = reverse_step(eps_model, schedule, x, y, t, X, Y, rng)
    return x


def ddpm_sample_batch(denoiser: Denoiser, schedule, y, X, Y, rngs):
    """Batched sampler: ``y`` is ``(B, |Y|, fd)``, ``X``/``Y`` are ``(B, n)`` index
    arrays, ``rngs`` holds one generator per batch row so each row's draws are
    independent of the batch it is processed in."""
    X = np.asarray(X, dtype=np.int64)
    Y = np.asarray(Y, dtype=np.int64).reshape(len(X), -1)
    B, nx = X.shape
    ny = Y.shape[1]
    fd = denoiser.config.frame_dim
    if nx == 0:
        raise ValueError("empty latent index set")
    if nx + ny > denoiser.config.max_frames:
        raise ValueError(f"|X|+|Y|={nx + ny} exceeds K={denoiser.config.max_frames}")
    geom = denoiser.geometry(np.concatenate([X, Y], axis=1))
    dtype = np.float32
    y = np.asarray(y, dtype=dtype).reshape(B, ny, fd)
    indicator = np.concatenate([np.zeros((B, nx)), np.ones((B, ny))], axis=1)
    x = np.stack([r.standard_normal((nx, fd)) for r in rngs]).astype(np.float64)
    for t in range(schedule.T, 0, -1):
        frames = np.concatenate([x.astype(dtype), y], axis=1)
        eps = denoiser.batch(frames, indicator, np.full(B, t), geom)[:, :nx].astype(np.float64)
        x = reverse_mean(schedule, x, eps, t)
        if t > 1:
            z = np.stack([r.standard_normal((nx, fd)) for r in rngs])
            x = x + schedule.sigmas[t - 1] * z
    return x


# optimisation ----------------------------------------------------------------

class Adam:
    def __init__(self, params: ParamSet, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params, grads):
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - upd).astype(params[k].dtype)

    def state(self):
        out = ParamSet()
        for k in self.m:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state(self, state, step_count):
        for k in self.m:
            self.m[k] = state["m." + k].astype(self.m[k].dtype)
            self.v[k] = state["v." + k].astype(self.v[k].dtype)
        self.step_count = step_count


class NumericalFailure(NonFiniteError):
    def __init__(self, step, detail):
        super().__init__(f"non-finite training loss at step {step}: {detail}")
        self.step = step


def batch_loss(params, config, schedule, batch, t, eps):
    """Mean squared noise-prediction error over latent slots of a padded batch."""
    abar = schedule.alpha_bars[np.asarray(t) - 1][:, None, None]
    noisy = np.sqrt(abar) * batch.frames + np.sqrt(1.0 - abar) * eps
    frames = np.where(batch.latent[..., None], noisy, batch.frames).astype(ad.default_dtype())
    geom = Geometry(batch.positions, batch.mask, config)
    pred = forward(params, config, frames, batch.indicator, t, geom)
    w = batch.latent[..., None].astype(pred.data.dtype)
    sq = ad.mul(ad.square(ad.sub(eps.astype(pred.data.dtype), pred)), w)
    return ad.mul(ad.sum(sq), 1.0 / (w.sum() * config.frame_dim))


def draw_batch(videos, task_sampler, batch_size, K, schedule, rng):
    """Draw tasks, gather frames, pad to K, and draw timesteps and noise."""
    n, N, fd = videos.shape
    examples = []
    for _ in range(batch_size):
        v = videos[int(rng.integers(n))]
        X, Y = task_sampler(rng)
        examples.append((v[X], v[Y], X, Y))
    batch = pad_batch(examples, videos, K, rng)
    t = rng.integers(1, schedule.T + 1, size=batch_size)
    eps = rng.standard_normal(batch.frames.shape).astype(np.float32)
    return batch, t, eps


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, loss):
        self.steps.append(step)
        self.losses.append(loss)

    def to_csv(self):
        return "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in zip(self.steps, self.losses))


def train(denoiser: Denoiser, schedule, videos, task_sampler, steps, lr=1e-4, batch_size=8,
          seed=0, optimizer=None, start_step=0, log_every=1):
    """Stochastic-gradient training of the denoising loss.

    ``task_sampler(rng) -> (X, Y)`` supplies index vectors. Step ``i`` draws
    from its own random stream keyed by ``(seed, i)``, so a run resumed at
    ``start_step`` continues exactly where an uninterrupted one would be.
    Returns ``(optimizer, TrainLog)``; parameters are updated in place.
    """
    videos = np.asarray(videos, dtype=np.float32)
    if videos.ndim != 3 or len(videos) == 0:
        raise ValueError("videos must be a non-empty (n, N, frame_dim) array")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cfg = denoiser.config
    opt = optimizer or Adam(denoiser.params, lr=lr)
    history = TrainLog()
    for step in range(start_step, start_step + steps):
        rng = stream(seed, step)
        batch, t, eps = draw_batch(videos, task_sampler, batch_size, cfg.max_frames, schedule, rng)
        try:
            loss, grads = ad.grad(lambda p: batch_loss(p, cfg, schedule, batch, t, eps), denoiser.params)
        except NonFiniteError as exc:
            raise NumericalFailure(step, str(exc)) from exc
        opt.step(denoiser.params, grads)
        if (step + 1) % log_every == 0:
            history.append(step + 1, loss)
        if (step + 1) % 1000 == 0:
            log.info("step %d loss %.5f", step + 1, loss)
    return opt, history
