"""Scikit-learn style wrapper: ``fit`` on videos, ``complete`` under a sampling scheme."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import Adam, batch_loss, draw_batch, make_schedule, train
from .rng import stream
from .schemes import AdaptiveScheme, SamplingScheme, make_scheme, sample_videos
from .taskdist import TASK_DISTRIBUTIONS, task_sampler
from .validation import check_choice, check_float, check_int, check_is_fitted, check_videos

_TRAIN_KEYS = ("beta_start", "beta_end", "learning_rate", "batch_size", "task_distribution",
               "random_state", "n_iter")


class FlexibleDiffusionModel(BaseEstimator):
    """Video diffusion model trained to sample any subset of frames given any other subset.

    Parameters
    ----------
    max_frames : int
        ``K``, the most frames the network sees at once.
    n_steps : int
        Optimiser steps per call to :meth:`fit`.
    task_distribution : {"structured", "uniform", "single"}
        How training (latent, observed) index sets are drawn.
    warm_start : bool
        Continue from the current weights and optimiser state on refit.

    Frames are standardised per channel with statistics of the training set;
    :meth:`complete` undoes this on output.
    """

    def __init__(self, max_frames=10, channels=64, n_blocks=2, n_heads=4, diffusion_steps=250,
                 beta_start=1e-4, beta_end=0.02, n_steps=1000, learning_rate=1e-4, batch_size=16,
                 task_distribution="structured", random_state=0, warm_start=False):
        self.max_frames = max_frames
        self.channels = channels
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.diffusion_steps = diffusion_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.task_distribution = task_distribution
        self.random_state = random_state
        self.warm_start = warm_start

    def _check_params(self):
        check_int(self.max_frames, "max_frames", low=2)
        check_int(self.channels, "channels", low=2)
        check_int(self.n_blocks, "n_blocks", low=1)
        check_int(self.n_heads, "n_heads", low=1)
        check_int(self.diffusion_steps, "diffusion_steps", low=1)
        check_int(self.n_steps, "n_steps", low=0)
        check_int(self.batch_size, "batch_size", low=1)
        check_int(self.random_state, "random_state", low=0)
        check_float(self.learning_rate, "learning_rate", low=0, low_open=True)
        check_float(self.beta_start, "beta_start", low=0, low_open=True)
        check_float(self.beta_end, "beta_end", low=self.beta_start, high=1 - 1e-9)
        check_choice(self.task_distribution, "task_distribution", TASK_DISTRIBUTIONS)

    def _config(self, frame_dim, N):
        return DenoiserConfig(frame_dim=frame_dim, channels=self.channels, blocks=self.n_blocks,
                              heads=self.n_heads, max_frames=self.max_frames, steps=self.diffusion_steps,
                              max_video_length=N)

    def fit(self, X, y=None):
        """Train on ``X`` of shape ``(n_videos, N, frame_dim)``."""
        self._check_params()
        V = check_videos(X, min_length=2)
        n, N, fd = V.shape
        resume = self.warm_start and hasattr(self, "denoiser_")
        if resume:
            cfg = self.denoiser_.config
            if (cfg.frame_dim, cfg.max_video_length) != (fd, N):
                raise ValueError("warm_start needs videos of the same shape as the first fit")
        else:
            cfg = self._config(fd, N)
            # rounded to float32 so a reloaded checkpoint scales identically
            self.mean_ = V.mean(axis=(0, 1)).astype(np.float32).astype(np.float64)
            self.scale_ = np.maximum(V.std(axis=(0, 1)), 1e-6).astype(np.float32).astype(np.float64)
            self.denoiser_ = Denoiser.init(cfg, stream(self.random_state, 0))
            self.optimizer_ = Adam(self.denoiser_.params, lr=self.learning_rate)
            self.n_iter_ = 0
        self.schedule_ = make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
        sampler = task_sampler(self.task_distribution, N, self.max_frames)
        _, hist = train(self.denoiser_, self.schedule_, self._scale(V), sampler, self.n_steps,
                        lr=self.learning_rate, batch_size=self.batch_size, seed=self.random_state + 1,
                        optimizer=self.optimizer_, start_step=self.n_iter_)
        self.n_iter_ += self.n_steps
        self.loss_curve_ = list(getattr(self, "loss_curve_", [])) if resume else []
        self.loss_curve_ += hist.losses
        self.n_features_in_ = fd
        return self

    def _scale(self, V):
        return ((V - self.mean_) / self.scale_).astype(np.float32)

    def _unscale(self, V):
        return V * self.scale_ + self.mean_

    def resolve_scheme(self, scheme, N, n_obs):
        if isinstance(scheme, (SamplingScheme, AdaptiveScheme)):
            return scheme
        if n_obs is None:
            raise ValueError("n_obs is required when the scheme is given by name")
        return make_scheme(scheme, N, n_obs, self.max_frames)

    def complete(self, videos, scheme="hierarchy2", n_obs=None, seed=0):
        """Fill in every frame after the first ``n_obs`` of each video.

        ``scheme`` is a catalog name or a scheme object. Observed frames are
        returned unchanged.
        """
        check_is_fitted(self)
        V = check_videos(videos, frame_dim=self.n_features_in_)
        sch = self.resolve_scheme(scheme, V.shape[1], n_obs)
        out = self._unscale(sample_videos(self.denoiser_, self.schedule_, self._scale(V), sch, seed=seed))
        if not np.all(np.isfinite(out)):
            raise ad.NonFiniteError("sampling produced non-finite frames")
        out[:, :sch.n_obs] = V[:, :sch.n_obs]
        return out

    def score(self, X, y=None, n_tasks=4):
        """Negative mean denoising loss on ``X`` under the training task distribution."""
        check_is_fitted(self)
        V = self._scale(check_videos(X, frame_dim=self.n_features_in_))
        sampler = task_sampler(self.task_distribution, V.shape[1], self.max_frames)
        losses = []
        with ad.no_grad():
            for i in range(n_tasks):
                batch, t, eps = draw_batch(V, sampler, min(len(V), 32), self.max_frames, self.schedule_,
                                           stream(self.random_state, 2, i))
                losses.append(float(batch_loss(self.denoiser_.params, self.denoiser_.config,
                                               self.schedule_, batch, t, eps).data))
        return -float(np.mean(losses))

    # persistence -------------------------------------------------------------

    def save(self, path):
        """Weights, optimiser moments and scaling in FDMP, settings in ``<path>.config``."""
        check_is_fitted(self)
        params = ad.ParamSet()
        for k, v in self.denoiser_.params.items():
            params["model." + k] = v
        for k, v in self.optimizer_.state().items():
            params["adam." + k] = v
        params["data.mean"] = np.asarray(self.mean_, dtype=np.float32)
        params["data.scale"] = np.asarray(self.scale_, dtype=np.float32)
        ad.save_params(path, params)
        extra = {k: getattr(self, k if k != "n_iter" else "n_iter_") for k in _TRAIN_KEYS}
        text = self.denoiser_.config.to_text() + "".join(f"{k}={extra[k]}\n" for k in _TRAIN_KEYS)
        Path(str(path) + ".config").write_text(text)

    @classmethod
    def load(cls, path):
        text = Path(str(path) + ".config").read_text()
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        cfg = DenoiserConfig.from_text(text)
        est = cls(max_frames=cfg.max_frames, channels=cfg.channels, n_blocks=cfg.blocks, n_heads=cfg.heads,
                  diffusion_steps=cfg.steps, beta_start=float(kv["beta_start"]), beta_end=float(kv["beta_end"]),
                  learning_rate=float(kv["learning_rate"]), batch_size=int(kv["batch_size"]),
                  task_distribution=kv["task_distribution"], random_state=int(kv["random_state"]))
        raw = ad.load_params(path)
        params = ad.ParamSet({k[6:]: v for k, v in raw.items() if k.startswith("model.")})
        est.denoiser_ = Denoiser(cfg, params)
        est.optimizer_ = Adam(params, lr=est.learning_rate)
        est.n_iter_ = int(kv["n_iter"])
        est.optimizer_.load_state(ad.ParamSet({k[5:]: v for k, v in raw.items() if k.startswith("adam.")}),
                                  est.n_iter_)
        est.mean_ = raw["data.mean"].astype(np.float64)
        est.scale_ = raw["data.scale"].astype(np.float64)
        est.schedule_ = make_schedule(est.diffusion_steps, est.beta_start, est.beta_end)
        est.n_features_in_ = cfg.frame_dim
        est.loss_curve_ = []
        return est
