"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numbers

import numpy as np


def check_videos(videos, *, min_length=1, frame_dim=None, name="videos"):
    """Return ``videos`` as a float64 ``(n, N, frame_dim)`` array or raise ``ValueError``."""
    try:
        arr = np.asarray(videos, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{name}: not numeric ({exc})") from None
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected (n_videos, N, frame_dim), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name}: no videos")
    if arr.shape[1] < min_length:
        raise ValueError(f"{name}: videos have {arr.shape[1]} frames, need at least {min_length}")
    if frame_dim is not None and arr.shape[2] != frame_dim:
        raise ValueError(f"{name}: frame_dim {arr.shape[2]} does not match the fitted {frame_dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or infinite values")
    return arr


def check_int(value, name, *, low=None, high=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if low is not None and value < low:
        raise ValueError(f"{name} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ValueError(f"{name} must be <= {high}, got {value}")
    return int(value)


def check_float(value, name, *, low=None, high=None, low_open=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if low is not None and (value < low or (low_open and value == low)):
        raise ValueError(f"{name} must be {'>' if low_open else '>='} {low}, got {value}")
    if high is not None and value > high:
        raise ValueError(f"{name} must be <= {high}, got {value}")
    return float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_is_fitted(estimator, attrs=("denoiser_",)):
    if not all(hasattr(estimator, a) for a in attrs):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")


class NotFittedError(ValueError, AttributeError):
    pass
