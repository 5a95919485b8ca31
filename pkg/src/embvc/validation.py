"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ShapeMismatch, UnsupportedFormat


def check_waveform(waveform, *, allow_empty: bool = False) -> np.ndarray:
    """Return ``waveform`` as a 1-D float64 array, rejecting bad input."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim == 2 and 1 in x.shape:
        x = x.reshape(-1)
    if x.ndim != 1:
        raise ShapeMismatch(f"waveform must be 1-D, got shape {x.shape}")
    if not allow_empty and x.size == 0:
        raise UnsupportedFormat("waveform is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains NaN or Inf")
    return x


def check_log_mel(mel, n_mels: int | None = None) -> np.ndarray:
    """Validate a ``[n_mels, T]`` log-mel (or scaled mel) matrix."""
    m = np.asarray(mel)
    if m.dtype.kind != "f":
        m = m.astype(np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"mel must be 2-D [n_mels, T], got shape {m.shape}")
    if m.shape[1] < 1:
        raise ShapeMismatch("mel has no frames")
    if n_mels is not None and m.shape[0] != n_mels:
        raise DimensionMismatch(f"expected {n_mels} mel bins, got {m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("mel contains NaN or Inf")
    return m


def check_window(window, n_mels: int, width: int | None = None):
    """Coerce a single window to a ``(1, 1, n_mels, width)`` tensor-like array.

    Accepts ``[n_mels, W]``, ``[1, n_mels, W]`` or ``[B, 1, n_mels, W]``.
    """
    import torch

    t = torch.as_tensor(window)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != 1 or t.shape[2] != n_mels:
        raise ShapeMismatch(f"expected window of shape [B, 1, {n_mels}, W], got {tuple(t.shape)}")
    if width is not None and t.shape[3] != width:
        raise ShapeMismatch(f"expected window width {width}, got {t.shape[3]}")
    return t


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
