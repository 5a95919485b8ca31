"""Waveform <-> log-mel conversion, per-speaker scaling and Griffin-Lim.

Log-mels are plain ``float`` arrays of shape ``[n_mels, T]`` holding the
natural log of magnitude mel energies.  Scaled mels share that shape and
live in ``[-1, +1]``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import AllSilent, DimensionMismatch, EmptyCollection, UnsupportedFormat
from .validation import check_log_mel, check_waveform

LOG_EPS = 1e-10
# Width of the clipping interval in natural-log units (min = max - 4).
LOG_RANGE = 4.0

MELC_MAGIC = b"MELC"
MELC_VERSION = 1
_MELC_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    hop_length: int = 32
    n_mels: int = 128
    fmin: float = 40.0
    fmax: float = 7900.0
    griffin_lim_iters: int = 60

    def __post_init__(self):
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, "
                f"fmax={self.fmax}, sample_rate={self.sample_rate}"
            )
        if not (1 <= self.hop_length <= self.n_fft):
            raise ValueError("hop_length must be in [1, n_fft]")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.griffin_lim_iters < 0:
            raise ValueError("griffin_lim_iters must be >= 0")

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# --------------------------------------------------------------------------
# audio I/O
# --------------------------------------------------------------------------

def load_audio(path, config: MelConfig = MelConfig()) -> np.ndarray:
    """Read a PCM WAV file as mono float64 in ``[-1, 1]`` at ``config.sample_rate``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if data.size == 0:
        raise UnsupportedFormat(f"{path}: zero-length audio")

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "i":
        x = data.astype(np.float64) / float(2 ** (8 * data.dtype.itemsize - 1))
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)

    if rate != config.sample_rate:
        g = math.gcd(int(rate), int(config.sample_rate))
        x = resample_poly(x, config.sample_rate // g, rate // g)
    return np.clip(x, -1.0, 1.0)


def write_wav(path, waveform, sample_rate: int = 16000) -> None:
    """Write ``waveform`` as 16-bit PCM."""
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    wavfile.write(Path(path), int(sample_rate), np.round(x * 32767).astype("<i2"))


def clip_silence(waveform, threshold_db: float = 40.0, sample_rate: int = 16000,
                 frame_ms: float = 25.0) -> np.ndarray:
    """Drop frames whose RMS is more than ``threshold_db`` below the loudest frame.

    Frames are non-overlapping; the trailing partial frame counts as a frame.
    """
    x = check_waveform(waveform)
    frame = max(1, int(round(sample_rate * frame_ms / 1000.0)))
    n_frames = -(-x.size // frame)
    padded = np.zeros(n_frames * frame)
    padded[: x.size] = x
    sq = padded.reshape(n_frames, frame) ** 2
    counts = np.full(n_frames, frame, dtype=np.float64)
    counts[-1] = x.size - (n_frames - 1) * frame
    rms = np.sqrt(sq.sum(axis=1) / counts)
    peak = rms.max()
    if peak <= 0.0:
        raise AllSilent("waveform contains no signal")
    with np.errstate(divide="ignore"):
        level = 20.0 * np.log10(rms / peak)
    keep = level >= -threshold_db
    mask = np.repeat(keep, frame)[: x.size]
    return x[mask]


# --------------------------------------------------------------------------
# spectral analysis
# --------------------------------------------------------------------------

def _hz_to_mel(f):
    # Slaney-style: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mels = f / f_sp
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep,
                    mels)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    mel_pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_pts[2:] - mel_pts[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_filterbank(config: MelConfig = MelConfig()) -> np.ndarray:
    """Slaney-normalised triangular filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    return _mel_basis(config.sample_rate, config.n_fft, config.n_mels,
                      float(config.fmin), float(config.fmax))


@lru_cache(maxsize=16)
def _mel_pinv(sample_rate, n_fft, n_mels, fmin, fmax) -> np.ndarray:
    p = np.linalg.pinv(_mel_basis(sample_rate, n_fft, n_mels, fmin, fmax))
    p.setflags(write=False)
    return p


def _window(n_fft: int) -> torch.Tensor:
    return torch.hann_window(n_fft, periodic=True, dtype=torch.float64)


def stft(waveform: np.ndarray, config: MelConfig) -> np.ndarray:
    """Centered, zero-padded Hann STFT; returns complex ``[n_fft//2+1, T]``."""
    x = torch.as_tensor(np.asarray(waveform, dtype=np.float64))
    spec = torch.stft(x, config.n_fft, hop_length=config.hop_length, win_length=config.n_fft,
                      window=_window(config.n_fft), center=True, pad_mode="constant",
                      return_complex=True)
    return spec.numpy()


def istft(spec: np.ndarray, config: MelConfig, length: int | None = None) -> np.ndarray:
    s = torch.as_tensor(np.asarray(spec, dtype=np.complex128))
    y = torch.istft(s, config.n_fft, hop_length=config.hop_length, win_length=config.n_fft,
                    window=_window(config.n_fft), center=True, length=length)
    return y.numpy()


def mel_spectrogram(waveform, config: MelConfig = MelConfig()) -> np.ndarray:
    """Natural-log magnitude mel spectrogram, shape ``[n_mels, 1 + len // hop]``."""
    x = check_waveform(waveform)
    mag = np.abs(stft(x, config))
    return np.log(mel_filterbank(config) @ mag + LOG_EPS)


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a list of waveforms to a list of log-mels."""

    def __init__(self, config: MelConfig | None = None):
        self.config = config

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        config = self.config or MelConfig()
        return [mel_spectrogram(x, config) for x in X]


# --------------------------------------------------------------------------
# per-speaker scaling
# --------------------------------------------------------------------------

@dataclass
class SpeakerScalingStats:
    speaker_id: str
    per_bin_max: np.ndarray
    percentile: float = 0.999
    subset_files: list = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        self.per_bin_max = np.asarray(self.per_bin_max, dtype=np.float64)
        if self.per_bin_max.ndim != 1:
            raise ValueError("per_bin_max must be a vector")

    @property
    def per_bin_min(self) -> np.ndarray:
        return self.per_bin_max - LOG_RANGE

    @property
    def n_mels(self) -> int:
        return self.per_bin_max.size

    def to_dict(self) -> dict:
        return {
            "speaker_id": self.speaker_id,
            "per_bin_max": self.per_bin_max.tolist(),
            "per_bin_min": self.per_bin_min.tolist(),
            "percentile": self.percentile,
            "subset_files": [str(f) for f in self.subset_files],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerScalingStats":
        return cls(speaker_id=d["speaker_id"], per_bin_max=np.asarray(d["per_bin_max"]),
                   percentile=d.get("percentile", 0.999),
                   subset_files=list(d.get("subset_files", [])), seed=d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SpeakerScalingStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def nearest_rank_index(p: float, n: int) -> int:
    """0-based index of the nearest-rank ``p``-quantile among ``n`` sorted values."""
    # tolerance guards against p*n landing a hair above an integer
    return min(n, max(1, math.ceil(p * n - 1e-9))) - 1


def compute_scaling_stats(mels: Iterable, percentile: float = 0.999, speaker_id: str = "",
                          subset_files: Sequence = (), seed: int | None = None
                          ) -> SpeakerScalingStats:
    """Per-bin nearest-rank percentile of log-mel values pooled over ``mels``."""
    mels = [check_log_mel(m) for m in mels]
    if not mels:
        raise EmptyCollection("no spectrograms given")
    n_mels = mels[0].shape[0]
    if any(m.shape[0] != n_mels for m in mels):
        raise DimensionMismatch("spectrograms disagree on n_mels")
    if not 0.0 < percentile <= 1.0:
        raise ValueError("percentile must be in (0, 1]")
    pooled = np.concatenate(mels, axis=1)
    k = nearest_rank_index(percentile, pooled.shape[1])
    top = np.partition(pooled, k, axis=1)[:, k]
    return SpeakerScalingStats(speaker_id=speaker_id, per_bin_max=top, percentile=percentile,
                               subset_files=list(subset_files), seed=seed)


def choose_stats_subset(files: Sequence, seed: int, max_files: int = 20) -> list:
    """Seeded random subset of at most ``max_files`` files, in their original order."""
    files = list(files)
    if len(files) <= max_files:
        return files
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(files), size=max_files, replace=False))
    return [files[i] for i in picked]


def _check_stats(mel: np.ndarray, stats: SpeakerScalingStats) -> None:
    if mel.shape[0] != stats.n_mels:
        raise DimensionMismatch(f"mel has {mel.shape[0]} bins, stats have {stats.n_mels}")


def scale(mel, stats: SpeakerScalingStats) -> np.ndarray:
    """Clip each bin to ``[max - 4, max]`` and map it affinely onto ``[-1, 1]``."""
    m = check_log_mel(mel)
    _check_stats(m, stats)
    lo, hi = stats.per_bin_min[:, None], stats.per_bin_max[:, None]
    out = 2.0 * (np.clip(m, lo, hi) - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0)


def unscale(scaled, stats: SpeakerScalingStats) -> np.ndarray:
    s = check_log_mel(scaled)
    _check_stats(s, stats)
    lo, hi = stats.per_bin_min[:, None], stats.per_bin_max[:, None]
    return (s + 1.0) * 0.5 * (hi - lo) + lo


class SpeakerScaler(TransformerMixin, BaseEstimator):
    """Fits one speaker's per-bin clipping bounds and scales log-mels to ``[-1, 1]``.

    ``fit`` takes a list of ``[n_mels, T]`` log-mels from the same speaker.
    """

    def __init__(self, percentile: float = 0.999, speaker_id: str = ""):
        self.percentile = percentile
        self.speaker_id = speaker_id

    def fit(self, X, y=None):
        X = [X] if isinstance(X, np.ndarray) and X.ndim == 2 else list(X)
        self.stats_ = compute_scaling_stats(X, self.percentile, speaker_id=self.speaker_id)
        self.n_features_in_ = self.stats_.n_mels
        return self

    @classmethod
    def from_stats(cls, stats: SpeakerScalingStats) -> "SpeakerScaler":
        obj = cls(percentile=stats.percentile, speaker_id=stats.speaker_id)
        obj.stats_ = stats
        obj.n_features_in_ = stats.n_mels
        return obj

    def transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return scale(X, self.stats_)
        return [scale(x, self.stats_) for x in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return unscale(X, self.stats_)
        return [unscale(x, self.stats_) for x in X]


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------

def mel_to_linear(mel, config: MelConfig = MelConfig()) -> np.ndarray:
    """Linear magnitude estimate: clamped pseudo-inverse of the filterbank."""
    m = check_log_mel(mel, config.n_mels)
    pinv = _mel_pinv(config.sample_rate, config.n_fft, config.n_mels,
                     float(config.fmin), float(config.fmax))
    mel_mag = np.maximum(np.exp(m) - LOG_EPS, 0.0)
    return np.maximum(pinv @ mel_mag, 0.0)


def spectral_convergence(waveform, magnitude, config: MelConfig) -> float:
    """``|| |STFT(y)| - S ||_F / || S ||_F`` over the common frames."""
    rebuilt = np.abs(stft(waveform, config))
    t = min(rebuilt.shape[1], magnitude.shape[1])
    denom = np.linalg.norm(magnitude[:, :t])
    if denom == 0.0:
        return float(np.linalg.norm(rebuilt[:, :t]))
    return float(np.linalg.norm(rebuilt[:, :t] - magnitude[:, :t]) / denom)


def griffin_lim(magnitude, config: MelConfig = MelConfig(), n_iter: int | None = None,
                seed: int = 0, length: int | None = None) -> np.ndarray:
    """Iterative phase recovery from a linear magnitude ``[n_fft//2+1, T]``.

    Starts from seeded random phase; each iteration re-imposes ``magnitude``
    on the STFT of the current estimate.
    """
    S = np.asarray(magnitude, dtype=np.float64)
    n_iter = config.griffin_lim_iters if n_iter is None else n_iter
    if length is None:
        length = (S.shape[1] - 1) * config.hop_length
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(S.shape))
    for _ in range(n_iter):
        y = istft(S * angles, config, length=length)
        rebuilt = stft(y, config)
        angles = rebuilt / np.maximum(np.abs(rebuilt), 1e-16)
    return istft(S * angles, config, length=length)


def mel_to_audio(mel, config: MelConfig = MelConfig(), n_iter: int | None = None,
                 seed: int = 0) -> np.ndarray:
    """Invert a log-mel to a waveform of ``(T - 1) * hop_length`` samples."""
    return griffin_lim(mel_to_linear(mel, config), config, n_iter=n_iter, seed=seed)


# --------------------------------------------------------------------------
# spectrogram cache files
# --------------------------------------------------------------------------

def write_mel_cache(path, mel) -> None:
    """16-byte header (magic, version, n_mels, T) then little-endian f32 row-major."""
    m = np.ascontiguousarray(check_log_mel(mel), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MELC_HEADER.pack(MELC_MAGIC, MELC_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_mel_cache(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _MELC_HEADER.size:
        raise UnsupportedFormat(f"{path}: truncated mel cache")
    magic, version, n_mels, n_frames = _MELC_HEADER.unpack_from(raw)
    if magic != MELC_MAGIC or version != MELC_VERSION:
        raise UnsupportedFormat(f"{path}: not a MELC v{MELC_VERSION} file")
    body = np.frombuffer(raw, dtype="<f4", offset=_MELC_HEADER.size)
    if body.size != n_mels * n_frames:
        raise UnsupportedFormat(f"{path}: expected {n_mels * n_frames} values, found {body.size}")
    return body.reshape(n_mels, n_frames).astype(np.float64)
