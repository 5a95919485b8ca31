"""Inference: speaker embeddings from reference audio and utterance conversion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dsp import (MelConfig, SpeakerScalingStats, clip_silence, compute_scaling_stats, load_audio,
                  mel_spectrogram, mel_to_audio, scale, unscale)
from .errors import NoValidWindows, ShapeMismatch
from .nets import SpeakerEmbedding, VoiceConversionGAN, _prod
from .validation import check_log_mel


@dataclass
class ConversionRequest:
    source_audio: str
    checkpoint: str
    output: str
    target_id: str | None = None
    target_samples: list = field(default_factory=list)

    def __post_init__(self):
        if (self.target_id is None) == (not self.target_samples):
            raise ValueError("give exactly one of target_id or target_samples")

    @property
    def unseen_target(self) -> bool:
        return self.target_id is None


def window_starts(n_frames: int, width: int, stride: int) -> list[int]:
    if n_frames < width:
        return []
    return list(range(0, n_frames - width + 1, stride))


def extract_embedding(model: VoiceConversionGAN, utterances: Sequence[np.ndarray],
                      stats: SpeakerScalingStats, stride: int = 32) -> SpeakerEmbedding:
    """Average FE output over every ``window``-frame slice (hop ``stride``) of the scaled log-mels."""
    width = model.arch.window
    windows = []
    for mel in utterances:
        s = scale(mel, stats)
        windows.extend(s[:, a:a + width] for a in window_starts(s.shape[1], width, stride))
    if not windows:
        raise NoValidWindows(f"no utterance has {width} frames")
    x = torch.as_tensor(np.stack(windows)[:, None], dtype=model.dtype)
    with torch.no_grad():
        e, f3, f4 = model.fe(x)
    return SpeakerEmbedding(e.double().mean(0).numpy(), f3.double().mean(0).numpy(),
                            f4.double().mean(0).numpy())


def _pad_end(s: np.ndarray, n: int) -> np.ndarray:
    if n <= s.shape[1]:
        return s
    idx = np.pad(np.arange(s.shape[1]), (0, n - s.shape[1]), mode="reflect" if s.shape[1] > 1 else "edge")
    return s[:, idx]


def convert_scaled(model: VoiceConversionGAN, scaled: np.ndarray, emb: SpeakerEmbedding,
                   stitch: str = "concat", pad_short: bool = True) -> np.ndarray:
    """Run G over a scaled mel of any length; output has the same shape, values in ``[-1, 1]``.

    ``stitch="concat"`` converts consecutive non-overlapping windows (a trailing
    remainder is taken from a final window aligned to the end); ``"overlap"``
    uses hop ``window // 2`` with triangular cross-fades.
    """
    s = check_log_mel(scaled, model.arch.n_mels)
    T = s.shape[1]
    W = model.arch.window
    if T < W and not pad_short:
        raise NoValidWindows(f"utterance has {T} frames, fewer than the {W}-frame window")
    t_prod = _prod(st[1] for st in model.arch.fe_strides)
    Tp = max(W, -(-T // t_prod) * t_prod)
    s = _pad_end(s, Tp)

    if stitch == "concat":
        starts = list(range(0, Tp - W + 1, W))
        if starts[-1] + W < Tp:
            starts.append(Tp - W)
    elif stitch == "overlap":
        hop = W // 2
        starts = list(range(0, Tp - W + 1, hop))
        if starts[-1] + W < Tp:
            starts.append(Tp - W)
    else:
        raise ValueError(f"unknown stitch mode {stitch!r}")

    x = torch.as_tensor(np.stack([s[:, a:a + W] for a in starts])[:, None], dtype=model.dtype)
    with torch.no_grad():
        y = model.gen(x, *emb.as_tensors(model.dtype, batch=len(starts)))
    y = y[:, 0].double().numpy()

    out = np.zeros_like(s)
    if stitch == "concat":
        written = 0
        for a, win in zip(starts, y):
            lo = max(a, written)
            out[:, lo:a + W] = win[:, lo - a:]
            written = a + W
    else:
        weight = np.zeros(Tp)
        ramp = 1.0 - np.abs(np.arange(W) - (W - 1) / 2) / (W / 2) + 1e-3
        for a, win in zip(starts, y):
            out[:, a:a + W] += win * ramp
            weight[a:a + W] += ramp
        out /= weight
    return out[:, :T]


def convert_mel(model: VoiceConversionGAN, log_mel: np.ndarray, source_stats: SpeakerScalingStats,
                target_embedding: SpeakerEmbedding, target_stats: SpeakerScalingStats,
                stitch: str = "concat", pad_short: bool = True) -> np.ndarray:
    """Source log-mel -> converted log-mel in the target speaker's range."""
    y = convert_scaled(model, scale(log_mel, source_stats), target_embedding, stitch, pad_short)
    return unscale(y, target_stats)


def speaker_profile(model: VoiceConversionGAN, sample_audio: Sequence, config: MelConfig,
                    speaker_id: str = "unseen", silence_db: float = 40.0):
    """Scaling stats and embedding for a speaker known only through sample files."""
    mels = [mel_spectrogram(clip_silence(load_audio(p, config), silence_db, config.sample_rate),
                            config) for p in sample_audio]
    stats = compute_scaling_stats(mels, speaker_id=speaker_id,
                                  subset_files=[str(p) for p in sample_audio])
    return stats, extract_embedding(model, mels, stats)


def convert_utterance(model: VoiceConversionGAN, source_audio, source_stats: SpeakerScalingStats,
                      target_embedding: SpeakerEmbedding, target_stats: SpeakerScalingStats,
                      config: MelConfig = MelConfig(), silence_db: float = 40.0,
                      stitch: str = "concat", pad_short: bool = True, return_mels: bool = False):
    """Audio in, audio out.

    ``source_audio`` is a path or a waveform at ``config.sample_rate``.  With
    ``return_mels`` the source and converted log-mels are returned as well.
    """
    if isinstance(source_audio, (str, Path)):
        wav = load_audio(source_audio, config)
    else:
        wav = np.asarray(source_audio, dtype=np.float64)
    wav = clip_silence(wav, silence_db, config.sample_rate)
    src_mel = mel_spectrogram(wav, config)
    if src_mel.shape[0] != model.arch.n_mels:
        raise ShapeMismatch(f"mel config gives {src_mel.shape[0]} bins, model expects "
                            f"{model.arch.n_mels}")
    out_mel = convert_mel(model, src_mel, source_stats, target_embedding, target_stats,
                          stitch, pad_short)
    audio = mel_to_audio(out_mel, config)
    if return_mels:
        return audio, src_mel, out_mel
    return audio
