"""Synthetic multi-speaker corpora for desk-scale experiments.

A synthetic speaker is a harmonic source (fixed pitch range) shaped by a
speaker-specific formant envelope.  Utterance "content" is a random
sequence of syllables: pitch contour, loudness envelope and a vowel-like
formant shift drawn from a table shared by all speakers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import write_wav

# shared vowel table: multiplicative shifts of (F1, F2, F3)
_VOWELS = np.array([
    [1.00, 1.00, 1.00],
    [0.80, 1.25, 1.05],
    [1.20, 0.85, 0.95],
    [0.90, 0.75, 1.10],
    [1.15, 1.15, 0.90],
])


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0: float
    formants: tuple
    bandwidths: tuple = (90.0, 120.0, 180.0)
    tilt_db_per_khz: float = -3.0
    gender: str = "U"


DEFAULT_SPEAKERS = (
    SyntheticSpeaker("spk_a", 95.0, (600.0, 1100.0, 2500.0), tilt_db_per_khz=-4.0, gender="M"),
    SyntheticSpeaker("spk_b", 220.0, (850.0, 1900.0, 3200.0), tilt_db_per_khz=-2.0, gender="F"),
    SyntheticSpeaker("spk_c", 135.0, (450.0, 1500.0, 3700.0), tilt_db_per_khz=-1.0, gender="M"),
    SyntheticSpeaker("spk_d", 290.0, (700.0, 2400.0, 2900.0), tilt_db_per_khz=-5.0, gender="F"),
    SyntheticSpeaker("spk_e", 170.0, (950.0, 1300.0, 2200.0), tilt_db_per_khz=-3.0, gender="F"),
)


def synth_utterance(speaker: SyntheticSpeaker, rng: np.random.Generator,
                    duration: float = 1.0, sample_rate: int = 16000,
                    n_harmonics: int = 60) -> np.ndarray:
    """One utterance: syllables with pitch/loudness/vowel variation and short pauses."""
    n = int(round(duration * sample_rate))
    f0 = np.empty(n)
    gain = np.zeros(n)
    shift = np.ones((n, 3))

    pos = 0
    while pos < n:
        syl = int(rng.uniform(0.12, 0.3) * sample_rate)
        gap = int(rng.uniform(0.0, 0.06) * sample_rate)
        end = min(n, pos + syl)
        seg = np.arange(end - pos)
        span = max(1, end - pos)
        slope = rng.uniform(-0.12, 0.12)
        f0[pos:end] = speaker.f0 * (1.0 + slope * (seg / span - 0.5))
        gain[pos:end] = np.sin(np.pi * (seg + 0.5) / span) ** 0.5 * rng.uniform(0.6, 1.0)
        shift[pos:end] = _VOWELS[rng.integers(len(_VOWELS))]
        stop = min(n, end + gap)
        f0[end:stop] = speaker.f0
        pos = stop

    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    h = np.arange(1, n_harmonics + 1)
    freqs = f0[:, None] * h[None, :]
    formants = np.asarray(speaker.formants)[None, :] * shift
    amp = np.zeros_like(freqs)
    for i, bw in enumerate(speaker.bandwidths):
        amp += 1.0 / (1.0 + ((freqs - formants[:, i:i + 1]) / bw) ** 2)
    amp *= 10 ** (speaker.tilt_db_per_khz * freqs / 1000.0 / 20.0)
    amp[freqs >= 0.48 * sample_rate] = 0.0
    x = (amp * np.sin(phase[:, None] * h[None, :])).sum(axis=1) * gain
    x += 1e-3 * rng.standard_normal(n) * (gain > 0)
    peak = np.abs(x).max()
    x = 0.5 * x / peak if peak > 0 else x
    return x


def make_corpus(root, speakers=DEFAULT_SPEAKERS, n_utterances: int = 12, duration: float = 1.0,
                sample_rate: int = 16000, seed: int = 0) -> dict:
    """Write ``root/<speaker_id>/utt_XXX.wav`` files; returns ``{speaker_id: [paths]}``."""
    root = Path(root)
    out = {}
    for s_idx, spk in enumerate(speakers):
        rng = np.random.default_rng([seed, s_idx])
        d = root / spk.speaker_id
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for u in range(n_utterances):
            p = d / f"utt_{u:03d}.wav"
            write_wav(p, synth_utterance(spk, rng, duration, sample_rate), sample_rate)
            paths.append(p)
        out[spk.speaker_id] = paths
    return out
