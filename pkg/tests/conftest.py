import numpy as np
import pytest
import torch

from embvc.dsp import MelConfig, clip_silence, compute_scaling_stats, load_audio, mel_spectrogram
from embvc.synth import DEFAULT_SPEAKERS, make_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def mel_config():
    return MelConfig()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Four synthetic speakers, four one-second utterances each, on disk."""
    root = tmp_path_factory.mktemp("corpus")
    files = make_corpus(root, DEFAULT_SPEAKERS[:4], n_utterances=4, seed=3)
    return root, files


@pytest.fixture(scope="session")
def small_mels(small_corpus, mel_config):
    _, files = small_corpus
    mels = {s: [mel_spectrogram(clip_silence(load_audio(f, mel_config)), mel_config) for f in fs]
            for s, fs in files.items()}
    stats = {s: compute_scaling_stats(m, speaker_id=s) for s, m in mels.items()}
    return mels, stats


def tone(freq=440.0, seconds=1.0, sr=16000, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Compact model trained once per session on four synthetic speakers."""
    from .toy import run_toy
    return run_toy(tmp_path_factory.mktemp("toy"))
