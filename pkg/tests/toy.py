"""Desk-scale experiment shared by the acceptance gate and the trained-model tests.

Four synthetic speakers train a compact model; a fifth speaker never enters
training and serves as the out-of-dataset target.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from embvc.dataset import SpeakerRegistry
from embvc.dsp import MelConfig, clip_silence, compute_scaling_stats, load_audio, mel_spectrogram
from embvc.nets import compact_arch, load_checkpoint, param_checksum
from embvc.synth import DEFAULT_SPEAKERS, make_corpus
from embvc.training import TrainConfig, read_history, train

TRAIN_SPEAKERS = DEFAULT_SPEAKERS[:4]
HELD_OUT = DEFAULT_SPEAKERS[4]
N_UTTERANCES = 12
TOY_TRAIN = TrainConfig(total_steps=800, batch_size=8, lr_g=5e-4, lr_d=5e-4,
                        checkpoint_interval=400, seed=0)


@dataclass
class ToyRun:
    root: Path
    files: dict
    mels: dict
    stats: dict
    registry: SpeakerRegistry
    checkpoint: Path
    model: object
    history: list
    checksum: str
    mel_config: MelConfig


def load_mels(files, config):
    return {s: [mel_spectrogram(clip_silence(load_audio(f, config)), config) for f in fs]
            for s, fs in files.items()}


def run_toy(root: Path, config: TrainConfig = TOY_TRAIN) -> ToyRun:
    root = Path(root)
    mel_config = MelConfig()
    files = make_corpus(root / "wav", TRAIN_SPEAKERS, n_utterances=N_UTTERANCES, seed=0)
    mels = load_mels(files, mel_config)
    stats = {s: compute_scaling_stats(m, speaker_id=s) for s, m in mels.items()}
    registry = SpeakerRegistry.from_ids(list(mels))
    ckpt = train(registry, mels, stats, config, root / "run", arch=compact_arch())
    model = load_checkpoint(ckpt, expect_arch=compact_arch()).model
    return ToyRun(root, files, mels, stats, registry, ckpt, model,
                  read_history(root / "run" / "history.jsonl"), param_checksum(model), mel_config)


def trailing_cycle(history, n=50) -> float:
    return float(np.mean([r["loss_cycle"] for r in history[-n:]]))
