"""scikit-learn style front end for the embedding-conditioned converter."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .convert import convert_mel, extract_embedding
from .dataset import SpeakerRegistry
from .dsp import SpeakerScalingStats, compute_scaling_stats
from .errors import UnknownSpeaker
from .nets import ArchConfig, SpeakerEmbedding, load_checkpoint
from .training import TrainConfig, read_history, train
from .validation import check_log_mel


@dataclass
class SpeakerProfile:
    """Everything conversion needs about one speaker."""

    speaker_id: str
    stats: SpeakerScalingStats
    embedding: SpeakerEmbedding


class VoiceConverter(TransformerMixin, BaseEstimator):
    """Many-to-many converter trained on log-mels labelled by speaker.

    >>> vc = VoiceConverter(n_steps=500).fit(mels, speaker_ids)    # doctest: +SKIP
    >>> out = vc.transform(src_mels, source="spk_a", target="spk_b")  # doctest: +SKIP

    ``source``/``target`` may also be :class:`SpeakerProfile` objects built by
    :meth:`profile` from a speaker that was never seen during ``fit``.
    """

    def __init__(self, arch: ArchConfig | None = None, lambda_cycle: float = 10.0,
                 lr_d: float = 2e-4, lr_g: float = 1e-4, batch_size: int = 8,
                 n_steps: int = 1000, power_threshold: float = 0.15, stitch: str = "concat",
                 work_dir=None, random_state: int = 0):
        self.arch = arch
        self.lambda_cycle = lambda_cycle
        self.lr_d = lr_d
        self.lr_g = lr_g
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.power_threshold = power_threshold
        self.stitch = stitch
        self.work_dir = work_dir
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lambda_cycle=self.lambda_cycle, lr_d=self.lr_d, lr_g=self.lr_g,
                           batch_size=self.batch_size, total_steps=self.n_steps,
                           checkpoint_interval=max(1, self.n_steps), seed=self.random_state,
                           power_threshold=self.power_threshold)

    def fit(self, X, y, callback=None):
        """Fit per-speaker scaling and train FE/G/D on ``X`` (list of log-mels)."""
        arch = (self.arch or ArchConfig()).validate()
        X = [check_log_mel(m, arch.n_mels) for m in X]
        y = list(y)
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        by_speaker: dict = {}
        for mel, spk in zip(X, y):
            by_speaker.setdefault(spk, []).append(mel)
        self.registry_ = SpeakerRegistry.from_ids(list(by_speaker))
        self.stats_ = {s: compute_scaling_stats(m, speaker_id=s) for s, m in by_speaker.items()}
        out = Path(self.work_dir) if self.work_dir else Path(tempfile.mkdtemp(prefix="embvc-"))
        ckpt = train(self.registry_, by_speaker, self.stats_, self._train_config(), out,
                     arch=arch, callback=callback)
        self.model_ = load_checkpoint(ckpt, expect_arch=arch).model
        self.checkpoint_path_ = ckpt
        self.history_ = read_history(out / "history.jsonl")
        self.profiles_ = {s: SpeakerProfile(s, self.stats_[s],
                                            extract_embedding(self.model_, by_speaker[s],
                                                              self.stats_[s]))
                          for s in self.registry_.train_ids}
        self.n_features_in_ = arch.n_mels
        return self

    def profile(self, X, speaker_id: str = "unseen") -> SpeakerProfile:
        """Stats and embedding for a speaker from its log-mels; no parameter is touched."""
        check_is_fitted(self, "model_")
        stats = compute_scaling_stats(X, speaker_id=speaker_id)
        return SpeakerProfile(speaker_id, stats, extract_embedding(self.model_, X, stats))

    def _resolve(self, who) -> SpeakerProfile:
        if isinstance(who, SpeakerProfile):
            return who
        try:
            return self.profiles_[who]
        except KeyError:
            raise UnknownSpeaker(who) from None

    def transform(self, X, source=None, target=None):
        """Convert each log-mel in ``X`` from ``source`` to ``target``."""
        check_is_fitted(self, "model_")
        if source is None or target is None:
            raise ValueError("transform needs both source and target")
        src, tgt = self._resolve(source), self._resolve(target)
        single = isinstance(X, np.ndarray) and X.ndim == 2
        mels = [X] if single else list(X)
        out = [convert_mel(self.model_, m, src.stats, tgt.embedding, tgt.stats, self.stitch)
               for m in mels]
        return out[0] if single else out

    def embed(self, X) -> np.ndarray:
        """Flattened style codes, one row per speaker-set in ``X`` (list of lists of log-mels)."""
        check_is_fitted(self, "model_")
        return np.stack([self.profile(mels).embedding.values.ravel() for mels in X])
