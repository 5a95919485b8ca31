"""Embedding-conditioned many-to-many voice conversion on log-mel spectrograms."""

from .dsp import LogMelExtractor, MelConfig, SpeakerScaler, SpeakerScalingStats
from .estimator import SpeakerProfile, VoiceConverter
from .eval import SpeakerIdentifier
from .nets import ArchConfig, SpeakerEmbedding, compact_arch
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "LogMelExtractor", "MelConfig", "SpeakerEmbedding", "SpeakerIdentifier",
    "SpeakerProfile", "SpeakerScaler", "SpeakerScalingStats", "TrainConfig", "VoiceConverter",
    "compact_arch", "__version__",
]
