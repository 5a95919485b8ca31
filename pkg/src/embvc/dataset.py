"""Speaker registry, utterance manifests and training-pair sampling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dsp import SpeakerScalingStats, scale
from .errors import (DuplicateSpeakerId, EmptyDataset, InsufficientSpeakers, UnknownSpeaker,
                     WindowTooShort)

WINDOW = 64
AUDIO_SUFFIXES = (".wav",)


@dataclass(frozen=True)
class SpeakerEntry:
    speaker_id: str
    index: int | None
    in_dataset: bool


class SpeakerRegistry:
    """Ordered speakers; in-dataset speakers carry indices ``0..N-1``."""

    def __init__(self, speakers: Sequence[SpeakerEntry]):
        self.speakers = list(speakers)
        ids = [s.speaker_id for s in self.speakers]
        seen = set()
        for sid in ids:
            if sid in seen:
                raise DuplicateSpeakerId(sid)
            seen.add(sid)
        indices = sorted(s.index for s in self.speakers if s.in_dataset)
        if indices != list(range(len(indices))):
            raise ValueError("in-dataset indices must be a permutation of 0..N-1")
        if any(s.index is not None for s in self.speakers if not s.in_dataset):
            raise ValueError("held-out speakers cannot carry a training index")
        self._by_id = {s.speaker_id: s for s in self.speakers}
        self._by_index = {s.index: s for s in self.speakers if s.in_dataset}

    @classmethod
    def from_ids(cls, speaker_ids: Sequence[str]) -> "SpeakerRegistry":
        """In-dataset registry indexed in sorted id order."""
        if len(set(speaker_ids)) != len(speaker_ids):
            dup = next(s for s in speaker_ids if list(speaker_ids).count(s) > 1)
            raise DuplicateSpeakerId(dup)
        return cls([SpeakerEntry(sid, i, True) for i, sid in enumerate(sorted(speaker_ids))])

    @property
    def N(self) -> int:
        return len(self._by_index)

    @property
    def ids(self) -> list[str]:
        return [s.speaker_id for s in self.speakers]

    @property
    def train_ids(self) -> list[str]:
        return [self._by_index[i].speaker_id for i in range(self.N)]

    def __len__(self):
        return len(self.speakers)

    def __contains__(self, speaker_id):
        return speaker_id in self._by_id

    def __getitem__(self, speaker_id) -> SpeakerEntry:
        try:
            return self._by_id[speaker_id]
        except KeyError:
            raise UnknownSpeaker(speaker_id) from None

    def index_of(self, speaker_id: str) -> int:
        entry = self[speaker_id]
        if not entry.in_dataset:
            raise UnknownSpeaker(f"{speaker_id} is held out and has no training index")
        return entry.index

    def id_of(self, index: int) -> str:
        return self._by_index[index].speaker_id

    def to_list(self) -> list[dict]:
        return [asdict(s) for s in self.speakers]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_list(), indent=1))

    @classmethod
    def load(cls, path) -> "SpeakerRegistry":
        return cls([SpeakerEntry(**d) for d in json.loads(Path(path).read_text())])

    def __eq__(self, other):
        return isinstance(other, SpeakerRegistry) and self.speakers == other.speakers

    def __repr__(self):
        return f"SpeakerRegistry(N={self.N}, total={len(self)})"


@dataclass
class UtteranceRecord:
    speaker_id: str
    audio_path: str
    duration: float | None
    cache_path: str | None = None

    def __post_init__(self):
        # None marks a file whose header could not be read
        if self.duration is not None and not self.duration > 0:
            raise ValueError(f"{self.audio_path}: duration must be positive")


def _wav_duration(path: Path) -> float | None:
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(path, mmap=True)
    except Exception:
        return None
    return data.shape[0] / float(rate) if data.shape[0] else None


def build_manifest(root, layout: str = "speaker_dir"):
    """Scan one or more dataset roots.

    ``layout="speaker_dir"`` expects ``root/<speaker_id>/**/*.wav``;
    ``layout="prefix"`` expects ``root/<speaker_id>_<anything>.wav``.
    A speaker id found under two different roots is a ``DuplicateSpeakerId``.
    Returns ``(registry, records)``.
    """
    roots = [Path(root)] if isinstance(root, (str, Path)) else [Path(r) for r in root]
    by_speaker: dict[str, list[Path]] = {}
    owner: dict[str, Path] = {}
    for r in roots:
        if not r.is_dir():
            raise EmptyDataset(f"{r} is not a directory")
        found: dict[str, list[Path]] = {}
        if layout == "speaker_dir":
            for d in sorted(p for p in r.iterdir() if p.is_dir()):
                files = sorted(f for f in d.rglob("*") if f.suffix.lower() in AUDIO_SUFFIXES)
                if files:
                    found[d.name] = files
        elif layout == "prefix":
            for f in sorted(r.iterdir()):
                if f.suffix.lower() in AUDIO_SUFFIXES and "_" in f.stem:
                    found.setdefault(f.stem.split("_", 1)[0], []).append(f)
        else:
            raise ValueError(f"unknown layout {layout!r}")
        for sid, files in found.items():
            if sid in owner:
                raise DuplicateSpeakerId(f"{sid} appears under {owner[sid]} and {r}")
            owner[sid] = r
            by_speaker[sid] = files
    if not by_speaker:
        raise EmptyDataset(f"no audio files under {', '.join(map(str, roots))}")

    registry = SpeakerRegistry.from_ids(list(by_speaker))
    records = []
    for sid in registry.ids:
        for f in by_speaker[sid]:
            records.append(UtteranceRecord(sid, str(f), _wav_duration(f)))
    return registry, records


def dump_manifest(records: Sequence[UtteranceRecord]) -> str:
    """Line-delimited JSON, one record per line."""
    return "".join(json.dumps({"speaker_id": r.speaker_id, "path": r.audio_path,
                               "duration": r.duration, "cache_path": r.cache_path}) + "\n"
                   for r in records)


def save_manifest(records: Sequence[UtteranceRecord], path) -> None:
    Path(path).write_text(dump_manifest(records))


def load_manifest(path) -> list[UtteranceRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(UtteranceRecord(d["speaker_id"], d["path"], d["duration"],
                                           d.get("cache_path")))
    return out


def split_held_out(registry: SpeakerRegistry, held_out_ids: Sequence[str]):
    """Return ``(train_registry, held_out_registry)``; the train side is reindexed."""
    held = list(held_out_ids)
    for sid in held:
        if sid not in registry:
            raise UnknownSpeaker(sid)
    held_set = set(held)
    keep = [s.speaker_id for s in registry.speakers if s.in_dataset and s.speaker_id not in held_set]
    train = SpeakerRegistry.from_ids(keep)
    out = SpeakerRegistry([SpeakerEntry(s.speaker_id, None, False)
                           for s in registry.speakers if s.speaker_id in held_set or not s.in_dataset])
    return train, out


def merge_registries(train: SpeakerRegistry, held_out: SpeakerRegistry) -> SpeakerRegistry:
    """Single registry holding the train speakers (indexed) followed by held-out ones."""
    return SpeakerRegistry(list(train.speakers) + [SpeakerEntry(s.speaker_id, None, False)
                                                   for s in held_out.speakers])


@dataclass
class TrainingPair:
    source_window: np.ndarray
    source_index: int
    target_window: np.ndarray
    target_index: int


def _random_window(mels: Sequence[np.ndarray], stats: SpeakerScalingStats,
                   rng: np.random.Generator, width: int, speaker_id: str) -> np.ndarray:
    usable = [m for m in mels if m.shape[1] >= width]
    if not usable:
        raise WindowTooShort(f"{speaker_id}: no utterance with at least {width} frames")
    mel = usable[rng.integers(len(usable))]
    start = rng.integers(mel.shape[1] - width + 1)
    return scale(mel[:, start:start + width], stats)


def sample_training_pair(registry: SpeakerRegistry, utterances: Mapping[str, Sequence[np.ndarray]],
                         stats: Mapping[str, SpeakerScalingStats], rng: np.random.Generator,
                         width: int = WINDOW) -> TrainingPair:
    """Uniform source ``j``, uniform target ``k != j``, random utterance and crop for each.

    ``utterances`` maps speaker ids to cached log-mels; utterances shorter than
    ``width`` frames are skipped.
    """
    N = registry.N
    if N < 2:
        raise InsufficientSpeakers(f"need at least 2 in-dataset speakers, have {N}")
    j = int(rng.integers(N))
    k = int(rng.integers(N - 1))
    k += k >= j
    sj, sk = registry.id_of(j), registry.id_of(k)
    src = _random_window(utterances[sj], stats[sj], rng, width, sj)
    tgt = _random_window(utterances[sk], stats[sk], rng, width, sk)
    return TrainingPair(src, j, tgt, k)


def sample_batch(registry, utterances, stats, rng, batch_size: int,
                 width: int = WINDOW) -> list[TrainingPair]:
    return [sample_training_pair(registry, utterances, stats, rng, width) for _ in range(batch_size)]
