"""Speaker-identification harness and top-K conversion accuracy.

The identifier here is a small CNN over log-mel windows; the protocol around
it (rank the target among all speakers, count rank <= K per group) does not
depend on the classifier.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import MelConfig, mel_spectrogram
from .errors import EmptyGroup, InsufficientData, UnknownTarget
from .validation import check_log_mel

DEFAULT_KS = (1, 3, 5, 10, 20)


class _SidNet(nn.Module):
    def __init__(self, n_mels: int, n_classes: int, channels: Sequence[int]):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, n_classes)

    def forward(self, x):
        return self.head(self.body(x).mean(dim=(2, 3)))


def _windows(mel: np.ndarray, width: int, hop: int) -> np.ndarray:
    if mel.shape[1] < width:
        idx = np.pad(np.arange(mel.shape[1]), (0, width - mel.shape[1]), mode="wrap")
        mel = mel[:, idx]
    starts = range(0, mel.shape[1] - width + 1, hop)
    return np.stack([mel[:, a:a + width] for a in starts])


class SpeakerIdentifier(ClassifierMixin, BaseEstimator):
    """Softmax CNN over fixed-width log-mel windows.

    ``fit`` takes a list of ``[n_mels, T]`` log-mels and their speaker ids.
    Utterance-level scores are the mean of per-window log-probabilities.
    """

    def __init__(self, window: int = 64, hop: int = 32, channels=(16, 32, 32), n_steps: int = 300,
                 batch_size: int = 32, learning_rate: float = 1e-3, random_state: int = 0):
        self.window = window
        self.hop = hop
        self.channels = channels
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = [check_log_mel(m) for m in X]
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise InsufficientData("speaker identification needs at least 2 speakers")
        self.n_features_in_ = X[0].shape[0]
        lookup = {c: i for i, c in enumerate(self.classes_)}
        wins, labels = [], []
        for mel, spk in zip(X, y):
            w = _windows(mel, self.window, self.hop)
            wins.append(w)
            labels.append(np.full(len(w), lookup[spk]))
        wins = np.concatenate(wins)
        labels = np.concatenate(labels)
        self.mean_ = wins.mean(axis=(0, 2))
        self.std_ = wins.std(axis=(0, 2)) + 1e-3

        torch_gen = torch.Generator().manual_seed(self.random_state)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.net_ = _SidNet(self.n_features_in_, len(self.classes_), self.channels)
        xs = torch.as_tensor(self._normalise(wins)[:, None], dtype=torch.float32)
        ys = torch.as_tensor(labels, dtype=torch.long)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.net_.train()
        for _ in range(self.n_steps):
            idx = torch.randint(len(xs), (min(self.batch_size, len(xs)),), generator=torch_gen)
            loss = F.cross_entropy(self.net_(xs[idx]), ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.net_.eval()
        return self

    def _normalise(self, wins):
        return (wins - self.mean_[None, :, None]) / self.std_[None, :, None]

    def window_log_proba(self, mel) -> np.ndarray:
        check_is_fitted(self, "net_")
        wins = _windows(check_log_mel(mel, self.n_features_in_), self.window, self.hop)
        x = torch.as_tensor(self._normalise(wins)[:, None], dtype=torch.float32)
        with torch.no_grad():
            return torch.log_softmax(self.net_(x), dim=-1).double().numpy()

    def decision_function(self, X) -> np.ndarray:
        """Per-utterance scores: mean window log-probability for each speaker."""
        return np.stack([self.window_log_proba(m).mean(axis=0) for m in X])

    def predict_proba(self, X) -> np.ndarray:
        s = self.decision_function(X)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


@dataclass
class SidSplit:
    train: dict
    test: dict

    def describe(self) -> dict:
        return {"train": {k: len(v) for k, v in self.train.items()},
                "test": {k: len(v) for k, v in self.test.items()}}


def split_utterances(mels_by_speaker: Mapping[str, Sequence[np.ndarray]], train_fraction=0.5,
                     seed: int = 0) -> SidSplit:
    """Per-speaker disjoint train/test halves chosen with a seeded shuffle."""
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for spk in sorted(mels_by_speaker):
        mels = list(mels_by_speaker[spk])
        if len(mels) < 2:
            raise InsufficientData(f"{spk}: need utterances in both split halves")
        order = rng.permutation(len(mels))
        n_train = min(len(mels) - 1, max(1, int(round(train_fraction * len(mels)))))
        train[spk] = [mels[i] for i in order[:n_train]]
        test[spk] = [mels[i] for i in order[n_train:]]
    return SidSplit(train, test)


def train_sid(mels_by_speaker: Mapping[str, Sequence[np.ndarray]], train_fraction: float = 0.5,
              seed: int = 0, **params):
    """Fit a :class:`SpeakerIdentifier` on one half of each speaker's utterances.

    Returns ``(sid, info)`` where ``info`` holds the split sizes and the
    held-out top-1 accuracy in percent.
    """
    if len(mels_by_speaker) < 2:
        raise InsufficientData("speaker identification needs at least 2 speakers")
    split = split_utterances(mels_by_speaker, train_fraction, seed)
    X = [m for spk in split.train for m in split.train[spk]]
    y = [spk for spk in split.train for _ in split.train[spk]]
    sid = SpeakerIdentifier(random_state=seed, **params).fit(X, y)
    Xt = [m for spk in split.test for m in split.test[spk]]
    yt = [spk for spk in split.test for _ in split.test[spk]]
    acc = 100.0 * float(np.mean(sid.predict(Xt) == np.asarray(yt)))
    return sid, {"split": split.describe(), "eval_top1": acc}


# --------------------------------------------------------------------------
# ranking protocol
# --------------------------------------------------------------------------

def rank_of(scores, target_index: int) -> int:
    """1-based position of ``target_index`` after a descending sort; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= target_index < s.size:
        raise UnknownTarget(target_index)
    t = s[target_index]
    return int(1 + np.sum(s > t) + np.sum(s[:target_index] == t))


def rank_target(sid: SpeakerIdentifier, converted, target_id, mel_config: MelConfig = MelConfig()
                ) -> int:
    """Rank of ``target_id`` for a converted utterance (waveform or log-mel)."""
    check_is_fitted(sid, "net_")
    hits = np.flatnonzero(sid.classes_ == target_id)
    if hits.size == 0:
        raise UnknownTarget(target_id)
    x = np.asarray(converted)
    mel = mel_spectrogram(x, mel_config) if x.ndim == 1 else x
    return rank_of(sid.decision_function([mel])[0], int(hits[0]))


def chance_baseline(n_speakers: int, k: int) -> float:
    """Top-K accuracy (percent) of a uniformly random ranking."""
    if not 1 <= k <= n_speakers:
        raise ValueError(f"need 1 <= K <= M, got K={k}, M={n_speakers}")
    return 100.0 * k / n_speakers


@dataclass(frozen=True)
class ConversionOutcome:
    source_group: str
    target_group: str
    target_gender: str
    rank: int
    source_id: str = ""
    target_id: str = ""


@dataclass
class TopKReport:
    """Accuracy@K rows keyed by ``(source_group, target_group, target_gender)``.

    ``"*"`` in a key position means the row pools over that attribute, so
    ``("*", "in", "*")`` covers every conversion into a training speaker.
    """

    ks: tuple
    rows: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def cell(self, key) -> dict:
        if key not in self.rows:
            raise EmptyGroup(f"no conversions for {key}")
        return self.rows[key]

    def to_dict(self) -> dict:
        return {"ks": list(self.ks),
                "rows": [{"source_group": k[0], "target_group": k[1], "target_gender": k[2],
                          "n": self.counts[k], "accuracy": {str(K): v for K, v in r.items()}}
                         for k, r in self.rows.items()]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def to_table(self) -> str:
        head = f"{'source':>8} {'target':>8} {'gender':>6} {'n':>5} " + " ".join(
            f"{'top-' + str(k):>7}" for k in self.ks)
        lines = [head, "-" * len(head)]
        for key, r in self.rows.items():
            lines.append(f"{key[0]:>8} {key[1]:>8} {key[2]:>6} {self.counts[key]:>5} "
                         + " ".join(f"{r[k]:7.1f}" for k in self.ks))
        return "\n".join(lines)


def _accuracy(ranks: Sequence[int], ks) -> dict:
    r = np.asarray(ranks)
    return {k: 100.0 * float(np.mean(r <= k)) for k in ks}


def topk_report(outcomes: Iterable[ConversionOutcome], ks=DEFAULT_KS) -> TopKReport:
    """Rows pooled by target group first, then the full source/target/gender breakdown."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyGroup("no conversions to report")
    ks = tuple(sorted(ks))
    groups: dict = defaultdict(list)
    for o in outcomes:
        groups[("*", o.target_group, "*")].append(o.rank)
    for o in outcomes:
        groups[(o.source_group, o.target_group, o.target_gender)].append(o.rank)
    report = TopKReport(ks)

    def order(key):
        pooled = key[0] == "*"
        return (not pooled, key[0] != "in", key[0], key[1] != "in", key[1], key[2])

    for key in sorted(groups, key=order):
        report.rows[key] = _accuracy(groups[key], ks)
        report.counts[key] = len(groups[key])
    return report


def chance_row(n_speakers: int, ks=DEFAULT_KS) -> dict:
    return {k: chance_baseline(n_speakers, k) for k in ks if k <= n_speakers}
