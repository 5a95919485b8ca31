import itertools

import numpy as np
import pytest

from embvc.dataset import (SpeakerEntry, SpeakerRegistry, build_manifest, load_manifest,
                           merge_registries, sample_batch, sample_training_pair, save_manifest,
                           split_held_out)
from embvc.dsp import SpeakerScalingStats, write_wav
from embvc.errors import (DuplicateSpeakerId, EmptyDataset, InsufficientSpeakers, UnknownSpeaker,
                          WindowTooShort)


def _make_tree(root, n_speakers, n_files, prefix="s"):
    for i in range(n_speakers):
        d = root / f"{prefix}{i:03d}"
        d.mkdir(parents=True)
        for u in range(n_files):
            write_wav(d / f"u{u}.wav", np.full(160, 0.1), 16000)


def _toy_data(n_speakers, frames=80, n_mels=4, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"spk{i}" for i in range(n_speakers)]
    utts = {s: [rng.normal(0, 1, (n_mels, frames)) for _ in range(2)] for s in ids}
    stats = {s: SpeakerScalingStats(s, np.full(n_mels, 1.0)) for s in ids}
    return SpeakerRegistry.from_ids(ids), utts, stats


class TestManifest:
    def test_counts(self, tmp_path):
        _make_tree(tmp_path, 4, 3)
        reg, records = build_manifest(tmp_path)
        assert reg.N == 4 and len(records) == 12
        assert len({r.audio_path for r in records}) == 12
        assert [reg.index_of(s) for s in sorted(reg.ids)] == [0, 1, 2, 3]
        assert all(abs(r.duration - 0.01) < 1e-9 for r in records)

    def test_many_speakers(self, tmp_path):
        _make_tree(tmp_path, 251, 1)
        reg, _ = build_manifest(tmp_path)
        assert reg.N == 251

    def test_empty(self, tmp_path):
        (tmp_path / "spk").mkdir()
        (tmp_path / "spk" / "notes.txt").write_text("x")
        with pytest.raises(EmptyDataset):
            build_manifest(tmp_path)

    def test_duplicate_across_roots(self, tmp_path):
        _make_tree(tmp_path / "a", 2, 1)
        _make_tree(tmp_path / "b", 2, 1)
        with pytest.raises(DuplicateSpeakerId):
            build_manifest([tmp_path / "a", tmp_path / "b"])

    def test_prefix_layout(self, tmp_path):
        for sid in ("x", "y"):
            for u in range(2):
                write_wav(tmp_path / f"{sid}_{u}.wav", np.full(80, 0.1), 16000)
        reg, records = build_manifest(tmp_path, layout="prefix")
        assert reg.ids == ["x", "y"] and len(records) == 4

    def test_round_trip(self, tmp_path):
        _make_tree(tmp_path / "d", 2, 2)
        reg, records = build_manifest(tmp_path / "d")
        records[0].cache_path = "c.melc"
        save_manifest(records, tmp_path / "m.jsonl")
        assert load_manifest(tmp_path / "m.jsonl") == records
        reg.save(tmp_path / "r.json")
        assert SpeakerRegistry.load(tmp_path / "r.json") == reg


class TestRegistry:
    def test_duplicate_ids(self):
        with pytest.raises(DuplicateSpeakerId):
            SpeakerRegistry.from_ids(["a", "b", "a"])

    def test_indices_must_be_permutation(self):
        with pytest.raises(ValueError):
            SpeakerRegistry([SpeakerEntry("a", 0, True), SpeakerEntry("b", 2, True)])


class TestSplit:
    def test_291_speakers_minus_40(self):
        reg = SpeakerRegistry.from_ids([f"s{i:03d}" for i in range(291)])
        held = [f"s{i:03d}" for i in range(251, 291)]
        train, out = split_held_out(reg, held)
        assert train.N == 251 and len(out) == 40
        assert all(not e.in_dataset and e.index is None for e in out.speakers)
        assert sorted(train.index_of(s) for s in train.ids) == list(range(251))

    def test_identity(self):
        reg = SpeakerRegistry.from_ids(["a", "b"])
        train, out = split_held_out(reg, [])
        assert train == reg and len(out) == 0

    def test_unknown(self):
        with pytest.raises(UnknownSpeaker):
            split_held_out(SpeakerRegistry.from_ids(["a"]), ["zzz"])

    def test_reindexed_and_merged(self):
        reg = SpeakerRegistry.from_ids(["a", "b", "c"])
        train, out = split_held_out(reg, ["a"])
        assert train.index_of("b") == 0 and train.index_of("c") == 1
        merged = merge_registries(train, out)
        assert merged.N == 2 and not merged["a"].in_dataset
        with pytest.raises(UnknownSpeaker):
            merged.index_of("a")


class TestSampling:
    def test_two_speakers(self):
        reg, utts, stats = _toy_data(2)
        rng = np.random.default_rng(0)
        pairs = {(p.source_index, p.target_index)
                 for p in (sample_training_pair(reg, utts, stats, rng) for _ in range(50))}
        assert pairs == {(0, 1), (1, 0)}

    def test_uniform_over_ordered_pairs(self):
        reg, utts, stats = _toy_data(4, frames=64)
        rng = np.random.default_rng(123)
        counts = dict.fromkeys(itertools.permutations(range(4), 2), 0)
        n = 10_000
        for _ in range(n):
            p = sample_training_pair(reg, utts, stats, rng)
            counts[(p.source_index, p.target_index)] += 1
        assert len(counts) == 12
        for c in counts.values():
            assert abs(c / n - 1 / 12) <= 0.2 / 12

    def test_seeded_sequence(self):
        reg, utts, stats = _toy_data(3)
        a = sample_batch(reg, utts, stats, np.random.default_rng(5), 20)
        b = sample_batch(reg, utts, stats, np.random.default_rng(5), 20)
        for x, y in zip(a, b):
            assert (x.source_index, x.target_index) == (y.source_index, y.target_index)
            np.testing.assert_array_equal(x.source_window, y.source_window)
            np.testing.assert_array_equal(x.target_window, y.target_window)

    def test_windows(self):
        reg, utts, stats = _toy_data(3, frames=70)
        for p in sample_batch(reg, utts, stats, np.random.default_rng(0), 30):
            assert p.source_window.shape == (4, 64) == p.target_window.shape
            assert np.abs(p.source_window).max() <= 1 and p.source_index != p.target_index

    def test_held_out_never_sampled(self):
        reg, utts, stats = _toy_data(4)
        train, _ = split_held_out(reg, ["spk2"])
        held = {s: v for s, v in utts.items() if s != "spk2"}
        for p in sample_batch(train, held, stats, np.random.default_rng(1), 200):
            assert "spk2" not in (train.id_of(p.source_index), train.id_of(p.target_index))

    def test_short_utterances_skipped(self):
        reg, utts, stats = _toy_data(2)
        utts["spk0"].append(np.zeros((4, 10)))
        for p in sample_batch(reg, utts, stats, np.random.default_rng(2), 40):
            assert p.source_window.shape[1] == 64

    def test_all_too_short(self):
        reg, utts, stats = _toy_data(2, frames=30)
        with pytest.raises(WindowTooShort):
            sample_training_pair(reg, utts, stats, np.random.default_rng(0))

    def test_insufficient(self):
        reg, utts, stats = _toy_data(1)
        with pytest.raises(InsufficientSpeakers):
            sample_training_pair(reg, utts, stats, np.random.default_rng(0))
