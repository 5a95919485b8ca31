import dataclasses

import numpy as np
import pytest
import torch

from embvc.dsp import SpeakerScaler, mel_spectrogram
from embvc.errors import CheckpointMismatch, InconsistentArch, ShapeMismatch, UnknownWidth
from embvc.nets import (ArchConfig, SpeakerEmbedding, compact_arch, crop, disc_forward,
                        extract_patches, fe_forward, gen_forward, init_params, load_checkpoint,
                        miniature_arch, param_checksum, reflect_indices, save_checkpoint)

from .conftest import tone


@pytest.fixture(scope="module")
def model():
    return init_params(ArchConfig(), n_speakers=4, seed=0)


@pytest.fixture(scope="module")
def window():
    return np.random.default_rng(0).uniform(-1, 1, (128, 64))


class TestArch:
    def test_default_valid(self):
        a = ArchConfig().validate()
        assert a.f3_shape == (128, 16, 1) and a.f4_shape == (1, 8, 1)

    def test_freq_product_8(self):
        bad = dataclasses.replace(ArchConfig(), fe_strides=((2, 2), (2, 2), (2, 2), (1, 1)))
        with pytest.raises(InconsistentArch):
            bad.validate()
        with pytest.raises(InconsistentArch):
            init_params(bad)

    def test_up_strides_must_undo(self):
        bad = dataclasses.replace(ArchConfig(), up_strides=((1, 2), (2, 1), (2, 2), (2, 2), (1, 1)))
        with pytest.raises(InconsistentArch):
            bad.validate()

    def test_dict_round_trip(self):
        a = compact_arch()
        assert ArchConfig.from_dict(a.to_dict()) == a

    def test_miniature_is_small(self):
        m = init_params(miniature_arch(), 2, dtype=torch.float64)
        assert sum(p.numel() for p in m.parameters()) < 10_000


class TestShapes:
    def test_fe(self, model, window):
        e = fe_forward(model, window)
        assert e.values.shape == (1, 8, 8)
        assert e.f3_summary.shape == (128, 16, 1) and e.f4_summary.shape == (1, 8, 1)

    def test_fe_rejects_other_shapes(self, model):
        with pytest.raises(ShapeMismatch):
            fe_forward(model, np.zeros((128, 32)))
        with pytest.raises(ShapeMismatch):
            fe_forward(model, np.zeros((64, 64)))

    def test_gen_preserves_shape(self, model, window):
        emb = fe_forward(model, window)
        for width in (64, 128, 200):
            src = np.zeros((128, width))
            assert gen_forward(model, src, emb).shape == (1, 128, width)

    def test_gen_width_constraint(self, model, window):
        with pytest.raises(ShapeMismatch):
            gen_forward(model, np.zeros((128, 60)), fe_forward(model, window))

    def test_head_is_2n(self, model, window):
        for w in (32, 64, 128):
            assert disc_forward(model, window[:, :w] if w <= 64 else np.tile(window, 2), w).shape == (8,)
        two = init_params(ArchConfig(), n_speakers=2)
        assert disc_forward(two, window[:, :32], 32).shape == (4,)


class TestValues:
    def test_zeros_finite(self, model):
        e = fe_forward(model, np.zeros((128, 64)))
        assert all(np.isfinite(a).all() for a in (e.values, e.f3_summary, e.f4_summary))

    def test_tanh_range(self, model, window):
        emb = fe_forward(model, window)
        y = gen_forward(model, window * 50, emb)
        assert y.min() >= -1 and y.max() <= 1

    def test_deterministic(self, model, window):
        emb = fe_forward(model, window)
        np.testing.assert_array_equal(gen_forward(model, window, emb), gen_forward(model, window, emb))

    def test_softmax_sums_to_one(self, model):
        rng = np.random.default_rng(1)
        for w in (32, 64, 128):
            p = disc_forward(model, rng.uniform(-1, 1, (128, w)) * 10, w)
            assert abs(p.sum() - 1) < 1e-6 and (p >= 0).all()

    def test_unknown_width(self, model):
        with pytest.raises(UnknownWidth):
            disc_forward(model, np.zeros((128, 48)), 48)

    def test_summaries_ignore_alignment(self, model, mel_config):
        # 437.5 Hz is a multiple of sr / hop, so every interior frame sees the same phase
        mel = mel_spectrogram(tone(437.5, 3.0), mel_config)
        scaled = SpeakerScaler().fit([mel]).transform(mel)
        a = fe_forward(model, scaled[:, 200:264])
        b = fe_forward(model, scaled[:, 317:381])
        np.testing.assert_allclose(a.f3_summary, b.f3_summary, atol=1e-3)
        np.testing.assert_allclose(a.f4_summary, b.f4_summary, atol=1e-3)

    def test_embedding_changes_output(self, model, window):
        rng = np.random.default_rng(4)
        e1 = fe_forward(model, rng.uniform(-1, 1, (128, 64)))
        e2 = fe_forward(model, -np.ones((128, 64)))
        assert np.abs(gen_forward(model, window, e1) - gen_forward(model, window, e2)).mean() > 0


class TestInit:
    def test_checksum_stable(self):
        a = init_params(compact_arch(), 3, seed=0)
        b = init_params(compact_arch(), 3, seed=0)
        c = init_params(compact_arch(), 3, seed=1)
        assert param_checksum(a) == param_checksum(b) != param_checksum(c)

    def test_fan_in_scale(self):
        m = init_params(ArchConfig(), 4, seed=0)
        w = m.disc.nets["128"].head.weight.detach().numpy()
        assert abs(w.mean()) < 0.01 and abs(w.std() * np.sqrt(w.shape[1]) - 1) < 0.05
        assert all(float(b.detach().abs().max()) == 0 for n, b in m.named_parameters() if n.endswith("bias"))


class TestPatches:
    def test_silence_empty(self):
        assert extract_patches(-np.ones((128, 64)), power_threshold=0.15) == []

    def test_full_scale_three(self):
        out = extract_patches(np.ones((128, 64)), power_threshold=0.15)
        assert [w for _, w in out] == [32, 64, 128]
        assert all(p.shape == (1, 128, w) for p, w in out)

    def test_width_128_whole_window(self):
        win = np.random.default_rng(2).uniform(0, 1, (128, 128))
        out = dict((w, p) for p, w in extract_patches(win, rng=np.random.default_rng(9)))
        np.testing.assert_array_equal(out[128][0], win)

    def test_reflection_padding(self):
        idx = reflect_indices(64, 128)
        assert len(idx) == 128 and idx.min() == 0 and idx.max() == 63
        assert list(idx[:33]) == [32 - i for i in range(32)] + [0]

    def test_crop_positions(self):
        x = torch.arange(2 * 10, dtype=torch.float64).reshape(2, 1, 1, 10)
        out = crop(x, 3, [1, 6])
        assert out[0, 0, 0].tolist() == [1, 2, 3] and out[1, 0, 0].tolist() == [16, 17, 18]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_params(compact_arch(), 3, seed=5)
        save_checkpoint(tmp_path / "c.bin", m, step=7, rng_state={"a": 1})
        ck = load_checkpoint(tmp_path / "c.bin", expect_arch=compact_arch())
        assert param_checksum(ck.model) == param_checksum(m)
        assert ck.step == 7 and ck.rng_state == {"a": 1}

    def test_arch_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.bin", init_params(compact_arch(), 2))
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(tmp_path / "c.bin", expect_arch=ArchConfig())

    def test_garbage(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope" * 10)
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(tmp_path / "x.bin")

    def test_embedding_file(self, tmp_path, model, window):
        e = fe_forward(model, window)
        e.save(tmp_path / "e.json")
        back = SpeakerEmbedding.load(tmp_path / "e.json")
        np.testing.assert_array_equal(back.values, e.values)
        np.testing.assert_array_equal(back.f3_summary, e.f3_summary)
