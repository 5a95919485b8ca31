import numpy as np
import pytest

from embvc.convert import (ConversionRequest, convert_mel, convert_scaled, convert_utterance,
                           extract_embedding, speaker_profile, window_starts)
from embvc.dsp import SpeakerScalingStats, clip_silence, scale, write_wav
from embvc.errors import NoValidWindows
from embvc.nets import compact_arch, fe_forward, gen_forward, init_params, param_checksum

from .conftest import tone
from .toy import trailing_cycle


@pytest.fixture(scope="module")
def model():
    return init_params(compact_arch(), n_speakers=4, seed=0)


@pytest.fixture(scope="module")
def flat_stats():
    return SpeakerScalingStats("flat", np.zeros(128))


def _mel(T, seed=0):
    return np.random.default_rng(seed).uniform(-4, 0, (128, T))


class TestEmbedding:
    def test_single_window_matches_fe(self, model, flat_stats):
        mel = _mel(64)
        a = extract_embedding(model, [mel], flat_stats)
        b = fe_forward(model, scale(mel, flat_stats))
        np.testing.assert_allclose(a.values, b.values, atol=1e-6)
        np.testing.assert_allclose(a.f3_summary, b.f3_summary, atol=1e-6)

    def test_duplicates_do_not_change_mean(self, model, flat_stats):
        mel = _mel(64)
        a = extract_embedding(model, [mel], flat_stats)
        b = extract_embedding(model, [mel, mel.copy()], flat_stats)
        # float32 convolutions differ slightly between batch sizes
        np.testing.assert_allclose(a.values, b.values, atol=1e-5)

    def test_shape_independent_of_count(self, model, flat_stats):
        e = extract_embedding(model, [_mel(64), _mel(200, 1), _mel(97, 2)], flat_stats)
        assert e.values.shape == (1, 8, 8) and e.f4_summary.shape == (1, 8, 1)

    def test_window_positions(self):
        assert window_starts(160, 64, 32) == [0, 32, 64, 96]
        assert window_starts(63, 64, 32) == []

    def test_no_valid_windows(self, model, flat_stats):
        with pytest.raises(NoValidWindows):
            extract_embedding(model, [_mel(50)], flat_stats)


class TestConvertScaled:
    @pytest.mark.parametrize("T", [64, 100, 128, 257])
    @pytest.mark.parametrize("stitch", ["concat", "overlap"])
    def test_shape_and_range(self, model, T, stitch):
        emb = fe_forward(model, np.zeros((128, 64)))
        y = convert_scaled(model, np.random.default_rng(T).uniform(-1, 1, (128, T)), emb, stitch)
        assert y.shape == (128, T) and np.abs(y).max() <= 1

    def test_concat_equals_per_window(self, model):
        s = np.random.default_rng(3).uniform(-1, 1, (128, 128))
        emb = fe_forward(model, s[:, :64])
        y = convert_scaled(model, s, emb)
        np.testing.assert_allclose(y[:, :64], gen_forward(model, s[:, :64], emb)[0], atol=1e-5)
        np.testing.assert_allclose(y[:, 64:], gen_forward(model, s[:, 64:], emb)[0], atol=1e-5)

    def test_short_source_padded(self, model):
        emb = fe_forward(model, np.zeros((128, 64)))
        short = np.random.default_rng(0).uniform(-1, 1, (128, 50))
        assert convert_scaled(model, short, emb).shape == (128, 50)
        with pytest.raises(NoValidWindows):
            convert_scaled(model, short, emb, pad_short=False)

    def test_unknown_stitch(self, model):
        with pytest.raises(ValueError):
            convert_scaled(model, np.zeros((128, 64)), fe_forward(model, np.zeros((128, 64))), "zip")

    def test_deterministic(self, model, flat_stats):
        emb = extract_embedding(model, [_mel(128)], flat_stats)
        a = convert_mel(model, _mel(150, 5), flat_stats, emb, flat_stats)
        b = convert_mel(model, _mel(150, 5), flat_stats, emb, flat_stats)
        np.testing.assert_array_equal(a, b)


class TestUtterance:
    def test_unseen_target_pipeline(self, model, tmp_path, mel_config, flat_stats):
        refs = []
        for i, f in enumerate((180.0, 185.0, 190.0)):
            refs.append(tmp_path / f"ref{i}.wav")
            write_wav(refs[-1], tone(f, 1.0), 16000)
        before = param_checksum(model)
        stats, emb = speaker_profile(model, refs, mel_config, "newcomer")
        assert stats.subset_files == [str(p) for p in refs]
        src = np.concatenate([np.zeros(4000), tone(300, 1.2), np.zeros(4000)])
        audio, src_mel, out_mel = convert_utterance(model, src, flat_stats, emb, stats, mel_config,
                                                    return_mels=True)
        assert param_checksum(model) == before
        assert out_mel.shape == src_mel.shape and np.isfinite(audio).all()
        clipped = len(clip_silence(src, 40.0, 16000))
        assert abs(len(audio) - clipped) <= 64 * mel_config.hop_length

    def test_short_source_audio(self, model, mel_config, flat_stats):
        emb = extract_embedding(model, [_mel(64)], flat_stats)
        audio = convert_utterance(model, tone(250, 0.1), flat_stats, emb, flat_stats, mel_config)
        assert len(audio) > 0 and np.isfinite(audio).all()
        with pytest.raises(NoValidWindows):
            convert_utterance(model, tone(250, 0.1), flat_stats, emb, flat_stats, mel_config,
                              pad_short=False)

    def test_request_needs_one_target(self):
        with pytest.raises(ValueError):
            ConversionRequest("a.wav", "c.bin", "o.wav")
        with pytest.raises(ValueError):
            ConversionRequest("a.wav", "c.bin", "o.wav", target_id="x", target_samples=["s.wav"])
        assert ConversionRequest("a.wav", "c.bin", "o.wav", target_samples=["s.wav"]).unseen_target


def test_self_conversion_within_cycle_error(toy_run):
    """A trained model maps a window onto itself about as well as it closes the cycle."""
    model = toy_run.model
    rng = np.random.default_rng(0)
    errors = []
    for spk, mels in toy_run.mels.items():
        for mel in mels[:4]:
            s = scale(mel, toy_run.stats[spk])
            a = int(rng.integers(0, s.shape[1] - 64 + 1))
            win = s[:, a:a + 64]
            out = convert_scaled(model, win, fe_forward(model, win))
            errors.append(np.abs(out - win).mean())
    assert np.mean(errors) <= 1.1 * trailing_cycle(toy_run.history)
