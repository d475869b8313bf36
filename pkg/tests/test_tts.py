import numpy as np
import pytest

from speechlab import tensor as T
from speechlab import tts
from speechlab.checks import gradcheck
from speechlab.dsp import AudioBuffer, BandSpec, band_energy
from speechlab.errors import ConfigError
from speechlab.tokenizer import EncoderConfig, TokenizerModel
from speechlab.tts import LmConfig, TextIds, TtsLm, generate, synthesize, text_tokenize


def rng(tag):
    return T.Rng(2024).child(tag)


def small_lm(token_dim=4, max_seq=64):
    return TtsLm(LmConfig(layers=2, heads=2, d_model=16, ffn_dim=32,
                          max_seq_len=max_seq, token_dim=token_dim), rng("lm"))


class TestTextFrontend:
    def test_single_char_embedding_matches_table(self):
        lm = small_lm()
        ids = text_tokenize("a")
        assert ids.ids.size == 1
        emb = lm.text_embed(ids)
        expect = lm.params["text_table"].data[ids.ids[0]] + tts.sinusoidal_positions(1, 16)[0]
        np.testing.assert_allclose(emb.data[0], expect)

    def test_idempotent_normalization(self):
        a = text_tokenize("Hello THERE")
        b = text_tokenize("hello there")
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_id_char_roundtrip(self):
        from speechlab.objectives import ALPHABET, make_transcript
        tr = make_transcript(ALPHABET)
        assert tr.text() == ALPHABET

    def test_empty_after_normalization(self):
        with pytest.raises(ConfigError, match="empty"):
            text_tokenize("!!!")


class TestLmForward:
    def test_output_shapes(self):
        lm = small_lm()
        frames = T.constant(rng("f").normal((6, 4), std=0.5))
        preds, stops = lm.forward(text_tokenize("abc"), frames)
        assert preds.data.shape == (6, 4)
        assert stops.data.shape == (7,)

    def test_causality_by_perturbation(self):
        lm = small_lm()
        ids = text_tokenize("hi")
        base_frames = rng("cause").normal((8, 4), std=0.5)
        base_preds, base_stops = lm.forward(ids, T.constant(base_frames))
        for t in (0, 3, 6):
            bumped = base_frames.copy()
            bumped[t] += 1.0
            preds, stops = lm.forward(ids, T.constant(bumped))
            delta = np.abs(preds.data - base_preds.data).max(axis=1)
            # predictions for frames <= t see only frames < t, so they can't move
            assert np.all(delta[:t + 1] < 1e-12)
            assert np.any(delta[t + 1:] > 1e-8)
            sdelta = np.abs(stops.data - base_stops.data)
            assert np.all(sdelta[:t + 1] < 1e-12)

    def test_overlength_rejected(self):
        lm = small_lm(max_seq=8)
        with pytest.raises(ConfigError, match="max_seq_len"):
            lm.forward(text_tokenize("abcd"), T.constant(np.zeros((8, 4))))

    def test_gradcheck_tiny(self):
        lm = TtsLm(LmConfig(layers=1, heads=2, d_model=8, ffn_dim=12,
                            max_seq_len=16, token_dim=3), rng("lm-grad"))
        frames = T.constant(rng("lm-gf").normal((3, 3), std=0.5))
        target = T.constant(rng("lm-gt").normal((3, 3), std=0.5))
        ids = text_tokenize("ab")

        def loss():
            preds, stops = lm.forward(ids, frames)
            return T.add(T.mse(preds, target), T.tmean(T.mul(stops, stops)))

        ok, err = gradcheck(loss, list(lm.named_parameters().values()), tol=1e-4)
        assert ok, f"max rel err {err}"

    def test_batch_order_invariance_of_mean_loss(self):
        lm = small_lm()
        ids = text_tokenize("abc")
        items = [rng(f"item{i}").normal((5, 4), std=0.5) for i in range(3)]

        def batch_loss(order):
            vals = []
            for i in order:
                preds, _ = lm.forward(ids, T.constant(items[i]))
                vals.append(T.mse(preds, T.constant(np.zeros((5, 4)))).item())
            return float(np.mean(sorted(vals)))

        assert batch_loss([0, 1, 2]) == pytest.approx(batch_loss([2, 0, 1]), abs=1e-15)


class TestGenerate:
    def tokenizer(self):
        return TokenizerModel(
            EncoderConfig(sample_rate=800, strides=(2, 2), channels=(3, 4), token_dim=4),
            rng("tok"))

    def test_max_frames_zero(self):
        lm, tok = small_lm(), self.tokenizer()
        seq = generate(lm, tok, "hello", max_frames=0)
        assert seq.tokens.shape == (0, 4)

    def test_deterministic(self):
        lm, tok = small_lm(), self.tokenizer()
        a = generate(lm, tok, "hello", max_frames=5)
        b = generate(lm, tok, "hello", max_frames=5)
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_prompt_prefix_changes_output(self):
        lm, tok = small_lm(), self.tokenizer()
        prompt = AudioBuffer(0.3 * np.sin(2 * np.pi * 60 * np.arange(160) / 800), 800)
        a = generate(lm, tok, "hello", max_frames=4)
        b = generate(lm, tok, "hello", prompt_audio=prompt, max_frames=4)
        assert a.tokens.shape[0] <= 4 and b.tokens.shape[0] <= 4
        if a.tokens.shape == b.tokens.shape and a.tokens.size:
            assert not np.allclose(a.tokens, b.tokens)


class TestSynthesize:
    def test_output_rate_and_band_limit(self):
        tok = TokenizerModel(
            EncoderConfig(sample_rate=24000, strides=(2, 4, 5, 4),
                          channels=(6, 8, 10, 12), token_dim=4),
            rng("tok24"))
        lm = small_lm(token_dim=4, max_seq=128)
        out = synthesize(lm, tok, "ab", max_frames=40)
        assert out.sample_rate == 24000
        if out.samples.size >= 4096 and np.any(out.samples != 0.0):
            ny = 12000.0
            hi = band_energy(out, BandSpec(0.99 * ny, 0.008 * ny))
            mid = band_energy(out, BandSpec(0.5 * ny, 0.008 * ny))
            if mid > 1e-20:
                assert hi < mid  # spectral content above the limiter is suppressed
