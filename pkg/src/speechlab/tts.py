"""Autoregressive text-to-speech over continuous speech tokens.

The language model consumes [text embeddings | speech-token projections]
as one causally masked sequence. Output row j is the regression of speech
frame j from everything before it; a parallel binary stop head marks the
past-the-end position, which is how generation halts (continuous frames
have no end-of-sequence symbol of their own).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import dsp
from . import tensor as T
from .errors import ConfigError, DivergenceError
from .objectives import VOCAB_SIZE, make_transcript
from .tensor import Rng, Tensor
from .tokenizer import TokenizerModel, TokenSequence

log = logging.getLogger(__name__)


@dataclass
class TextIds:
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 1 or self.ids.max() >= VOCAB_SIZE):
            raise ConfigError(f"text ids out of range [1, {VOCAB_SIZE})")


@dataclass
class LmConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    ffn_dim: int = 512
    max_seq_len: int = 1024
    token_dim: int = 64
    stop_threshold: float = 0.5

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ConfigError(f"stop_threshold must be in (0, 1), got {self.stop_threshold}")


def text_tokenize(text: str) -> TextIds:
    """Normalize to the character alphabet and map to ids; empty -> error."""
    tr = make_transcript(text)
    if len(tr) == 0:
        raise ConfigError(f"text {text!r} is empty after normalization")
    return TextIds(tr.ids)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None].astype(np.float64)
    i = np.arange(d // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


class TtsLm:
    """Pre-norm causal transformer regressing next-frame continuous tokens."""

    def __init__(self, cfg: LmConfig, rng: Rng):
        self.cfg = cfg
        d, f, dt = cfg.d_model, cfg.ffn_dim, cfg.token_dim
        r = rng.child("lm")
        self.params: dict[str, Tensor] = {
            "text_table": Tensor(r.child("table").normal((VOCAB_SIZE, d), std=0.1),
                                 requires_grad=True),
            "in.w": T.glorot(r.child("in"), (dt, d), dt, d),
            "in.b": Tensor(np.zeros(d), requires_grad=True),
            "out.w": T.glorot(r.child("out"), (d, dt), d, dt),
            "out.b": Tensor(np.zeros(dt), requires_grad=True),
            "stop.w": T.glorot(r.child("stop"), (d, 1), d, 1),
            "stop.b": Tensor(np.zeros(1), requires_grad=True),
            "ln_f.g": Tensor(np.ones(d), requires_grad=True),
            "ln_f.b": Tensor(np.zeros(d), requires_grad=True),
        }
        for i in range(cfg.layers):
            lr = r.child(f"layer{i}")
            for nm in ("q", "k", "v", "o"):
                self.params[f"l{i}.{nm}.w"] = T.glorot(lr.child(nm), (d, d), d, d)
                self.params[f"l{i}.{nm}.b"] = Tensor(np.zeros(d), requires_grad=True)
            self.params[f"l{i}.ffn1.w"] = T.glorot(lr.child("ffn1"), (d, f), d, f)
            self.params[f"l{i}.ffn1.b"] = Tensor(np.zeros(f), requires_grad=True)
            self.params[f"l{i}.ffn2.w"] = T.glorot(lr.child("ffn2"), (f, d), f, d)
            self.params[f"l{i}.ffn2.b"] = Tensor(np.zeros(d), requires_grad=True)
            for nm in ("ln1", "ln2"):
                self.params[f"l{i}.{nm}.g"] = Tensor(np.ones(d), requires_grad=True)
                self.params[f"l{i}.{nm}.b"] = Tensor(np.zeros(d), requires_grad=True)
        self._pos_cache = sinusoidal_positions(cfg.max_seq_len, cfg.d_model)

    def named_parameters(self) -> dict:
        return dict(self.params)

    # ----- building blocks --------------------------------------------------

    def _affine_ln(self, x: Tensor, g_name: str, b_name: str) -> Tensor:
        n = x.data.shape[0]
        y = T.layernorm_lastdim(x)
        y = T.mul(y, T.expand_rows(self.params[g_name], n))
        return T.add(y, T.expand_rows(self.params[b_name], n))

    def _linear(self, x: Tensor, w_name: str, b_name: str) -> Tensor:
        return T.add(T.matmul(x, self.params[w_name]),
                     T.expand_rows(self.params[b_name], x.data.shape[0]))

    def _attention(self, x: Tensor, layer: int, mask: Tensor) -> Tensor:
        cfg = self.cfg
        dh = cfg.d_model // cfg.heads
        q = self._linear(x, f"l{layer}.q.w", f"l{layer}.q.b")
        k = self._linear(x, f"l{layer}.k.w", f"l{layer}.k.b")
        v = self._linear(x, f"l{layer}.v.w", f"l{layer}.v.b")
        heads = []
        for h in range(cfg.heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose2d(kh)), 1.0 / np.sqrt(dh))
            attn = T.softmax_lastdim(T.add(scores, mask))
            heads.append(T.matmul(attn, vh))
        return self._linear(T.concat_cols(heads), f"l{layer}.o.w", f"l{layer}.o.b")

    def _backbone(self, seq: Tensor) -> Tensor:
        n = seq.data.shape[0]
        mask_data = np.triu(np.full((n, n), -np.inf), k=1)
        mask = T.constant(mask_data)
        h = seq
        for i in range(self.cfg.layers):
            h = T.add(h, self._attention(self._affine_ln(h, f"l{i}.ln1.g", f"l{i}.ln1.b"), i, mask))
            ff = self._affine_ln(h, f"l{i}.ln2.g", f"l{i}.ln2.b")
            ff = T.tanh(self._linear(ff, f"l{i}.ffn1.w", f"l{i}.ffn1.b"))
            h = T.add(h, self._linear(ff, f"l{i}.ffn2.w", f"l{i}.ffn2.b"))
        return self._affine_ln(h, "ln_f.g", "ln_f.b")

    def _embed_sequence(self, text_ids: np.ndarray, frames: Tensor | None) -> Tensor:
        n_text = text_ids.size
        n_frames = 0 if frames is None else frames.data.shape[0]
        total = n_text + n_frames
        if total > self.cfg.max_seq_len:
            raise ConfigError(f"sequence of {total} positions exceeds max_seq_len "
                              f"{self.cfg.max_seq_len}")
        text_part = T.embedding(self.params["text_table"], text_ids)
        if n_frames:
            speech_part = self._linear(frames, "in.w", "in.b")
            seq = T.concat_rows([text_part, speech_part])
        else:
            seq = text_part
        return T.add(seq, T.constant(self._pos_cache[:total]))

    def text_embed(self, ids: TextIds) -> Tensor:
        """Embedding-table rows plus sinusoidal positions for a text span."""
        return self._embed_sequence(ids.ids, None)

    # ----- contract surface --------------------------------------------------

    def forward(self, text_ids, frames: Tensor) -> tuple[Tensor, Tensor]:
        """Teacher-forced pass.

        Returns (predictions (T, D) for the T input frames, stop logits
        (T+1,) whose final entry marks the past-the-end position).
        """
        ids = text_ids.ids if isinstance(text_ids, TextIds) else np.asarray(text_ids, dtype=np.int64)
        if ids.size == 0:
            raise ConfigError("forward needs at least one text position")
        n_frames = frames.data.shape[0]
        h = self._backbone(self._embed_sequence(ids, frames if n_frames else None))
        span = T.slice_rows(h, ids.size - 1, ids.size + n_frames)  # predicts frames 0..T
        preds = self._linear(T.slice_rows(span, 0, n_frames), "out.w", "out.b") \
            if n_frames else T.constant(np.zeros((0, self.cfg.token_dim)))
        stops = T.reshape(self._linear(span, "stop.w", "stop.b"), (n_frames + 1,))
        return preds, stops

    def step(self, text_ids, frames: Tensor | None) -> tuple[np.ndarray, float]:
        """Next-frame prediction and its stop logit, given the prefix."""
        ids = text_ids.ids if isinstance(text_ids, TextIds) else np.asarray(text_ids, dtype=np.int64)
        n_frames = 0 if frames is None else frames.data.shape[0]
        h = self._backbone(self._embed_sequence(ids, frames))
        last = T.slice_rows(h, ids.size + n_frames - 1, ids.size + n_frames)
        pred = self._linear(last, "out.w", "out.b")
        stop = self._linear(last, "stop.w", "stop.b")
        return pred.data[0].copy(), float(stop.data[0, 0])

    def state_arrays(self, prefix: str = "lm") -> dict:
        return {f"{prefix}.{k}": v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict, prefix: str = "lm"):
        for k, p in self.params.items():
            p.data = np.array(arrays[f"{prefix}.{k}"])


def generate(lm: TtsLm, tokenizer: TokenizerModel, text: str,
             prompt_audio: dsp.AudioBuffer | None = None,
             max_frames: int = 600) -> TokenSequence:
    """Deterministic autoregressive generation of continuous speech tokens.

    Prompt audio, when given, is encoded and prefixed as context; the
    returned sequence contains only the newly generated frames. Generation
    halts when the stop head fires or at max_frames.
    """
    ids = text_tokenize(text)
    prefix = np.zeros((0, lm.cfg.token_dim))
    if prompt_audio is not None:
        prefix = tokenizer.encode(prompt_audio).tokens
    threshold_logit = float(np.log(lm.cfg.stop_threshold / (1.0 - lm.cfg.stop_threshold)))
    generated = []
    with T.no_grad():
        for i in range(max_frames):
            stacked = np.concatenate([prefix, np.array(generated).reshape(-1, lm.cfg.token_dim)])
            frames = T.constant(stacked) if stacked.shape[0] else None
            pred, stop_logit = lm.step(ids, frames)
            if not np.all(np.isfinite(pred)):
                raise DivergenceError(f"non-finite token prediction at frame {i}")
            if stop_logit > threshold_logit:
                break
            generated.append(pred)
    tokens = np.array(generated).reshape(-1, lm.cfg.token_dim)
    return TokenSequence(tokens, tokenizer.cfg.token_rate_hz, tokenizer.cfg.sample_rate)


def synthesize(lm: TtsLm, tokenizer: TokenizerModel, text: str,
               prompt_audio: dsp.AudioBuffer | None = None,
               max_frames: int = 600) -> dsp.AudioBuffer:
    """generate -> decode -> frequency-limiting low-pass at 0.95 Nyquist."""
    seq = generate(lm, tokenizer, text, prompt_audio, max_frames)
    wav = tokenizer.decode(seq)
    if wav.samples.size == 0:
        return wav
    return dsp.lowpass(wav, 0.95 * wav.nyquist, transition_hz=0.03 * wav.nyquist)
