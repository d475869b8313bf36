"""Training objectives: reconstruction similarity, CTC, LM regression, and
optimal-transport conditional flow matching with its ODE sampler.

CTC is a single tape op with an analytic gradient derived from the
log-space forward/backward recurrences; everything else is composed from
tape primitives so the gradient suite covers it end to end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .dsp import AudioBuffer
from .errors import ConfigError, DivergenceError, ShapeError
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

# character inventory shared by the CTC transcripts and the TTS front end
ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
BLANK_ID = 0
VOCAB_SIZE = len(ALPHABET) + 1  # ids 1..28 are characters, 0 is the CTC blank

_CHAR_TO_ID = {c: i + 1 for i, c in enumerate(ALPHABET)}
_ID_TO_CHAR = {i + 1: c for i, c in enumerate(ALPHABET)}


def normalize_text(text: str) -> tuple[str, int]:
    """Lowercase and drop unsupported characters; returns (text, n_dropped)."""
    lowered = text.lower()
    kept = [c for c in lowered if c in _CHAR_TO_ID]
    return "".join(kept), len(lowered) - len(kept)


@dataclass
class Transcript:
    """Character-id sequence over the fixed alphabet; never contains blank."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 1 or self.ids.max() >= VOCAB_SIZE):
            raise ConfigError(f"transcript ids must be in [1, {VOCAB_SIZE}), got {self.ids}")

    def text(self) -> str:
        return "".join(_ID_TO_CHAR[i] for i in self.ids)

    def __len__(self):
        return int(self.ids.size)


def make_transcript(text: str) -> Transcript:
    normalized, dropped = normalize_text(text)
    if dropped:
        log.warning("transcript dropped %d unsupported characters", dropped)
    return Transcript(np.array([_CHAR_TO_ID[c] for c in normalized], dtype=np.int64))


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def ctc_min_frames(label: Transcript) -> int:
    """Minimum frame count that can align the label (repeats need a blank)."""
    ids = label.ids
    repeats = int(np.sum(ids[1:] == ids[:-1])) if ids.size > 1 else 0
    return int(ids.size + repeats)


def _extended_label(ids: np.ndarray) -> np.ndarray:
    ext = np.full(2 * ids.size + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = ids
    return ext


def ctc_loss(logits: Tensor, label: Transcript) -> Tensor:
    """-log P(label | logits) via the log-space forward algorithm.

    ``logits`` is (T, V) and unnormalized; softmax happens inside. An
    unalignable label (T too short) yields an infinite, gradient-free loss
    and a logged warning so corpus bugs surface instead of vanishing.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"ctc_loss needs (T, V) logits, got shape {logits.data.shape}")
    t_len, vocab = logits.data.shape
    if label.ids.size and label.ids.max() >= vocab:
        raise ShapeError(f"label ids exceed vocab {vocab}")
    if t_len < ctc_min_frames(label) or (t_len == 0):
        log.warning("CTC label of %d symbols is unalignable in %d frames; loss is +inf",
                    len(label), t_len)
        return T.constant(np.inf)

    x = logits.data
    lp = x - _logsumexp(x, axis=1, keepdims=True)  # log-softmax
    ext = _extended_label(label.ids)
    s_len = ext.size

    neg_inf = -np.inf
    allow_skip = np.zeros(s_len, dtype=bool)
    allow_skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), neg_inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        prev = np.full(s_len, neg_inf)
        prev[1:] = alpha[t - 1, :-1]
        skip = np.full(s_len, neg_inf)
        if s_len > 2:
            skip[2:] = alpha[t - 1, :-2]
        skip = np.where(allow_skip, skip, neg_inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, prev), skip) + lp[t, ext]

    log_p = np.logaddexp(alpha[t_len - 1, s_len - 1],
                         alpha[t_len - 1, s_len - 2] if s_len > 1 else neg_inf)

    # backward variables for the analytic gradient
    beta = np.full((t_len, s_len), neg_inf)
    beta[t_len - 1, s_len - 1] = lp[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = lp[t_len - 1, ext[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        stay = beta[t + 1]
        nxt = np.full(s_len, neg_inf)
        nxt[:-1] = beta[t + 1, 1:]
        skip = np.full(s_len, neg_inf)
        if s_len > 2:
            skip[:-2] = np.where(allow_skip[2:], beta[t + 1, 2:], neg_inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, nxt), skip) + lp[t, ext]

    # d(-logP)/d logits = softmax - gamma, where gamma[t, v] sums the state
    # posteriors of extended positions labeled v
    with np.errstate(invalid="ignore"):
        occ = alpha + beta - lp[:, ext] - log_p
    gamma = np.zeros((t_len, vocab))
    for s in range(s_len):
        gamma[:, ext[s]] += np.exp(occ[:, s])
    grad = np.exp(lp) - gamma

    def bw(g):
        if logits.requires_grad:
            if logits.grad is None:
                logits.grad = np.zeros_like(logits.data)
            logits.grad += float(g) * grad

    return T._make(np.asarray(-log_p), (logits,), bw)


def _logsumexp(x, axis, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# reconstruction similarity
# ---------------------------------------------------------------------------

SIM_WINDOWS = (256, 512, 1024)


@lru_cache(maxsize=None)
def _windowed_dft(window_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed real-DFT matrices (window_len x bins) for the STFT loss."""
    n = np.arange(window_len)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / window_len)
    bins = window_len // 2 + 1
    k = np.arange(bins)
    angle = 2 * np.pi * np.outer(n, k) / window_len
    return w[:, None] * np.cos(angle), -(w[:, None] * np.sin(angle))


def _log_magnitude(x: Tensor, window_len: int, hop: int) -> Tensor:
    wr, wi = _windowed_dft(window_len)
    frames = T.frame_signal(x, window_len, hop)
    re = T.matmul(frames, T.constant(wr))
    im = T.matmul(frames, T.constant(wi))
    mag = T.sqrt(T.add_scalar(T.add(T.mul(re, re), T.mul(im, im)), 1e-12))
    return T.log(T.add_scalar(mag, 1e-5))


def _l1(a: Tensor, b: Tensor) -> Tensor:
    return T.tmean(T.absolute(T.sub(a, b)))


def _as_signal_tensor(x, name: str) -> Tensor:
    if isinstance(x, AudioBuffer):
        return T.constant(x.samples)
    if isinstance(x, Tensor):
        if x.data.ndim == 2 and x.data.shape[0] == 1:
            return T.reshape(x, (x.data.shape[1],))
        if x.data.ndim == 1:
            return x
        raise ShapeError(f"{name} must be 1-D (or (1, T)), got shape {x.data.shape}")
    return T.constant(np.asarray(x, dtype=np.float64).ravel())


def sim_loss(a, a_hat, alignment_tolerance: int = 256) -> Tensor:
    """Waveform similarity loss: time-domain L1 plus multi-resolution STFT
    log-magnitude L1 (windows 256/512/1024, hop = window/4), all terms
    weighted equally. Zero iff the signals match; lower is more similar.
    """
    if isinstance(a, AudioBuffer) and isinstance(a_hat, AudioBuffer) \
            and a.sample_rate != a_hat.sample_rate:
        raise ConfigError(f"sim_loss needs equal rates, got {a.sample_rate} and {a_hat.sample_rate}")
    xa = _as_signal_tensor(a, "a")
    xb = _as_signal_tensor(a_hat, "a_hat")
    na, nb = xa.data.size, xb.data.size
    if abs(na - nb) > alignment_tolerance:
        raise ShapeError(f"sim_loss: lengths {na} and {nb} differ beyond tolerance "
                         f"{alignment_tolerance}")
    n = min(na, nb)
    if na != n:
        xa = T.slice_rows(xa, 0, n)
    if nb != n:
        xb = T.slice_rows(xb, 0, n)
    total = _l1(xa, xb)
    for wl in SIM_WINDOWS:
        if n < wl:
            continue  # resolution unavailable on very short clips
        hop = wl // 4
        total = T.add(total, _l1(_log_magnitude(xa, wl, hop), _log_magnitude(xb, wl, hop)))
    return total


# ---------------------------------------------------------------------------
# ASR head
# ---------------------------------------------------------------------------

class AsrHead:
    """Two conv layers plus a per-frame linear map to character logits."""

    def __init__(self, in_dim: int, hidden: int, vocab: int, rng: Rng, kernel: int = 5):
        self.in_dim, self.hidden, self.vocab, self.kernel = in_dim, hidden, vocab, kernel
        pad = kernel // 2
        self.padding = pad
        self.params = {
            "c0.w": T.glorot(rng.child("c0"), (hidden, in_dim, kernel),
                             in_dim * kernel, hidden * kernel),
            "c0.b": Tensor(np.zeros(hidden), requires_grad=True),
            "c1.w": T.glorot(rng.child("c1"), (hidden, hidden, kernel),
                             hidden * kernel, hidden * kernel),
            "c1.b": Tensor(np.zeros(hidden), requires_grad=True),
            "out.w": T.glorot(rng.child("out"), (hidden, vocab), hidden, vocab),
            "out.b": Tensor(np.zeros(vocab), requires_grad=True),
        }

    def named_parameters(self) -> dict:
        return dict(self.params)

    def forward(self, feats: Tensor) -> Tensor:
        """(T, D) encoder features -> (T, V) character logits."""
        if feats.data.ndim != 2 or feats.data.shape[1] != self.in_dim:
            raise ShapeError(f"asr head expects (T, {self.in_dim}), got {feats.data.shape}")
        h = T.transpose2d(feats)
        for name in ("c0", "c1"):
            h = T.conv1d(h, self.params[f"{name}.w"], stride=1, padding=self.padding)
            h = T.tanh(T.add(h, T.expand_cols(self.params[f"{name}.b"], h.data.shape[1])))
        h = T.transpose2d(h)
        return T.add(T.matmul(h, self.params["out.w"]),
                     T.expand_rows(self.params["out.b"], h.data.shape[0]))

    def state_arrays(self, prefix: str = "asr") -> dict:
        return {f"{prefix}.{k}": v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict, prefix: str = "asr"):
        for k, p in self.params.items():
            p.data = np.array(arrays[f"{prefix}.{k}"])


def stage1_loss(a, a_hat: Tensor, label: Transcript, encode_fn, asr: AsrHead,
                commitment: Tensor | None = None) -> tuple[Tensor, dict]:
    """Pre-training objective: similarity + CTC on the re-encoded output,
    plus an optional codebook commitment term. Returns (total, components).
    """
    rec = sim_loss(a, a_hat)
    logits = asr.forward(encode_fn(a_hat))
    asr_term = ctc_loss(logits, label)
    parts = {"sim": rec.item(), "ctc": asr_term.item()}
    total = T.add(rec, asr_term) if np.isfinite(asr_term.data) else rec
    if not np.isfinite(asr_term.data):
        parts["ctc_unalignable"] = 1.0
    if commitment is not None:
        total = T.add(total, commitment)
        parts["commit"] = commitment.item()
    parts["total"] = total.item()
    return total, parts


def lm_loss(pred: Tensor, target_tokens: Tensor) -> Tensor:
    """Regression loss between LM output and encoded speech-label tokens.

    Both sides stay on the tape, so gradients reach the language model
    through the prediction and the tokenizer through the target.
    """
    if pred.data.shape != target_tokens.data.shape:
        raise ShapeError(
            f"lm_loss: prediction {pred.data.shape} and target {target_tokens.data.shape} differ")
    return T.mse(pred, target_tokens)


# ---------------------------------------------------------------------------
# optimal-transport conditional flow matching
# ---------------------------------------------------------------------------

@dataclass
class CfmConfig:
    sigma_min: float = 1e-4
    ode_steps: int = 32
    solver: str = "euler"

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ConfigError(f"sigma_min must be in [0, 1), got {self.sigma_min}")
        if self.ode_steps < 1:
            raise ConfigError(f"ode_steps must be >= 1, got {self.ode_steps}")
        if self.solver not in ("euler", "midpoint"):
            raise ConfigError(f"unknown ODE solver {self.solver!r}")


def cfm_sample_path(x0, x1, t: float, sigma_min: float = 1e-4):
    """Point and target field on the straight conditional path:
    x_t = (1 - (1 - sigma_min) t) x0 + t x1, u = x1 - (1 - sigma_min) x0.
    """
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"path time t must be in [0, 1], got {t}")
    a0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    a1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    if a0.shape != a1.shape:
        raise ShapeError(f"cfm_sample_path: shapes {a0.shape} and {a1.shape} differ")
    xt = (1.0 - (1.0 - sigma_min) * t) * a0 + t * a1
    u = a1 - (1.0 - sigma_min) * a0
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        return T.constant(xt), T.constant(u)
    return xt, u


class FieldNet:
    """Per-frame MLP vector field: input [x_t | t | cond] -> velocity."""

    def __init__(self, dim: int, cond_dim: int, hidden: int, rng: Rng):
        self.dim, self.cond_dim, self.hidden = dim, cond_dim, hidden
        in_dim = dim + 1 + cond_dim
        self.params = {
            "w0": T.glorot(rng.child("w0"), (in_dim, hidden), in_dim, hidden),
            "b0": Tensor(np.zeros(hidden), requires_grad=True),
            "w1": T.glorot(rng.child("w1"), (hidden, hidden), hidden, hidden),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": T.glorot(rng.child("w2"), (hidden, dim), hidden, dim),
            "b2": Tensor(np.zeros(dim), requires_grad=True),
        }

    def named_parameters(self) -> dict:
        return dict(self.params)

    def forward(self, x_t: Tensor, t: float, cond: Tensor | None) -> Tensor:
        rows = x_t.data.shape[0]
        pieces = [x_t, T.constant(np.full((rows, 1), float(t)))]
        if self.cond_dim:
            if cond is None or cond.data.shape != (rows, self.cond_dim):
                raise ShapeError(f"field net expects cond (T, {self.cond_dim})")
            pieces.append(cond)
        h = T.concat_cols(pieces)
        h = T.tanh(T.add(T.matmul(h, self.params["w0"]),
                         T.expand_rows(self.params["b0"], rows)))
        h = T.tanh(T.add(T.matmul(h, self.params["w1"]),
                         T.expand_rows(self.params["b1"], rows)))
        return T.add(T.matmul(h, self.params["w2"]),
                     T.expand_rows(self.params["b2"], rows))

    def state_arrays(self, prefix: str = "field") -> dict:
        return {f"{prefix}.{k}": v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict, prefix: str = "field"):
        for k, p in self.params.items():
            p.data = np.array(arrays[f"{prefix}.{k}"])


def cfm_loss(field_net, x1_batch, cond_batch, rng: Rng, sigma_min: float = 1e-4) -> Tensor:
    """Single-sample Monte Carlo flow-matching loss, averaged over a batch.

    For each target x1: draw t ~ U[0,1] and x0 ~ N(0, I), form the path
    point, and regress the predicted field onto the target field.
    """
    if isinstance(x1_batch, np.ndarray) and x1_batch.ndim == 2:
        x1_batch = [x1_batch]
    if cond_batch is None:
        cond_batch = [None] * len(x1_batch)
    total = None
    for x1, cond in zip(x1_batch, cond_batch):
        x1 = np.asarray(x1, dtype=np.float64)
        t = float(rng.uniform())
        x0 = rng.normal(x1.shape)
        xt, u = cfm_sample_path(x0, x1, t, sigma_min)
        cond_t = None if cond is None else T.constant(cond)
        pred = field_net.forward(T.constant(xt), t, cond_t)
        term = T.mse(pred, T.constant(u))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(x1_batch))


def cfm_generate(field_net, cond, shape, cfg: CfmConfig, rng: Rng) -> Tensor:
    """Integrate dx/dt = field(x, t, cond) from noise at t=0 to t=1."""
    x = rng.normal(shape)
    cond_t = None if cond is None else T.constant(np.asarray(cond, dtype=np.float64))
    h = 1.0 / cfg.ode_steps
    with T.no_grad():
        for step in range(cfg.ode_steps):
            t = step * h
            v = field_net.forward(T.constant(x), t, cond_t).data
            if cfg.solver == "midpoint":
                mid = x + 0.5 * h * v
                v = field_net.forward(T.constant(mid), t + 0.5 * h, cond_t).data
            x = x + h * v
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"ODE state became non-finite at step {step + 1}"
                                      f"/{cfg.ode_steps}")
    return T.constant(x)
