"""Speech tokenizers: shared conv encoder/decoder with either a continuous
embedding head or a residual vector-quantization bottleneck.

Both modes share identical encoder/decoder parameter shapes so that
capacity-matched comparisons are fair; the discrete mode adds codebooks
trained by exponential-moving-average updates with a straight-through
gradient estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dsp import AudioBuffer
from .errors import ConfigError, InputTooShortError
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    """Architecture of the conv encoder (decoder mirrors it)."""

    sample_rate: int = 24000
    strides: tuple = (2, 4, 5, 4)
    channels: tuple = (16, 24, 32, 48)
    kernel_sizes: tuple | None = None  # default: 2 * stride per layer
    token_dim: int = 64

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if self.kernel_sizes is None:
            self.kernel_sizes = tuple(2 * s for s in self.strides)
        else:
            self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if len(self.channels) != len(self.strides) or len(self.kernel_sizes) != len(self.strides):
            raise ConfigError("strides, channels, and kernel_sizes must have equal length")
        if self.token_dim <= 0:
            raise ConfigError(f"token_dim must be positive, got {self.token_dim}")
        if any(k < s for k, s in zip(self.kernel_sizes, self.strides)):
            raise ConfigError("kernel sizes must be >= strides")

    @property
    def downsample_factor(self) -> int:
        return int(np.prod(self.strides))

    @property
    def token_rate_hz(self) -> float:
        return self.sample_rate / self.downsample_factor

    @property
    def paddings(self) -> tuple:
        return tuple((k - s) // 2 for k, s in zip(self.kernel_sizes, self.strides))


@dataclass
class CodebookConfig:
    num_stages: int = 8
    size: int = 256
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    commitment_weight: float = 0.25

    def __post_init__(self):
        if self.num_stages < 1 or self.size < 2:
            raise ConfigError("codebooks need num_stages >= 1 and size >= 2")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")


@dataclass
class TokenSequence:
    """T x D continuous token matrix at a fixed token rate."""

    tokens: np.ndarray
    token_rate_hz: float
    source_sample_rate: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ConfigError(f"tokens must be T x D, got shape {self.tokens.shape}")
        if self.tokens.size and not np.all(np.isfinite(self.tokens)):
            raise ConfigError("tokens must be finite")


class Codebooks:
    """RVQ codebook stack with EMA statistics.

    The last entry of every stage is a reserved all-zero vector that is
    never moved by EMA updates or reseeding. Because the nearest-neighbor
    search can always fall back to it, per-frame residual energy is
    guaranteed non-increasing across stages.
    """

    def __init__(self, cfg: CodebookConfig, dim: int, rng: Rng, init_scale: float = 0.3):
        self.cfg = cfg
        self.dim = dim
        nq, k = cfg.num_stages, cfg.size
        self.entries = rng.normal((nq, k, dim), std=init_scale)
        self.entries[:, k - 1, :] = 0.0
        self.ema_counts = np.zeros((nq, k))
        self.ema_sums = np.zeros((nq, k, dim))
        self.epoch_usage = np.zeros((nq, k), dtype=np.int64)

    @property
    def num_stages(self) -> int:
        return self.entries.shape[0]

    @property
    def size(self) -> int:
        return self.entries.shape[1]

    @property
    def reserved_index(self) -> int:
        return self.size - 1

    def usage_fraction(self) -> float:
        """Fraction of non-reserved entries hit since the last reseed."""
        live = self.epoch_usage[:, :self.reserved_index]
        return float((live > 0).mean()) if live.size else 0.0

    def state_arrays(self, prefix: str = "cb") -> dict:
        return {
            f"{prefix}.entries": self.entries,
            f"{prefix}.ema_counts": self.ema_counts,
            f"{prefix}.ema_sums": self.ema_sums,
            f"{prefix}.epoch_usage": self.epoch_usage.astype(np.float64),
        }

    def load_state_arrays(self, arrays: dict, prefix: str = "cb"):
        self.entries = np.array(arrays[f"{prefix}.entries"])
        self.ema_counts = np.array(arrays[f"{prefix}.ema_counts"])
        self.ema_sums = np.array(arrays[f"{prefix}.ema_sums"])
        self.epoch_usage = np.array(arrays[f"{prefix}.epoch_usage"]).astype(np.int64)


@dataclass
class QuantizedSequence:
    """T x Nq codebook indices plus the codebooks that produced them."""

    indices: np.ndarray
    codebooks: Codebooks

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        k = self.codebooks.size
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= k):
            raise ConfigError(f"quantized indices out of range [0, {k})")


def rvq_quantize_array(z: np.ndarray, cb: Codebooks):
    """Pure-array residual VQ: returns (indices, reconstruction, energies).

    ``energies[i]`` is the mean squared residual norm after stage i.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cb.dim:
        raise ConfigError(f"rvq: token dim {z.shape} does not match codebook dim {cb.dim}")
    t = z.shape[0]
    residual = z.copy()
    zq = np.zeros_like(z)
    indices = np.zeros((t, cb.num_stages), dtype=np.int64)
    energies = []
    for stage in range(cb.num_stages):
        entries = cb.entries[stage]
        d = (np.sum(residual ** 2, axis=1, keepdims=True)
             - 2.0 * residual @ entries.T
             + np.sum(entries ** 2, axis=1)[None, :])
        idx = np.argmin(d, axis=1)
        chosen = entries[idx]
        residual = residual - chosen
        zq += chosen
        indices[:, stage] = idx
        energies.append(float(np.mean(np.sum(residual ** 2, axis=1))) if t else 0.0)
    return indices, zq, energies


def rvq_quantize(z, cb: Codebooks):
    """Residual VQ with a straight-through gradient when z is a Tensor.

    Returns (QuantizedSequence, quantized tokens, per-stage residual
    energies). For a Tensor input the quantized tokens are a tensor whose
    backward pass copies the gradient to z unchanged.
    """
    if isinstance(z, Tensor):
        indices, zq, energies = rvq_quantize_array(z.data, cb)
        out = T.straight_through(z, zq)
    elif isinstance(z, TokenSequence):
        indices, zq, energies = rvq_quantize_array(z.tokens, cb)
        out = TokenSequence(zq, z.token_rate_hz, z.source_sample_rate)
    else:
        indices, zq, energies = rvq_quantize_array(np.asarray(z), cb)
        out = zq
    return QuantizedSequence(indices, cb), out, energies


def rvq_update_ema(cb: Codebooks, z: np.ndarray, indices: np.ndarray,
                   decay: float | None = None, eps: float | None = None):
    """EMA cluster-mean codebook update from the latest quantize call.

    Stage residual inputs are recomputed from (z, indices); the reserved
    zero entry is excluded. No assignments -> no change.
    """
    z = np.asarray(z, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    if z.shape[0] == 0:
        return
    decay = cb.cfg.ema_decay if decay is None else decay
    eps = cb.cfg.ema_eps if eps is None else eps
    k, reserved = cb.size, cb.reserved_index
    # snapshot the per-stage residual inputs against the entries the
    # quantizer actually used, before any stage's update moves them
    residual_inputs = []
    residual = z.copy()
    for stage in range(cb.num_stages):
        residual_inputs.append(residual)
        residual = residual - cb.entries[stage][indices[:, stage]]
    for stage in range(cb.num_stages):
        idx = indices[:, stage]
        counts = np.bincount(idx, minlength=k).astype(np.float64)
        sums = np.zeros((k, cb.dim))
        np.add.at(sums, idx, residual_inputs[stage])
        cb.epoch_usage[stage] += np.bincount(idx, minlength=k)
        cb.ema_counts[stage] = decay * cb.ema_counts[stage] + (1 - decay) * counts
        cb.ema_sums[stage] = decay * cb.ema_sums[stage] + (1 - decay) * sums
        n = cb.ema_counts[stage].sum()
        smoothed = (cb.ema_counts[stage] + eps) / (n + k * eps) * max(n, 1e-12)
        live = cb.ema_counts[stage] > 0
        live[reserved] = False
        cb.entries[stage][live] = cb.ema_sums[stage][live] / smoothed[live, None]


def rvq_reseed_dead(cb: Codebooks, z: np.ndarray, rng: Rng, min_usage: int = 1) -> int:
    """Reseed entries whose epoch usage fell below min_usage from encoder
    outputs (stage-appropriate residuals); resets the usage counters."""
    z = np.asarray(z, dtype=np.float64)
    reseeded = 0
    if z.shape[0]:
        indices, _, _ = rvq_quantize_array(z, cb)
        residual = z.copy()
        for stage in range(cb.num_stages):
            dead = np.flatnonzero(cb.epoch_usage[stage] < min_usage)
            dead = dead[dead != cb.reserved_index]
            for k in dead:
                row = int(rng.integers(0, z.shape[0]))
                cb.entries[stage][k] = residual[row]
                cb.ema_counts[stage][k] = 1.0
                cb.ema_sums[stage][k] = residual[row]
                reseeded += 1
            residual = residual - cb.entries[stage][indices[:, stage]]
    cb.epoch_usage[:] = 0
    return reseeded


class TokenizerModel:
    """Conv encoder + linear token head, mirrored transposed-conv decoder.

    ``mode`` selects the bottleneck: "continuous" passes tokens straight
    through, "discrete" quantizes them with the codebook stack. Encoded
    tokens are divided by ``token_scale`` (a corpus RMS statistic fixed
    after pre-training) so the language model always sees unit-scale
    targets; decode multiplies it back.
    """

    def __init__(self, cfg: EncoderConfig, rng: Rng, mode: str = "continuous",
                 codebook_cfg: CodebookConfig | None = None):
        if mode not in ("continuous", "discrete"):
            raise ConfigError(f"unknown tokenizer mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.token_scale = 1.0
        self.params: dict[str, Tensor] = {}
        self._init_params(rng.child("weights"))
        self.codebooks = None
        if mode == "discrete":
            ccfg = codebook_cfg or CodebookConfig()
            self.codebooks = Codebooks(ccfg, cfg.token_dim, rng.child("codebooks"))

    def _init_params(self, rng: Rng):
        cfg = self.cfg
        chans = (1,) + cfg.channels
        for i, (k, _s) in enumerate(zip(cfg.kernel_sizes, cfg.strides)):
            c_in, c_out = chans[i], chans[i + 1]
            self.params[f"enc{i}.w"] = T.glorot(rng.child(f"enc{i}"), (c_out, c_in, k),
                                                fan_in=c_in * k, fan_out=c_out * k)
            self.params[f"enc{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            self.params[f"dec{i}.w"] = T.glorot(rng.child(f"dec{i}"), (c_out, c_in, k),
                                                fan_in=c_out * k, fan_out=c_in * k)
            self.params[f"dec{i}.b"] = Tensor(np.zeros(c_in), requires_grad=True)
        c_top = cfg.channels[-1]
        d = cfg.token_dim
        self.params["head.w"] = T.glorot(rng.child("head"), (c_top, d), c_top, d)
        self.params["head.b"] = Tensor(np.zeros(d), requires_grad=True)
        self.params["dec_in.w"] = T.glorot(rng.child("dec_in"), (d, c_top), d, c_top)
        self.params["dec_in.b"] = Tensor(np.zeros(c_top), requires_grad=True)

    # ----- parameter bookkeeping -------------------------------------------

    def named_parameters(self) -> dict:
        return dict(self.params)

    def encoder_parameters(self) -> dict:
        return {k: v for k, v in self.params.items()
                if k.startswith("enc") or k.startswith("head")}

    def decoder_parameters(self) -> dict:
        return {k: v for k, v in self.params.items()
                if k.startswith("dec")}

    def set_token_scale(self, scale: float):
        scale = float(scale)
        if scale <= 0:
            raise ConfigError(f"token scale must be positive, got {scale}")
        if self.codebooks is not None:
            factor = self.token_scale / scale
            self.codebooks.entries *= factor
            self.codebooks.ema_sums *= factor
        self.token_scale = scale

    # ----- differentiable paths --------------------------------------------

    def min_input_samples(self) -> int:
        n = 1
        for k, s, p in zip(reversed(self.cfg.kernel_sizes), reversed(self.cfg.strides),
                           reversed(self.cfg.paddings)):
            n = (n - 1) * s + k - 2 * p
        return max(n, 1)

    def encode_tensor(self, x: Tensor) -> Tensor:
        """(1, T) waveform tensor -> (T', D) normalized token tensor."""
        if x.data.ndim != 2 or x.data.shape[0] != 1:
            raise ConfigError(f"encoder input must be (1, T), got shape {x.data.shape}")
        t_in = x.data.shape[1]
        h = x
        for i, (k, s, p) in enumerate(zip(self.cfg.kernel_sizes, self.cfg.strides,
                                          self.cfg.paddings)):
            if h.data.shape[1] + 2 * p < k:
                raise InputTooShortError(
                    f"input of {t_in} samples is shorter than the encoder's receptive field "
                    f"({self.min_input_samples()} samples)")
            h = T.conv1d(h, self.params[f"enc{i}.w"], stride=s, padding=p)
            h = T.tanh(T.add(h, T.expand_cols(self.params[f"enc{i}.b"], h.data.shape[1])))
        feats = T.transpose2d(h)
        tok = T.add(T.matmul(feats, self.params["head.w"]),
                    T.expand_rows(self.params["head.b"], feats.data.shape[0]))
        if self.token_scale != 1.0:
            tok = T.scale(tok, 1.0 / self.token_scale)
        return tok

    def decode_tensor(self, tok: Tensor) -> Tensor:
        """(T', D) normalized token tensor -> (1, T) waveform tensor."""
        if tok.data.ndim != 2 or tok.data.shape[1] != self.cfg.token_dim:
            raise ConfigError(
                f"decoder input must be (T, {self.cfg.token_dim}), got shape {tok.data.shape}")
        if self.token_scale != 1.0:
            tok = T.scale(tok, self.token_scale)
        h = T.add(T.matmul(tok, self.params["dec_in.w"]),
                  T.expand_rows(self.params["dec_in.b"], tok.data.shape[0]))
        h = T.tanh(h)
        h = T.transpose2d(h)
        n_layers = len(self.cfg.strides)
        for j in range(n_layers - 1, -1, -1):
            s, k, p = self.cfg.strides[j], self.cfg.kernel_sizes[j], self.cfg.paddings[j]
            h = T.transposed_conv1d(h, self.params[f"dec{j}.w"], stride=s, padding=p)
            h = T.add(h, T.expand_cols(self.params[f"dec{j}.b"], h.data.shape[1]))
            if j > 0:
                h = T.tanh(h)
        return h

    # ----- public (non-recording) entry points -----------------------------

    def encode(self, buf: AudioBuffer) -> TokenSequence:
        """Continuous encode of a resampled buffer; deterministic."""
        if buf.sample_rate != self.cfg.sample_rate:
            raise ConfigError(
                f"buffer rate {buf.sample_rate} != model rate {self.cfg.sample_rate}; "
                "resample first")
        with T.no_grad():
            tok = self.encode_tensor(T.constant(buf.samples[None, :]))
        return TokenSequence(tok.data, self.cfg.token_rate_hz, self.cfg.sample_rate)

    def decode(self, tokens) -> AudioBuffer:
        arr = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens)
        if arr.shape[0] == 0:
            return AudioBuffer(np.zeros(0), self.cfg.sample_rate)
        with T.no_grad():
            wav = self.decode_tensor(T.constant(arr))
        return AudioBuffer(wav.data[0], self.cfg.sample_rate)

    def roundtrip(self, buf: AudioBuffer, mode: str | None = None) -> AudioBuffer:
        """encode -> (RVQ if discrete) -> decode, trimmed to the input length."""
        mode = mode or self.mode
        seq = self.encode(buf)
        if mode == "discrete":
            if self.codebooks is None:
                raise ConfigError("model has no codebooks; build it with mode='discrete'")
            _, seq, _ = rvq_quantize(seq, self.codebooks)
        out = self.decode(seq)
        n = min(out.samples.size, buf.samples.size)
        return AudioBuffer(out.samples[:n], out.sample_rate)

    # ----- checkpoint arrays ------------------------------------------------

    def state_arrays(self, prefix: str = "tok") -> dict:
        out = {f"{prefix}.{k}": v.data for k, v in self.params.items()}
        out[f"{prefix}.token_scale"] = np.asarray(self.token_scale)
        if self.codebooks is not None:
            out.update(self.codebooks.state_arrays(prefix=f"{prefix}.cb"))
        return out

    def load_state_arrays(self, arrays: dict, prefix: str = "tok"):
        for k, p in self.params.items():
            p.data = np.array(arrays[f"{prefix}.{k}"])
        self.token_scale = float(arrays[f"{prefix}.token_scale"])
        if self.codebooks is not None:
            self.codebooks.load_state_arrays(arrays, prefix=f"{prefix}.cb")
