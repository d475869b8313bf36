"""Finite-difference gradient verification.

The oracle only ever evaluates forward passes: each parameter element is
perturbed by +-h and the loss re-evaluated, so agreement with the tape's
analytic gradients is an independent check, not a tautology.

``run_suite`` covers every differentiable primitive plus the composite
models (tokenizer, ASR head, language model, flow field network) and is
what the ``gradcheck`` CLI subcommand executes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def finite_diff_grad(loss_fn, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar loss w.r.t. each parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                up = loss_fn().item()
            flat[i] = orig - h
            with T.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(loss_fn, params, h: float = 1e-5, tol: float = 1e-4) -> tuple[bool, float]:
    """Compare tape gradients against central differences; returns (ok, worst)."""
    T.reset_tape()
    T.zero_grad(params)
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_diff_grad(loss_fn, params, h=h)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    return worst < tol, worst


@dataclass
class CheckResult:
    name: str
    max_err: float
    ok: bool


def _p(rng, *shape):
    return Tensor(rng.normal(shape, std=0.6), requires_grad=True)


def _primitive_cases(rng):
    a = _p(rng, 3, 4)
    b = _p(rng, 4, 2)
    yield "matmul", lambda: T.tsum(T.tanh(T.matmul(a, b))), [a, b]

    x = _p(rng, 2, 16)
    w = _p(rng, 3, 2, 4)
    yield "conv1d", lambda: T.tsum(T.tanh(T.conv1d(x, w, stride=2, padding=1))), [x, w]

    xt = _p(rng, 3, 5)
    wt = _p(rng, 3, 2, 4)
    yield "transposed_conv1d", lambda: T.tsum(T.tanh(T.transposed_conv1d(xt, wt, stride=2, padding=1))), [xt, wt]

    u = _p(rng, 4, 3)
    v = _p(rng, 4, 3)
    yield "add", lambda: T.tsum(T.mul(T.add(u, v), v)), [u, v]
    yield "mul", lambda: T.tsum(T.mul(u, v)), [u, v]
    yield "sub", lambda: T.tsum(T.tanh(T.sub(u, v))), [u, v]
    yield "tanh", lambda: T.tsum(T.tanh(u)), [u]
    yield "relu", lambda: T.tsum(T.mul(T.relu(u), v)), [u, v]
    yield "exp", lambda: T.tsum(T.exp(u)), [u]

    pos = Tensor(np.abs(rng.normal((4, 3), std=0.5)) + 0.5, requires_grad=True)
    yield "log", lambda: T.tsum(T.log(pos)), [pos]
    yield "sqrt", lambda: T.tsum(T.sqrt(pos)), [pos]
    yield "absolute", lambda: T.tsum(T.absolute(u)), [u]
    yield "softmax_lastdim", lambda: T.tsum(T.mul(T.softmax_lastdim(u), v)), [u]
    yield "layernorm_lastdim", lambda: T.tsum(T.mul(T.layernorm_lastdim(u), v)), [u]
    yield "mean", lambda: T.tmean(T.mul(u, u)), [u]
    yield "mse", lambda: T.mse(u, v), [u, v]

    logits = _p(rng, 6)
    labels = T.constant((rng.uniform(0, 1, (6,)) > 0.5).astype(float))
    yield "bce_logits", lambda: T.bce_logits(logits, labels), [logits]

    m = _p(rng, 3, 4)
    mt_w = T.constant(rng.normal((4, 3)))
    yield "reshape", lambda: T.tsum(T.tanh(T.reshape(m, (4, 3)))), [m]
    yield "transpose2d", lambda: T.tsum(T.mul(T.transpose2d(m), mt_w)), [m]
    yield "slice_rows", lambda: T.tsum(T.tanh(T.slice_rows(m, 1, 3))), [m]
    yield "slice_cols", lambda: T.tsum(T.tanh(T.slice_cols(m, 0, 2))), [m]

    c1, c2 = _p(rng, 2, 3), _p(rng, 4, 3)
    yield "concat_rows", lambda: T.tsum(T.tanh(T.concat_rows([c1, c2]))), [c1, c2]
    d1, d2 = _p(rng, 3, 2), _p(rng, 3, 4)
    yield "concat_cols", lambda: T.tsum(T.tanh(T.concat_cols([d1, d2]))), [d1, d2]

    vec = _p(rng, 4)
    er_w = T.constant(rng.normal((3, 4)))
    ec_w = T.constant(rng.normal((4, 3)))
    yield "expand_rows", lambda: T.tsum(T.mul(T.expand_rows(vec, 3), er_w)), [vec]
    yield "expand_cols", lambda: T.tsum(T.mul(T.expand_cols(vec, 3), ec_w)), [vec]

    table = _p(rng, 5, 3)
    ids = np.array([0, 2, 2, 4])
    yield "embedding", lambda: T.tsum(T.tanh(T.embedding(table, ids))), [table]

    sig = _p(rng, 20)
    yield "frame_signal", lambda: T.tsum(T.tanh(T.frame_signal(sig, 8, 4))), [sig]

    # one tensor consumed twice: gradients must sum
    z = _p(rng, 3, 3)
    yield "reuse_accumulation", lambda: T.add(T.tsum(T.mul(z, z)), T.tsum(T.tanh(z))), [z]


def _composite_cases(rng):
    from .dsp import AudioBuffer
    from .objectives import AsrHead, FieldNet, ctc_loss, make_transcript
    from .tokenizer import EncoderConfig, TokenizerModel
    from .tts import LmConfig, TtsLm, text_tokenize

    cfg = EncoderConfig(sample_rate=800, strides=(2, 2), channels=(3, 4),
                        token_dim=3)
    model = TokenizerModel(cfg, rng.child("tok"))
    x = T.constant(rng.normal((1, 32), std=0.4))

    def tok_loss():
        tokens = model.encode_tensor(x)
        wav = model.decode_tensor(tokens)
        return T.mse(T.slice_cols(wav, 0, 32), x)

    params = list(model.named_parameters().values())
    yield "tokenizer_roundtrip", tok_loss, params

    asr = AsrHead(in_dim=3, hidden=4, vocab=5, rng=rng.child("asr"))
    feats = T.constant(rng.normal((9, 3), std=0.5))

    def asr_loss():
        return T.tsum(T.tanh(asr.forward(feats)))

    yield "asr_head", asr_loss, list(asr.named_parameters().values())

    head2 = AsrHead(in_dim=3, hidden=4, vocab=4, rng=rng.child("asr2"))

    def ctc_grad_loss():
        return ctc_loss(head2.forward(feats), make_transcript("ab"))

    yield "ctc_loss", ctc_grad_loss, list(head2.named_parameters().values())

    lm_cfg = LmConfig(layers=2, heads=2, d_model=8, ffn_dim=16, max_seq_len=32,
                      token_dim=3)
    lm = TtsLm(lm_cfg, rng.child("lm"))
    ids = text_tokenize("ab").ids
    frames = T.constant(rng.normal((4, 3), std=0.5))
    targets = T.constant(rng.normal((4, 3), std=0.5))

    def lm_loss():
        preds, stops = lm.forward(ids, frames)
        return T.add(T.mse(preds, targets), T.tmean(T.mul(stops, stops)))

    yield "tts_lm", lm_loss, list(lm.named_parameters().values())

    field = FieldNet(dim=3, cond_dim=2, hidden=6, rng=rng.child("field"))
    xt = T.constant(rng.normal((4, 3)))
    cond = T.constant(rng.normal((4, 2)))
    u = T.constant(rng.normal((4, 3)))

    def field_loss():
        return T.mse(field.forward(xt, 0.3, cond), u)

    yield "field_net", field_loss, list(field.named_parameters().values())


def _straight_through_identity(rng) -> CheckResult:
    """Not an FD check (the estimator is intentionally biased): verify the
    upstream gradient is copied to the input exactly.

    With loss = sum(st(z, vals) * z), z receives vals from the product rule
    plus z (the upstream gradient of the straight-through branch).
    """
    z = _p(rng, 3, 2)
    vals = rng.normal((3, 2))
    T.reset_tape()
    T.tsum(T.mul(T.straight_through(z, vals), z)).backward()
    err = float(np.max(np.abs(z.grad - (vals + z.data))))
    return CheckResult("straight_through_identity", err, err == 0.0)


def run_suite(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """Gradcheck every primitive and composite; returns one result per case."""
    rng = T.Rng(seed).child("gradcheck")
    results = []
    for name, loss_fn, params in _primitive_cases(rng.child("prims")):
        ok, err = gradcheck(loss_fn, params, tol=tol)
        results.append(CheckResult(name, err, ok))
    results.append(_straight_through_identity(rng.child("st")))
    for name, loss_fn, params in _composite_cases(rng.child("composites")):
        ok, err = gradcheck(loss_fn, params, tol=tol)
        results.append(CheckResult(name, err, ok))
    return results
