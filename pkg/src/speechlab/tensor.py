"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic, define-by-run tape records every differentiable operation in
execution order (which is automatically a topological order). ``backward``
walks the recorded nodes in exact reverse order, accumulating gradients
into every reachable tensor created with ``requires_grad=True``. Gradients
sum when a tensor is consumed by several operations.

Conventions kept deliberately strict:

* all data is float64, row-major;
* no implicit broadcasting — shapes must match exactly, and row/column
  broadcasts are spelled out with :func:`expand_rows` / :func:`expand_cols`;
* one tape per thread; a tape is consumed by ``backward`` and a fresh
  forward pass starts a new generation.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager

import numpy as np

from .errors import GradMissingError, NonFiniteError, ShapeError, TapeError

__all__ = [
    "Tensor", "Tape", "Rng", "no_grad", "backward", "reset_tape",
    "constant", "matmul", "conv1d", "transposed_conv1d", "add", "sub", "mul",
    "neg", "scale", "add_scalar", "tanh", "relu", "exp", "log", "sqrt",
    "absolute", "softmax_lastdim", "layernorm_lastdim", "tsum", "tmean",
    "mse", "bce_logits", "reshape", "transpose2d", "slice_rows", "slice_cols",
    "concat_rows", "concat_cols", "expand_rows", "expand_cols", "embedding",
    "frame_signal", "straight_through", "sgd_step", "init_adam_state",
    "adam_step", "Adam", "glorot", "zero_grad",
]


class Tensor:
    """Dense float64 array with an optional slot on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d stays 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; same-shape only, floats go through scale/add_scalar
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not supported; use scale")

    def __neg__(self):
        return neg(self)


def constant(data) -> Tensor:
    """Tensor that never requires a gradient."""
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "generation")

    def __init__(self, out, inputs, backward_fn, generation):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.generation = generation


class Tape:
    """Ordered operation record; execution order is the topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def clear(self):
        self.nodes.clear()
        self.generation += 1


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    """Disable tape recording; outputs inside are plain constants."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def reset_tape():
    _tape().clear()


def _make(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _tape()
        node = _Node(out, inputs, backward_fn, tape.generation)
        tape.nodes.append(node)
        out._node = node
    return out


def _acc(t: Tensor, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Populate leaf gradients by walking the tape in reverse recorded order.

    The tape is consumed: calling backward again without rebuilding the
    forward pass raises :class:`TapeError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = _tape()
    node = loss._node
    if node is None:
        raise TapeError("loss is not connected to the active tape (constant or detached?)")
    if node.generation != tape.generation or not tape.nodes:
        raise TapeError("tape already consumed; rebuild the forward pass before calling backward again")
    loss.grad = np.ones_like(loss.data)
    for n in reversed(tape.nodes):
        if n.out.grad is None:
            continue
        n.backward_fn(n.out.grad)
    tape.clear()


def zero_grad(params):
    for p in params:
        p.grad = None


def _need(t: Tensor) -> bool:
    return t.requires_grad


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        if _need(a):
            _acc(a, g)
        if _need(b):
            _acc(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        if _need(a):
            _acc(a, g)
        if _need(b):
            _acc(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        if _need(a):
            _acc(a, g * b.data)
        if _need(b):
            _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        if _need(a):
            _acc(a, g * c)

    return _make(a.data * c, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        if _need(a):
            _acc(a, g)

    return _make(a.data + c, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        if _need(a):
            _acc(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if _need(a):
            _acc(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("exp: overflow produced non-finite values")

    def bw(g):
        if _need(a):
            _acc(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log: domain violation (non-positive input)")
    x = a.data

    def bw(g):
        if _need(a):
            _acc(a, g / x)

    return _make(np.log(x), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NonFiniteError("sqrt: domain violation (negative input)")
    out_data = np.sqrt(a.data)

    def bw(g):
        if _need(a):
            _acc(a, g * 0.5 / np.maximum(out_data, 1e-300))

    return _make(out_data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)

    def bw(g):
        if _need(a):
            _acc(a, g * sgn)

    return _make(np.abs(a.data), (a,), bw)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis with log-sum-exp stabilization.

    -inf entries (attention masks) are legal and map to exactly zero.
    """
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e / np.sum(e, axis=-1, keepdims=True)
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("softmax_lastdim: produced non-finite values (fully masked row?)")

    def bw(g):
        if _need(a):
            inner = np.sum(g * s, axis=-1, keepdims=True)
            _acc(a, s * (g - inner))

    return _make(s, (a,), bw)


def layernorm_lastdim(a: Tensor, eps: float = 1e-5) -> Tensor:
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bw(g):
        if _need(a):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _acc(a, inv * (g - gm - y * gy))

    return _make(y, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        if _need(a):
            _acc(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        if _need(a):
            _acc(a, np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size

    def bw(g):
        k = (2.0 * float(g) / n) * d
        if _need(a):
            _acc(a, k)
        if _need(b):
            _acc(b, -k)

    return _make(np.asarray((d * d).mean()), (a, b), bw)


def bce_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    _same_shape(logits, labels, "bce_logits")
    x, z = logits.data, labels.data
    val = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    sig = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        if _need(logits):
            _acc(logits, (float(g) / n) * (sig - z))
        if _need(labels):
            _acc(labels, (float(g) / n) * (-x))

    return _make(np.asarray(val.mean()), (logits, labels), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        if _need(a):
            _acc(a, g.reshape(old))

    return _make(a.data.reshape(shape).copy(), (a,), bw)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-D tensor, got shape {a.data.shape}")

    def bw(g):
        if _need(a):
            _acc(a, g.T)

    return _make(a.data.T.copy(), (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim < 1 or stop > a.data.shape[0] or start < 0:
        raise ShapeError(f"slice_rows[{start}:{stop}] out of range for shape {a.data.shape}")

    def bw(g):
        if _need(a):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _make(a.data[start:stop].copy(), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or stop > a.data.shape[1] or start < 0:
        raise ShapeError(f"slice_cols[{start}:{stop}] out of range for shape {a.data.shape}")

    def bw(g):
        if _need(a):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _make(a.data[:, start:stop].copy(), (a,), bw)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            if _need(p):
                _acc(p, g[off:off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[1] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            if _need(p):
                _acc(p, g[:, off:off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D tensor into n identical rows; gradient sums over rows."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_rows needs a 1-D tensor, got shape {v.data.shape}")

    def bw(g):
        if _need(v):
            _acc(v, g.sum(axis=0))

    return _make(np.tile(v.data, (n, 1)), (v,), bw)


def expand_cols(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D tensor into n identical columns; gradient sums over columns."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_cols needs a 1-D tensor, got shape {v.data.shape}")

    def bw(g):
        if _need(v):
            _acc(v, g.sum(axis=1))

    return _make(np.repeat(v.data[:, None], n, axis=1), (v,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.data.shape[0]})")

    def bw(g):
        if _need(table):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(table.data[ids].copy(), (table,), bw)


def frame_signal(x: Tensor, window_len: int, hop: int) -> Tensor:
    """Slice a 1-D signal into overlapping frames (F x window_len)."""
    if x.data.ndim != 1:
        raise ShapeError(f"frame_signal needs a 1-D tensor, got shape {x.data.shape}")
    n = x.data.shape[0]
    if n < window_len:
        raise ShapeError(f"frame_signal: signal of {n} samples shorter than window {window_len}")
    nf = 1 + (n - window_len) // hop
    idx = hop * np.arange(nf)[:, None] + np.arange(window_len)[None, :]

    def bw(g):
        if _need(x):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return _make(x.data[idx], (x,), bw)


def straight_through(x: Tensor, values) -> Tensor:
    """Forward the given values, pass the gradient to x unchanged."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != x.data.shape:
        raise ShapeError(f"straight_through: value shape {values.shape} != input shape {x.data.shape}")

    def bw(g):
        if _need(x):
            _acc(x, g)

    return _make(values.copy(), (x,), bw)


# ---------------------------------------------------------------------------
# matmul and convolutions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D tensors, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.data.shape} x {b.data.shape}")

    def bw(g):
        if _need(a):
            _acc(a, g @ b.data.T)
        if _need(b):
            _acc(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def _windows(xp: np.ndarray, kernel: int, stride: int, n_out: int) -> np.ndarray:
    """Strided (C, K, T') view of a padded (C, Tp) signal; no copy."""
    c, _ = xp.shape
    s0, s1 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, kernel, n_out), strides=(s0, s1, s1 * stride), writeable=False)


def _scatter_cols(target: np.ndarray, cols: np.ndarray, stride: int):
    """Adjoint of window extraction: add (C, K, T') columns back into (C, Tp)."""
    _, kernel, n_out = cols.shape
    for k in range(kernel):
        target[:, k:k + stride * (n_out - 1) + 1:stride] += cols[:, k, :]


def _conv_shapes(t_in: int, kernel: int, stride: int, padding: int, op: str) -> int:
    tp = t_in + 2 * padding
    if tp < kernel:
        raise ShapeError(f"{op}: kernel {kernel} larger than padded input of {tp} samples")
    return (tp - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, T) signal with a (C_out, C_in, K) kernel."""
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d needs (C,T) input and (Co,Ci,K) weight, got {x.data.shape} and {w.data.shape}")
    c_in, t_in = x.data.shape
    c_out, ci_w, kernel = w.data.shape
    if ci_w != c_in:
        raise ShapeError(f"conv1d: input channels {c_in} != weight channels {ci_w} (shapes {x.data.shape}, {w.data.shape})")
    t_out = _conv_shapes(t_in, kernel, stride, padding, "conv1d")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    win = _windows(xp, kernel, stride, t_out)
    out_data = np.einsum("oik,ikt->ot", w.data, win, optimize=True)

    def bw(g):
        if _need(w):
            _acc(w, np.einsum("ot,ikt->oik", g, win, optimize=True))
        if _need(x):
            gxp = np.zeros_like(xp)
            cols = np.einsum("oik,ot->ikt", w.data, g, optimize=True)
            _scatter_cols(gxp, cols, stride)
            _acc(x, gxp[:, padding:padding + t_in])

    return _make(out_data, (x, w), bw)


def transposed_conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                      output_length: int | None = None) -> Tensor:
    """Adjoint of conv1d with the same weight/stride/padding.

    Maps a (C_out, T') signal through a (C_out, C_in, K) kernel to
    (C_in, T) so that <conv1d(a), b> == <a, transposed_conv1d(b)> exactly.
    T defaults to (T'-1)*stride + K - 2*padding; when the matching conv
    consumed an input whose length did not divide evenly, pass that length
    as ``output_length`` (the trailing adjoint samples are zero-extended).
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"transposed_conv1d needs (C,T) input and (Co,Ci,K) weight, got {x.data.shape} and {w.data.shape}")
    c_out, t_in = x.data.shape
    co_w, c_in, kernel = w.data.shape
    if co_w != c_out:
        raise ShapeError(f"transposed_conv1d: input channels {c_out} != weight channels {co_w} (shapes {x.data.shape}, {w.data.shape})")
    extent = (t_in - 1) * stride + kernel
    t_out = extent - 2 * padding if output_length is None else int(output_length)
    if t_out <= 0:
        raise ShapeError(f"transposed_conv1d: padding {padding} consumes the whole output of {extent} samples")
    t_padded = max(extent, t_out + 2 * padding)
    cols = np.einsum("oik,ot->ikt", w.data, x.data, optimize=True)
    zp = np.zeros((c_in, t_padded))
    _scatter_cols(zp, cols, stride)
    out_data = zp[:, padding:padding + t_out].copy()

    def bw(g):
        gp = np.zeros((c_in, t_padded))
        gp[:, padding:padding + t_out] = g
        win = _windows(gp, kernel, stride, t_in)
        if _need(x):
            _acc(x, np.einsum("oik,ikt->ot", w.data, win, optimize=True))
        if _need(w):
            _acc(w, np.einsum("ot,ikt->oik", x.data, win, optimize=True))

    return _make(out_data, (x, w), bw)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def sgd_step(params, lr: float):
    """In-place SGD update; every parameter must carry a gradient."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradMissingError(f"sgd_step: parameter {i} of shape {p.data.shape} has no gradient")
    for p in params:
        p.data -= lr * p.grad


def init_adam_state(params) -> dict:
    return {
        "t": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(state: dict, params, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam update with bias correction."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradMissingError(f"adam_step: parameter {i} of shape {p.data.shape} has no gradient")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, m, v in zip(params, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * (p.grad * p.grad)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over named parameter groups, each with its own learning rate.

    Groups are (name, {param_name: Tensor}, lr) triples; the per-group
    moment state is exposed for checkpointing via ``state_arrays``.
    """

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = []
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        for name, named_params, lr in groups:
            names = sorted(named_params)
            params = [named_params[k] for k in names]
            self.groups.append({
                "name": name,
                "lr": float(lr),
                "param_names": names,
                "params": params,
                "state": init_adam_state(params),
            })

    def learning_rates(self) -> dict:
        return {g["name"]: g["lr"] for g in self.groups}

    def step(self):
        for g in self.groups:
            if g["lr"] == 0.0:
                continue  # frozen group: skip entirely so moments stay zero
            adam_step(g["state"], g["params"], g["lr"], self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for g in self.groups:
            zero_grad(g["params"])

    def state_arrays(self) -> dict:
        out = {}
        for g in self.groups:
            out[f"opt.{g['name']}.t"] = np.asarray(float(g["state"]["t"]))
            for pname, m, v in zip(g["param_names"], g["state"]["m"], g["state"]["v"]):
                out[f"opt.{g['name']}.m.{pname}"] = m
                out[f"opt.{g['name']}.v.{pname}"] = v
        return out

    def load_state_arrays(self, arrays: dict):
        for g in self.groups:
            key = f"opt.{g['name']}.t"
            if key not in arrays:
                continue
            g["state"]["t"] = int(arrays[key])
            for i, pname in enumerate(g["param_names"]):
                g["state"]["m"][i][...] = arrays[f"opt.{g['name']}.m.{pname}"]
                g["state"]["v"][i][...] = arrays[f"opt.{g['name']}.v.{pname}"]


# ---------------------------------------------------------------------------
# deterministic RNG context
# ---------------------------------------------------------------------------

def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "little")


class Rng:
    """Seeded random context; named children give order-independent streams.

    ``child("x")`` always yields the same stream for the same (seed, path),
    no matter how many draws happened elsewhere, which keeps experiments
    bit-reproducible as code paths move around.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)))

    def child(self, tag: str) -> "Rng":
        return Rng(self.seed, self.key + (_tag_key(tag),))

    def normal(self, shape=(), std: float = 1.0):
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state


def glorot(rng: Rng, shape, fan_in: int, fan_out: int) -> Tensor:
    """Glorot-uniform parameter tensor with requires_grad set."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)
