"""Reverse-mode autodiff over NumPy arrays.

A Tape records (output, pullback) pairs in forward order; backward() replays
them in reverse. An op is recorded only when some input requires grad, so
computation over frozen parameters and raw data stays off the tape entirely.
Hot elementwise/rowwise math is delegated to fedexit._kernels.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels as K

LAYERNORM_EPS = 1e-5

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a completed op or gradient."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, loss from another tape, ..."""


_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op output finiteness checks. Returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Array value plus grad slot. Intermediate node in the tape graph."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = False
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Named leaf tensor with a persistent grad buffer and a trainable flag."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str, trainable: bool = True, dtype=None):
        super().__init__(value, dtype=dtype)
        self.name = name
        self.trainable = bool(trainable)
        self.requires_grad = self.trainable
        self.grad = np.zeros_like(self.data)

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


Parameters = Mapping[str, Parameter]


def clone_parameters(params: Parameters, trainable: bool | None = None) -> dict[str, Parameter]:
    """Deep-copy a parameter dict. trainable=None preserves each flag."""
    out = {}
    for name, p in params.items():
        t = p.trainable if trainable is None else trainable
        out[name] = Parameter(p.data.copy(), name, trainable=t)
    return out


_TLS = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops for one forward pass. Use as a context manager."""

    __slots__ = ("_entries", "consumed")

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TLS.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; accumulates grads into reachable tensors."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    if loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, pull in reversed(tape._entries):
        if out.grad is not None:
            pull(out.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _accum_at(t: Tensor, index, g: np.ndarray) -> None:
    # scatter-accumulate into one slice of t.grad
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[index] += g


def _record(out_data: np.ndarray, op: str, inputs: Sequence[Tensor],
            pull: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape._entries.append((out, pull))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of NumPy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _rows(arr: np.ndarray) -> np.ndarray:
    """Contiguous 2-D view-or-copy (rows x last axis) for the kernels."""
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def pull(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, "add", (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def pull(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, "mul", (a, b), pull)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def pull(g):
        _accum(a, g * s)

    return _record(out, "scale", (a,), pull)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.data.shape} @ {b.data.shape}") from None

    def pull(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, "matmul", (a, b), pull)


def gelu(a: Tensor) -> Tensor:
    x2 = _rows(a.data)
    out = np.asarray(K.gelu_fwd(x2)).reshape(a.data.shape)

    def pull(g):
        g2 = _rows(g)
        _accum(a, np.asarray(K.gelu_bwd(g2, x2)).reshape(a.data.shape))

    return _record(out, "gelu", (a,), pull)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x2 = _rows(a.data)
    y2 = np.asarray(K.softmax_fwd(x2))
    out = y2.reshape(a.data.shape)

    def pull(g):
        g2 = _rows(g)
        _accum(a, np.asarray(K.softmax_bwd(g2, y2)).reshape(a.data.shape))

    return _record(out, "softmax", (a,), pull)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Layer norm over the last axis with learnable scale/shift."""
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.data.shape} and {beta.data.shape}")
    x2 = _rows(a.data)
    g2 = np.ascontiguousarray(gamma.data)
    b2 = np.ascontiguousarray(beta.data)
    y2, mean, rstd = K.layernorm_fwd(x2, g2, b2, float(eps))
    out = np.asarray(y2).reshape(a.data.shape)

    def pull(g):
        gg = _rows(g)
        dx, dgamma, dbeta = K.layernorm_bwd(gg, x2, g2, mean, rstd)
        _accum(a, np.asarray(dx).reshape(a.data.shape))
        _accum(gamma, np.asarray(dgamma))
        _accum(beta, np.asarray(dbeta))

    return _record(out, "layer_norm", (a, gamma, beta), pull)


def mean_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean())
    n = a.data.size

    def pull(g):
        _accum(a, np.full(a.data.shape, float(g) / n, dtype=a.data.dtype))

    return _record(out, "mean_all", (a,), pull)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def pull(g):
        _accum(a, np.full(a.data.shape, float(g), dtype=a.data.dtype))

    return _record(out, "sum_all", (a,), pull)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy. logits (B, C), integer labels (B,)."""
    z = logits.data
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.data.shape}")
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: labels {y.shape} do not match logits {z.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"cross_entropy: labels must be integers, got dtype {y.dtype}")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ShapeError(f"cross_entropy: label out of range for {z.shape[1]} classes")
    b, c = z.shape
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - zs[np.arange(b), y]
    out = np.asarray(losses.mean())
    p = np.exp(zs - lse)

    def pull(g):
        gl = p * (float(g) / b)
        gl[np.arange(b), y] -= float(g) / b
        _accum(logits, gl.reshape(logits.data.shape))

    return _record(out, "cross_entropy", (logits,), pull)


# ------------------------------------------------------------------ plumbing


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from None

    def pull(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, "reshape", (a,), pull)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for shape {a.data.shape}")
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def pull(g):
        _accum(a, np.transpose(g, inv))

    return _record(out, "transpose", (a,), pull)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along axis."""
    n = a.data.shape[axis]
    if not (0 <= start and start + length <= n):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.data.shape}")
    index = (slice(None),) * (axis % a.data.ndim) + (slice(start, start + length),)
    out = a.data[index]

    def pull(g):
        _accum_at(a, index, g)

    return _record(out, "narrow", (a,), pull)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along axis, dropping that axis."""
    axis = axis % a.data.ndim
    if not (0 <= index < a.data.shape[axis]):
        raise ShapeError(f"take: index {index} out of range for axis {axis} of {a.data.shape}")
    sel = (slice(None),) * axis + (index,)
    out = a.data[sel]

    def pull(g):
        _accum_at(a, sel, g)

    return _record(out, "take", (a,), pull)


def token_at(seq: Tensor, idx: int) -> Tensor:
    """Token idx from a (..., T, d) sequence -> (..., d)."""
    return take(seq, idx, axis=seq.data.ndim - 2)


def with_token(seq: Tensor, idx: int, tok: Tensor) -> Tensor:
    """Functional write of token idx in a (..., T, d) sequence."""
    t = seq.data.ndim - 2
    if not (0 <= idx < seq.data.shape[t]):
        raise ShapeError(f"with_token: index {idx} out of range for {seq.data.shape}")
    sel = (slice(None),) * t + (idx,)
    out = seq.data.copy()
    try:
        out[sel] = tok.data
    except ValueError:
        raise ShapeError(f"with_token: token {tok.data.shape} does not fit {seq.data.shape}") from None

    def pull(g):
        if seq.requires_grad:
            gs = g.copy()
            gs[sel] = 0.0
            _accum(seq, gs)
        if tok.requires_grad:
            _accum(tok, _unbroadcast(g[sel], tok.data.shape))

    return _record(out, "with_token", (seq, tok), pull)


def stack_tokens(tokens: Iterable[Tensor]) -> Tensor:
    """Stack equal-shape (B, d) tensors into a (B, T, d) sequence."""
    toks = list(tokens)
    if not toks:
        raise ShapeError("stack_tokens: empty token list")
    shape = toks[0].data.shape
    for t in toks:
        if t.data.shape != shape:
            raise ShapeError(f"stack_tokens: mixed shapes {shape} and {t.data.shape}")
    out = np.stack([t.data for t in toks], axis=-2)

    def pull(g):
        for j, t in enumerate(toks):
            _accum(t, g[..., j, :])

    return _record(out, "stack_tokens", toks, pull)


def expand_row(v: Tensor, n: int) -> Tensor:
    """Broadcast a (d,) vector to (n, d)."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_row: need a 1-D vector, got {v.data.shape}")
    out = np.ascontiguousarray(np.broadcast_to(v.data, (n, v.data.shape[0])))

    def pull(g):
        _accum(v, g.sum(axis=0))

    return _record(out, "expand_row", (v,), pull)


def prepend_token(tok: Tensor, seq: Tensor) -> Tensor:
    """Concatenate a token (d,) or (B, d) in front of a (B, N, d) sequence."""
    if seq.data.ndim != 3:
        raise ShapeError(f"prepend_token: sequence must be (B, N, d), got {seq.data.shape}")
    b, _, d = seq.data.shape
    head = np.broadcast_to(tok.data, (b, d)).reshape(b, 1, d)
    if tok.data.shape not in ((d,), (b, d)):
        raise ShapeError(f"prepend_token: token {tok.data.shape} does not fit {seq.data.shape}")
    out = np.concatenate([head, seq.data], axis=1)

    def pull(g):
        _accum(tok, _unbroadcast(g[:, 0, :], tok.data.shape))
        _accum(seq, g[:, 1:, :])

    return _record(out, "prepend_token", (tok, seq), pull)


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or rate == 0."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep).astype(a.data.dtype) / np.asarray(keep, dtype=a.data.dtype)
    out = a.data * mask

    def pull(g):
        _accum(a, g * mask)

    return _record(out, "dropout", (a,), pull)


# -------------------------------------------------------------- compositions


def multi_head_attention(x: Tensor, w_qkv: Tensor, b_qkv: Tensor,
                         w_proj: Tensor, b_proj: Tensor, num_heads: int) -> Tensor:
    """Standard multi-head self-attention built from the primitives above.

    x is (B, T, d); w_qkv is (d, 3d) (joint projection), w_proj is (d, d).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"attention input must be (B, T, d), got {x.data.shape}")
    b, t, d = x.data.shape
    if d % num_heads != 0:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    qkv = add(matmul(x, w_qkv), b_qkv)                    # (B, T, 3d)
    qkv = reshape(qkv, (b, t, 3, num_heads, dh))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))                 # (3, B, h, T, dh)
    q = take(qkv, 0, axis=0)
    k = take(qkv, 1, axis=0)
    v = take(qkv, 2, axis=0)

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = softmax(scores)                                  # (B, h, T, T)
    ctx = matmul(att, v)                                   # (B, h, T, dh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return add(matmul(ctx, w_proj), b_proj)
