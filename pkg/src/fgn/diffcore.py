"""Tape-based reverse-mode differentiation over dense float64 arrays.

Only the handful of primitives the network and the CRPS loss need are
provided.  Every primitive takes and returns :class:`Tensor`; when at least
one input lives on a :class:`Tape` the output is recorded there together with
a closure computing the vector-Jacobian product.

Arrays are rank <= 3 at the public surface.  The leading axes are treated as
"rows" (batch, sites) and the last axis as features, so ``Tensor[n, d]`` and
``Tensor[B, K, d]`` work with the same code.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "ContractError",
    "ConfigurationError",
    "Tensor",
    "Tape",
    "checked",
    "constant",
    "affine",
    "layer_norm",
    "cond_scale_shift",
    "gelu",
    "abs_diff",
    "reduce_mean",
    "reduce_sum",
    "concat",
    "gather_ring",
    "local_attention",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "take",
]

MAX_RANK = 3
LN_EPS = 1e-5

_CHECKED = True


class ContractError(ValueError):
    """Raised when an operation receives inputs violating its contract."""


class ConfigurationError(ValueError):
    """Raised for invalid static configuration (e.g. heads not dividing width)."""


@contextlib.contextmanager
def checked(enabled: bool):
    """Toggle the NaN/Inf check performed when tensors are built."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = previous


class Tensor:
    """Immutable float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: "Tape | None" = None, index: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ContractError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ContractError("non-finite entries in tensor")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor(shape={self.shape}, {where})"


def constant(data) -> Tensor:
    """Wrap an array as a tensor that never receives gradients."""
    return data if isinstance(data, Tensor) else Tensor(data)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of primitive applications.

    ``ops`` holds ``(output_index, input_indices, backward)`` in execution
    order, so inputs always precede the operation that consumes them and the
    backward sweep simply walks the list in reverse.
    """

    def __init__(self):
        self.ops: list[tuple[int, tuple[int | None, ...], Backward]] = []
        self.n_nodes = 0

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, self.n_nodes)
        self.n_nodes += 1
        return t

    def _record(self, value: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
        out = Tensor(value, self, self.n_nodes)
        self.n_nodes += 1
        parents = tuple(t.index if t.tape is self else None for t in inputs)
        self.ops.append((out.index, parents, backward))
        return out

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Return d(output)/d(w) for each ``w`` in ``wrt``.

        ``output`` is usually a scalar; for non-scalar outputs ``seed`` gives
        the cotangent (defaults to ones).
        """
        if output.tape is not self:
            raise ContractError("output tensor is not recorded on this tape")
        if seed is None:
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {output.index: np.asarray(seed, dtype=np.float64)}
        for out_idx, parents, backward in reversed(self.ops):
            g = grads.pop(out_idx, None)
            if g is None:
                continue
            parent_grads = backward(g)
            for p, pg in zip(parents, parent_grads):
                if p is None or pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        result = []
        for w in wrt:
            g = grads.get(w.index) if w.tape is self else None
            result.append(np.zeros_like(w.data) if g is None else g)
        return result


def _tape_of(*tensors: Tensor) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors from different tapes combined")
            tape = t.tape
    return tape


def _emit(value: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(value, inputs, backward)


def _mm(a: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``a @ W`` over the last axis as one 2-D GEMM (numpy loops over leading axes otherwise)."""
    if a.ndim == 2:
        return a @ W
    return (a.reshape(-1, a.shape[-1]) @ W).reshape(a.shape[:-1] + (W.shape[1],))


def _require_shape(cond: bool, msg: str):
    if not cond:
        raise ContractError(msg)


# ----------------------------------------------------------------------------
# dense primitives


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``out[..., j] = sum_k x[..., k] W[k, j] + b[j]``."""
    _require_shape(W.ndim == 2 and b.ndim == 1, "affine expects W rank 2 and b rank 1")
    _require_shape(x.ndim >= 1 and x.shape[-1] == W.shape[0],
                   f"affine: x {x.shape} incompatible with W {W.shape}")
    _require_shape(b.shape[0] == W.shape[1], f"affine: b {b.shape} incompatible with W {W.shape}")
    xd, Wd = x.data, W.data
    out = _mm(xd, Wd) + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return _mm(g, Wd.T), x2.T @ g2, g2.sum(axis=0)

    return _emit(out, (x, W, b), backward)


def layer_norm(x: Tensor, eps: float = LN_EPS) -> tuple[Tensor, Tensor, Tensor]:
    """Normalise over the last axis.

    Returns the normalised tensor plus the per-row mean and variance.  Only
    the normalised output is differentiable; mean and variance are returned
    as constants for inspection.
    """
    if eps <= 0:
        raise ContractError("layer_norm requires eps > 0")
    _require_shape(x.ndim >= 1 and x.shape[-1] >= 1, "layer_norm needs a non-empty last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gxm) * inv,)

    out = _emit(xhat, (x,), backward)
    return out, Tensor(mu[..., 0]), Tensor(var[..., 0])


def cond_scale_shift(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``h * (1 + gamma) + beta`` with gamma/beta shared across the site axis.

    ``h`` has shape ``[..., K, d]``.  ``gamma`` and ``beta`` either drop the
    site axis (``[d]`` for rank-2 ``h``, ``[B, d]`` for rank-3 ``h``) and are
    broadcast over all K sites, or carry the full shape of ``h`` for
    site-local conditioning.
    """
    _require_shape(gamma.shape == beta.shape, "gamma and beta must have equal shapes")
    hd = h.data
    if gamma.shape == h.shape:
        shared = False
        gd, bd = gamma.data, beta.data
    else:
        _require_shape(h.ndim >= 2 and gamma.shape == h.shape[:-2] + h.shape[-1:],
                       f"cond_scale_shift: h {h.shape} incompatible with gamma {gamma.shape}")
        shared = True
        gd = np.expand_dims(gamma.data, -2)
        bd = np.expand_dims(beta.data, -2)
    out = hd * (1.0 + gd) + bd

    def backward(g):
        gh = g * (1.0 + gd)
        gg = g * hd
        if shared:
            return gh, gg.sum(axis=-2), g.sum(axis=-2)
        return gh, gg, g

    return _emit(out, (h, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)
    der = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * xd * (1.0 - t * t) * (1.0 + 3 * 0.044715 * x2)
    return _emit(out, (x,), lambda g: (g * der,))


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """``|a - b|`` elementwise; the subgradient at ties is 0."""
    _require_shape(a.shape == b.shape, f"abs_diff: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    s = np.sign(d)

    def backward(g):
        gs = g * s
        return gs, -gs

    return _emit(np.abs(d), (a, b), backward)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    out = xd.mean(axis=axis)
    n = xd.size if axis is None else xd.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(xd.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, xd.shape).copy(),)

    return _emit(out, (x,), backward)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    out = xd.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(xd.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)

    return _emit(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if len(xs) == 0:
        raise ContractError("concat of an empty list")
    arrays = [t.data for t in xs]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _emit(out, tuple(xs), backward)


def _ring_index(K: int, offsets: Sequence[int]) -> np.ndarray:
    """``idx[k, j] = (k + offsets[j]) mod K``."""
    return (np.arange(K)[:, None] + np.asarray(offsets, dtype=np.int64)[None, :]) % K


def gather_ring(x: Tensor, offsets: Sequence[int]) -> Tensor:
    """Concatenate, per site k, the features of sites ``(k + o) mod K``.

    ``x`` is ``[..., K, d]``; the result is ``[..., K, len(offsets) * d]``
    ordered offset-major.
    """
    offsets = list(offsets)
    if not offsets:
        raise ContractError("gather_ring needs at least one offset")
    _require_shape(x.ndim >= 2, "gather_ring expects [..., K, d]")
    xd = x.data
    K, d = xd.shape[-2], xd.shape[-1]
    idx = _ring_index(K, offsets)
    stacked = xd[..., idx, :]  # [..., K, J, d]
    out = stacked.reshape(xd.shape[:-2] + (K, len(offsets) * d))

    def backward(g):
        gj = g.reshape(xd.shape[:-2] + (K, len(offsets), d))
        gx = np.zeros_like(xd)
        for j, o in enumerate(offsets):
            # site m received from k = m - o
            inv = (np.arange(K) - o) % K
            gx += gj[..., inv, j, :]
        return (gx,)

    return _emit(out, (x,), backward)


def _softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def attention_offsets(K: int, window: int) -> list[int]:
    """Distinct ring offsets within ``+-window``; duplicates modulo K removed."""
    seen, offs = set(), []
    for o in range(-window, window + 1):
        if o % K not in seen:
            seen.add(o % K)
            offs.append(o)
    return offs


def local_attention(x: Tensor, window: int, heads: int,
                    wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, bo: Tensor) -> Tensor:
    """Multi-head softmax attention restricted to a ring neighbourhood.

    Each site attends to the distinct sites within ``+-window`` on the
    periodic lattice, then the heads are merged and projected by
    ``wo``/``bo``.  ``x`` is ``[K, d]`` or ``[B, K, d]``.
    """
    if window < 1:
        raise ConfigurationError("attention window must be >= 1")
    _require_shape(x.ndim in (2, 3), "local_attention expects [K, d] or [B, K, d]")
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"width {d} not divisible by heads={heads}")
    for w in (wq, wk, wv, wo):
        _require_shape(w.shape == (d, d), f"attention weight shape {w.shape} != {(d, d)}")
    _require_shape(bo.shape == (d,), "attention bias shape mismatch")

    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, K, _ = xd.shape
    offs = attention_offsets(K, window)
    idx = _ring_index(K, offs)  # [K, J]
    scl = 1.0 / math.sqrt(d // heads)
    Wq, Wk, Wv, Wo = wq.data, wk.data, wv.data, wo.data

    q = _mm(xd, Wq)
    k = _mm(xd, Wk)
    v = _mm(xd, Wv)
    a, o = _kernels.attention_fwd(q, k, v, idx, heads, scl)
    y = _mm(o, Wo) + bo.data

    def backward(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(-1, d)
        gWo = o.reshape(-1, d).T @ g2
        gbo = g2.sum(axis=0)
        go = np.ascontiguousarray(_mm(g3, Wo.T))
        gq, gk, gv = _kernels.attention_bwd(go, q, k, v, a, idx, heads, scl)
        x2 = xd.reshape(-1, d)
        gx = _mm(gq, Wq.T) + _mm(gk, Wk.T) + _mm(gv, Wv.T)
        if squeeze:
            gx = gx[0]
        return (gx, x2.T @ gq.reshape(-1, d), x2.T @ gk.reshape(-1, d),
                x2.T @ gv.reshape(-1, d), gWo, gbo)

    out = y[0] if squeeze else y
    return _emit(out, (x, wq, wk, wv, wo, bo), backward)


# ----------------------------------------------------------------------------
# elementwise glue


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_shape(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_shape(a.shape == b.shape, f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_shape(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    xd = x.data
    out = np.take(xd, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(xd)
        ax = axis % xd.ndim
        gx_moved = np.moveaxis(gx, ax, 0)
        np.add.at(gx_moved, indices, np.moveaxis(g, ax, 0))
        return (gx,)

    return _emit(out, (x,), backward)
