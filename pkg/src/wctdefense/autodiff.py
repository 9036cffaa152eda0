"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient, so inference code runs the same ops with
no bookkeeping. Every spatial op accepts a single ``(C, H, W)`` map or a batch
``(N, C, H, W)``; batches are how training and the attacks stay fast.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE_TAPES: list["Tape"] = []
_PATCH_BUDGET = 1 << 20  # doubles per conv patch chunk (8 MiB)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    # the graph is owned by its output tensor: tensor -> node -> inputs; there
    # are no back-references, so graphs are freed by reference counting
    __slots__ = ("inputs", "backward_fn", "seq")

    def __init__(self, inputs, backward_fn, seq):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq


class Tape:
    """Recording scope for differentiable operations.

    Use as a context manager around a forward pass. Nodes get increasing
    sequence numbers, so sorting by them gives a topological order.
    """

    def __init__(self):
        self.count = 0

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return self.count


_SEQ = itertools.count()


def _record(out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        _ACTIVE_TAPES[-1].count += 1
        out.requires_grad = True
        out._node = _Node(tuple(inputs), backward_fn, next(_SEQ))
    return out


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf reachable from ``output``.

    Gradients accumulate across calls; reset with ``zero_grad`` between uses.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output._node is None:
        raise ContractError("output was not produced under an active tape")
    # collect the reachable graph, then walk it in reverse creation order
    found = {id(output): output}
    stack = [output]
    while stack:
        t = stack.pop()
        for u in t._node.inputs:
            if u._node is not None and id(u) not in found:
                found[id(u)] = u
                stack.append(u)
    order = sorted(found.values(), key=lambda t: t._node.seq, reverse=True)
    pending = {id(output): np.ones_like(output.data)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        for u, gi in zip(t._node.inputs, t._node.backward_fn(g)):
            if gi is None or not u.requires_grad:
                continue
            if u._node is not None:
                key = id(u)
                pending[key] = gi if key not in pending else pending[key] + gi
            else:
                u.grad = gi.copy() if u.grad is None else u.grad + gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _record(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _record(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _record(a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    return reshape(x, (x.shape[0], -1) if batched else (-1,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")

    def bw(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)
    return _record(np.asarray(a.data @ b.data), (a, b), bw)


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)
    return _record(a.data @ b.data, (a, b), bw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation with unit stride.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, kh, kw)``. Output spatial size is ``H + 2*padding - kh + 1``.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = kernels.shape
    if c != c_in:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    k = kh * kw * c
    # channels-last internally so patch copies and scatters stay contiguous;
    # batches are processed in cache-sized chunks and patches are rebuilt in
    # the backward pass instead of being stored
    xp = np.zeros((n, hp, wp, c))
    xp[:, padding:padding + h, padding:padding + w, :] = xd.transpose(0, 2, 3, 1)
    step = max(1, _PATCH_BUDGET // (ho * wo * k))
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(c_out, k)

    def patches(s, e):
        cols = np.empty((e - s, ho, wo, kh, kw, c))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[s:e, i:i + ho, j:j + wo, :]
        return cols.reshape(-1, k)

    out = np.empty((n, ho, wo, c_out))
    for s in range(0, n, step):
        e = min(n, s + step)
        out[s:e] = (patches(s, e) @ wmat.T).reshape(e - s, ho, wo, c_out)
    out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gt = np.ascontiguousarray(g4.transpose(0, 2, 3, 1))
        gk = np.zeros((c_out, k)) if kernels.requires_grad else None
        gxp = np.zeros((n, hp, wp, c)) if x.requires_grad else None
        for s in range(0, n, step):
            e = min(n, s + step)
            g2 = gt[s:e].reshape(-1, c_out)
            if gk is not None:
                gk += g2.T @ patches(s, e)
            if gxp is not None:
                dcols = (g2 @ wmat).reshape(e - s, ho, wo, kh, kw, c)
                for i in range(kh):
                    for j in range(kw):
                        gxp[s:e, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        gb = gt.reshape(-1, c_out).sum(axis=0) if bias.requires_grad else None
        gx = None
        if gxp is not None:
            gx = np.ascontiguousarray(gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
            if single:
                gx = gx[0]
        if gk is not None:
            gk = gk.reshape(c_out, kh, kw, c).transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _record(out, (x, kernels, bias), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; odd spatial sizes are padded with -inf.

    The gradient goes to the first maximal entry of each window in row-major
    order.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    # window corners in row-major order
    corners = [xd[:, :, a::2, b::2] for a in (0, 1) for b in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gx = np.zeros(xd.shape)
        taken = np.zeros(out.shape if not single else out[None].shape, dtype=bool)
        for (a, b), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (corner == (out if not single else out[None])) & ~taken
            gx[:, :, a::2, b::2] = np.where(hit, g4, 0.0)
            taken |= hit
        gx = gx[:, :, :h, :w]
        return (gx[0] if single else gx,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------- loss

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits: Tensor, label) -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    A 1-D ``logits`` takes a single class index; a 2-D batch takes one label
    per row and returns the batch mean.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n_class = z2.shape[1]
    if labels.shape[0] != z2.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {z2.shape[0]} logit rows")
    if np.any(labels >= n_class) or np.any(labels < 0):
        raise IndexError(f"label out of range for {n_class} classes")
    logp = log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        p *= g / z2.shape[0]
        return (p[0] if single else p,)

    return _record(np.asarray(loss), (logits,), bw)
