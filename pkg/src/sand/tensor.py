"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its output array, its parents and a closure
mapping the output gradient to one gradient per parent.  ``backward`` orders
the graph reachable from a scalar loss (parents before children) and replays
it in reverse.  There is no global tape: each forward pass owns its graph, so
independent batches can be differentiated on separate threads.

Set ``SAND_DEBUG=1`` to check every forward output for NaN/Inf.
"""

from __future__ import annotations

import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, ShapeError, UsageError

DEBUG = os.environ.get("SAND_DEBUG", "") not in ("", "0")

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)) and all(np.all(np.isfinite(p.data)) for p in parents):
        raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph traversal ----------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs first.

    This list is the replay tape for ``backward``: every node appears exactly
    once and after all of its parents.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` must be deterministic.  ``x`` is perturbed in place and restored.
    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    x.data = x.data.copy(order="C")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(out, (a, b), bw, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions and structure -------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _node(out, (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(ts), bw, "concat")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def slice_(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (x,), bw, "slice")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), bw, "matmul")


def softmax_last(x) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries come out as exact zeros."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    peak = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(peak).any():
        raise DegenerateRowError("softmax row is entirely -inf (empty attention window)")
    e = np.exp(x.data - peak)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def conv1d(x, w, bias) -> Tensor:
    """Same-length 1D convolution over time.

    x: [B, T, Cin], w: [Cout, Cin, h] with h odd, bias: [Cout].  The input is
    zero-padded by (h - 1) / 2 on both ends.
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if w.ndim != 3 or x.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,T,Cin] and w [Cout,Cin,h], got {x.shape}, {w.shape}")
    cout, cin, h = w.shape
    if h % 2 == 0:
        raise UsageError(f"conv1d kernel size must be odd, got {h}")
    if x.shape[-1] != cin or bias.shape != (cout,):
        raise ShapeError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    B, T, _ = x.shape
    pad = (h - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    out = np.broadcast_to(bias.data, (B, T, cout)).copy()
    for i in range(h):
        out += xp[:, i : i + T, :] @ w.data[:, :, i].T

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(h):
                gxp[:, i : i + T, :] += g @ w.data[:, :, i]
            gx = gxp[:, pad : pad + T, :] if pad else gxp
        if w.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(w.data)
            for i in range(h):
                gw[:, :, i] = g2.T @ xp[:, i : i + T, :].reshape(-1, cin)
        gb = g.sum(axis=(0, 1)) if bias.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, bias), bw, "conv1d")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# -- dropout ------------------------------------------------------------------


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1 / (1 - p)."""
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p: float, rng: np.random.Generator | None = None, mask: np.ndarray | None = None,
            training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if mask is None:
        if rng is None:
            raise UsageError("dropout in training mode needs an rng or a fixed mask")
        mask = dropout_mask(x.shape, p, rng)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- banded (windowed) attention primitives -----------------------------------
#
# Scores for a causal window of offsets o = 0..r (o = t - t') are stored as
# [..., T, r + 1] instead of [..., T, T]; both ops below cost O(T * r * dk).


def band_scores(q, k, r: int) -> Tensor:
    """scores[..., t, o] = q[..., t, :] . k[..., t - o, :]  (0 where t - o < 0)."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape != k.shape:
        raise ShapeError(f"band_scores shape mismatch: {q.shape} vs {k.shape}")
    T = q.shape[-2]
    out = np.zeros(q.shape[:-1] + (r + 1,))
    for o in range(min(r + 1, T)):
        out[..., o:, o] = np.einsum("...td,...td->...t", q.data[..., o:, :], k.data[..., : T - o, :])

    def bw(g):
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        for o in range(min(r + 1, T)):
            go = g[..., o:, o, None]
            gq[..., o:, :] += go * k.data[..., : T - o, :]
            gk[..., : T - o, :] += go * q.data[..., o:, :]
        return gq, gk

    return _node(out, (q, k), bw, "band_scores")


def band_mix(p, v) -> Tensor:
    """out[..., t, :] = sum_o p[..., t, o] * v[..., t - o, :]."""
    p, v = as_tensor(p), as_tensor(v)
    T = v.shape[-2]
    width = p.shape[-1]
    if p.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"band_mix shape mismatch: {p.shape} vs {v.shape}")
    out = np.zeros_like(v.data)
    for o in range(min(width, T)):
        out[..., o:, :] += p.data[..., o:, o, None] * v.data[..., : T - o, :]

    def bw(g):
        gp = np.zeros_like(p.data)
        gv = np.zeros_like(v.data)
        for o in range(min(width, T)):
            gp[..., o:, o] = np.einsum("...td,...td->...t", g[..., o:, :], v.data[..., : T - o, :])
            gv[..., : T - o, :] += p.data[..., o:, o, None] * g[..., o:, :]
        return gp, gv

    return _node(out, (p, v), bw, "band_mix")


def band_to_dense(p: np.ndarray) -> np.ndarray:
    """Scatter [..., T, r+1] band weights into a [..., T, T] matrix."""
    T, width = p.shape[-2], p.shape[-1]
    dense = np.zeros(p.shape[:-1] + (T,))
    t = np.arange(T)
    for o in range(min(width, T)):
        dense[..., t[o:], t[o:] - o] = p[..., o:, o]
    return dense


# -- serialization ------------------------------------------------------------


def tensor_to_bytes(arr) -> bytes:
    """u32 rank, u32 dims, then little-endian f64 payload in row-major order."""
    a = np.asarray(arr, dtype="<f8").copy(order="C")  # keeps 0-d shape, unlike ascontiguousarray
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of ``tensor_to_bytes``; returns (array, offset past the record)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)
    return arr, offset + 8 * count


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
