"""Dense interpolation: collapse a [T, d] sequence into an order-aware d*M vector.

Step t (1-based) sits at relative position s = M*t/T and contributes to slot m
(1-based) with weight (1 - |s - m| / M)**2.  The weights are cached as a T x M
matrix so the whole reduction is one matmul per batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, matmul, reshape, swap_last, transpose


@dataclass(frozen=True)
class InterpWeights:
    W: np.ndarray  # [T, M]
    T: int
    M: int


def _weight(t: int, m: int, T: int, M: int) -> float:
    s = M * t / T
    dist = abs(s - m)
    if dist >= M:
        return 0.0
    return (1.0 - dist / M) ** 2


@lru_cache(maxsize=256)
def _cached_matrix(T: int, M: int) -> np.ndarray:
    W = np.empty((T, M))
    for t in range(1, T + 1):
        for m in range(1, M + 1):
            W[t - 1, m - 1] = _weight(t, m, T, M)
    W.setflags(write=False)
    return W


def build_weights(T: int, M: int) -> InterpWeights:
    if T < 1 or M < 1:
        raise ConfigError(f"dense interpolation needs T >= 1 and M >= 1, got T={T}, M={M}")
    if M > T:
        raise ConfigError(f"interpolation factor M={M} exceeds sequence length T={T}")
    return InterpWeights(_cached_matrix(T, M), T, M)


def batch_weights(lengths, T: int, M: int) -> np.ndarray:
    """[B, T, M] weights for ragged sequences: each row uses its own length,
    padded steps get zero weight."""
    lengths = np.asarray(lengths, dtype=int)
    out = np.zeros((len(lengths), T, M))
    for L in np.unique(lengths):
        if L > T:
            raise ShapeError(f"sequence length {L} exceeds padded length {T}")
        out[lengths == L, :L, :] = build_weights(int(L), M).W
    return out


def dense_interpolate(S: Tensor, W: InterpWeights | np.ndarray) -> Tensor:
    """S: [B, T, d] -> [B, d*M], slots stacked m-major (all of u_1, then u_2, ...).

    ``W`` is either shared InterpWeights or a per-sequence [B, T, M] array from
    ``batch_weights``.
    """
    mat = W.W if isinstance(W, InterpWeights) else np.asarray(W)
    B, T, d = S.shape
    if mat.shape[-2] != T:
        raise ShapeError(f"interpolation weights built for T={mat.shape[-2]}, sequence has T={T}")
    M = mat.shape[-1]
    # U = S^T W per sequence: [B, d, M]
    U = matmul(swap_last(S), Tensor(mat))
    return reshape(transpose(U, (0, 2, 1)), (B, M * d))

