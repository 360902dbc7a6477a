"""Masked multi-head self-attention encoder.

Layout per attention module (post-norm)::

    x -> MHA(x) -> dropout -> + x -> LN -> conv1(h=1) -> ReLU -> conv1(h=1)
      -> dropout -> + -> LN

Each step attends to itself plus at most ``r`` earlier steps.  Two
numerically equivalent kernels exist: a dense one that materialises the
[T, T] score matrix under an additive {0, -inf} mask, and a banded one that
only ever touches the r + 1 admissible offsets, so the work per layer grows
as T * r * d instead of T**2 * d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .errors import CapacityError, ConfigError, ShapeError
from .tensor import Tensor


def build_mask(T: int, r: int, include_self: bool = True) -> np.ndarray:
    """[T, T] additive mask: 0 where step t may attend to t', else -inf."""
    if r < 1:
        raise ConfigError(f"mask size r must be >= 1, got {r}")
    t = np.arange(T)[:, None]
    tp = np.arange(T)[None, :]
    lag = t - tp
    ok = (lag >= 1) & (lag <= r)
    if include_self:
        ok |= lag == 0
    if T >= 1 and not ok[0].any():
        raise ConfigError("attention window for the first step is empty; enable include_self")
    return np.where(ok, 0.0, -np.inf)


def band_mask(T: int, r: int, include_self: bool = True) -> np.ndarray:
    """[T, r + 1] additive mask over offsets o = t - t' in 0..r."""
    t = np.arange(T)[:, None]
    o = np.arange(r + 1)[None, :]
    ok = o <= t
    if not include_self:
        ok &= o >= 1
    if T >= 1 and not ok[0].any():
        raise ConfigError("attention window for the first step is empty; enable include_self")
    return np.where(ok, 0.0, -np.inf)


def _attn_dropout(P: Tensor, p: float, rng, training: bool) -> Tensor:
    return tn.dropout(P, p, rng=rng, training=training)


def scaled_dot_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: np.ndarray | None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    store: list | None = None,
) -> Tensor:
    """softmax(Q K^T / sqrt(dk) + mask) V over [..., T, dk] operands."""
    dk = Q.shape[-1]
    scores = tn.matmul(Q, tn.swap_last(K)) / math.sqrt(dk)
    if mask is not None:
        scores = scores + Tensor(mask)
    P = tn.softmax_last(scores)
    if store is not None:
        store.append(P.data)
    return tn.matmul(_attn_dropout(P, dropout_p, rng, training), V)


def banded_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    r: int,
    include_self: bool = True,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    store: list | None = None,
) -> Tensor:
    """Same result as ``scaled_dot_attention`` with ``build_mask(T, r)``."""
    T, dk = Q.shape[-2], Q.shape[-1]
    scores = tn.band_scores(Q, K, r) / math.sqrt(dk)
    scores = scores + Tensor(band_mask(T, r, include_self))
    P = tn.softmax_last(scores)
    if store is not None:
        store.append(tn.band_to_dense(P.data))
    return tn.band_mix(_attn_dropout(P, dropout_p, rng, training), V)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)


@dataclass
class AttentionBlock:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "AttentionBlock":
        d, dff = cfg.d, cfg.d_ff
        # wq/wk/wv hold all heads side by side: head i owns columns i*dk:(i+1)*dk
        return cls(
            wq=_glorot(rng, d, d, (d, d)),
            wk=_glorot(rng, d, d, (d, d)),
            wv=_glorot(rng, d, d, (d, d)),
            wo=_glorot(rng, d, d, (d, d)),
            ff1_w=_glorot(rng, d, dff, (dff, d, 1)),
            ff1_b=Tensor(np.zeros(dff), requires_grad=True),
            ff2_w=_glorot(rng, dff, d, (d, dff, 1)),
            ff2_b=Tensor(np.zeros(d), requires_grad=True),
            ln1_g=Tensor(np.ones(d), requires_grad=True),
            ln1_b=Tensor(np.zeros(d), requires_grad=True),
            ln2_g=Tensor(np.ones(d), requires_grad=True),
            ln2_b=Tensor(np.zeros(d), requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        return dict(vars(self))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, d = x.shape
    return tn.transpose(tn.reshape(x, (B, T, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dk = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, T, H * dk))


def uses_banded(cfg: ModelConfig, T: int) -> bool:
    if cfg.attention == "auto":
        return cfg.r + 1 < T
    return cfg.attention == "banded"


def attention_module(
    x: Tensor,
    block: AttentionBlock,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    store: list | None = None,
) -> Tensor:
    T = x.shape[1]
    q = _split_heads(tn.matmul(x, block.wq), cfg.heads)
    k = _split_heads(tn.matmul(x, block.wk), cfg.heads)
    v = _split_heads(tn.matmul(x, block.wv), cfg.heads)
    pa = cfg.dropout_attention
    if uses_banded(cfg, T):
        att = banded_attention(q, k, v, cfg.r, cfg.include_self, pa, rng, training, store)
    else:
        mask = build_mask(T, cfg.r, cfg.include_self)
        att = scaled_dot_attention(q, k, v, mask, pa, rng, training, store)
    mha = tn.matmul(_merge_heads(att), block.wo)
    pr = cfg.dropout_residue
    x = tn.layer_norm(x + tn.dropout(mha, pr, rng=rng, training=training), block.ln1_g, block.ln1_b)

    ff = tn.conv1d(x, block.ff1_w, block.ff1_b)
    ff = tn.conv1d(tn.relu(ff), block.ff2_w, block.ff2_b)
    return tn.layer_norm(x + tn.dropout(ff, pr, rng=rng, training=training), block.ln2_g, block.ln2_b)


class Encoder:
    """Input embedding, positional table and ``N`` stacked attention modules."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        fan_in = cfg.R * cfg.h
        self.emb_w = _glorot(rng, fan_in, cfg.d, (cfg.d, cfg.R, cfg.h))
        self.emb_b = Tensor(np.zeros(cfg.d), requires_grad=True)
        self.positional = Tensor(rng.uniform(-1.0, 1.0, (cfg.T_max, cfg.d)), requires_grad=cfg.learn_positional)
        self.blocks = [AttentionBlock.init(cfg, rng) for _ in range(cfg.N)]

    def parameters(self) -> dict[str, Tensor]:
        params = {"emb_w": self.emb_w, "emb_b": self.emb_b}
        if self.cfg.learn_positional:
            params["positional"] = self.positional
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                params[f"blocks.{i}.{name}"] = p
        return params

    def state(self) -> dict[str, Tensor]:
        """Everything persisted in a checkpoint, frozen tensors included."""
        state = self.parameters()
        state["positional"] = self.positional
        return state

    def embed(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.cfg.R:
            raise ShapeError(f"expected input [B, T, R={self.cfg.R}], got {x.shape}")
        T = x.shape[1]
        if T > self.cfg.T_max:
            raise CapacityError(f"sequence length {T} exceeds T_max={self.cfg.T_max}")
        e = tn.conv1d(x, self.emb_w, self.emb_b) + self.positional[:T]
        return tn.dropout(e, self.cfg.dropout_input, rng=rng, training=training)

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None,
                 store: list | None = None) -> Tensor:
        h = self.embed(x, training, rng)
        for block in self.blocks:
            h = attention_module(h, block, self.cfg, training, rng, store)
        return h
