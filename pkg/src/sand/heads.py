"""Task heads and loss functions, including the weighted multi-task objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .config import parse_head_kind
from .errors import ConfigError, EmptyBatchError, LabelError, ShapeError
from .interp import batch_weights, dense_interpolate
from .tensor import Tensor

PROB_CLAMP = 1e-12


@dataclass
class MultiTaskWeights:
    """Loss weights for phenotyping, in-hospital mortality, decompensation and
    length of stay.  Defaults are the published SAnD-Multi weights."""

    ph: float = 0.8
    ihm: float = 0.5
    dc: float = 1.1
    los: float = 0.8

    # config files may use the single-letter suffixes lambda_p / _i / _d / _l
    ALIASES = {"p": "ph", "i": "ihm", "d": "dc", "l": "los"}

    def __post_init__(self):
        vals = self.as_dict().values()
        if any(v < 0 for v in vals):
            raise ConfigError("multi-task weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one multi-task weight must be positive")

    def as_dict(self) -> dict[str, float]:
        return {"ph": self.ph, "ihm": self.ihm, "dc": self.dc, "los": self.los}

    @classmethod
    def from_mapping(cls, values: Mapping[str, float]) -> "MultiTaskWeights":
        kw = {}
        for k, v in values.items():
            key = cls.ALIASES.get(k, k)
            if key not in ("ph", "ihm", "dc", "los"):
                raise ConfigError(f"unknown multi-task weight {k!r}")
            kw[key] = float(v)
        return cls(**kw)


# -- losses -------------------------------------------------------------------


def _clamped(p) -> Tensor:
    return tn.clip(tn.as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _bce(y: np.ndarray, p) -> Tensor:
    p = _clamped(p)
    return -(Tensor(y) * tn.log(p) + Tensor(1.0 - y) * tn.log(1.0 - p))


def _masked_mean(values: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return values.mean()
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise EmptyBatchError("no valid steps in batch")
    return (values * Tensor(mask)).sum() / count


def binary_loss(y, y_hat, mask=None) -> Tensor:
    """Binary cross-entropy, averaged over the batch (or the valid entries)."""
    y = np.asarray(y, dtype=np.float64)
    if tn.as_tensor(y_hat).shape != y.shape:
        raise ShapeError(f"labels {y.shape} vs predictions {tn.as_tensor(y_hat).shape}")
    return _masked_mean(_bce(y, y_hat), mask)


def multilabel_loss(y, y_hat) -> Tensor:
    """(1/K) sum_k BCE_k per sample, averaged over the batch."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = tn.as_tensor(y_hat)
    if y.ndim == 1:
        y = y[None, :]
    if y_hat.ndim == 1:
        y_hat = tn.reshape(y_hat, (1, -1))
    if y.shape != y_hat.shape:
        raise ShapeError(f"multilabel labels {y.shape} vs predictions {y_hat.shape}")
    return _bce(y, y_hat).mean(axis=-1).mean()


def multiclass_loss(y, y_hat) -> Tensor:
    """-log y_hat[y], averaged over the batch."""
    y = np.atleast_1d(np.asarray(y))
    y_hat = tn.as_tensor(y_hat)
    if y_hat.ndim == 1:
        y_hat = tn.reshape(y_hat, (1, -1))
    C = y_hat.shape[-1]
    if np.any(y < 0) or np.any(y >= C):
        raise LabelError(f"class labels must lie in [0, {C})")
    picked = y_hat[np.arange(len(y)), y.astype(int)]
    return -tn.log(_clamped(picked)).mean()


def regression_loss(target, pred, valid_mask=None) -> Tensor:
    """Squared error summed over valid steps, divided by the valid-step count."""
    target = np.asarray(target, dtype=np.float64)
    pred = tn.as_tensor(pred)
    if target.shape != pred.shape:
        raise ShapeError(f"targets {target.shape} vs predictions {pred.shape}")
    diff = pred - Tensor(target)
    mask = np.ones(target.shape) if valid_mask is None else valid_mask
    return _masked_mean(diff * diff, mask)


def multitask_loss(losses: Mapping[str, Tensor | float], weights: MultiTaskWeights | Mapping[str, float]) -> Tensor:
    """sum_k lambda_k * loss_k over the tasks present in ``losses``."""
    w = weights.as_dict() if isinstance(weights, MultiTaskWeights) else dict(weights)
    total: Tensor | None = None
    for task, loss in losses.items():
        if task not in w:
            raise ConfigError(f"no multi-task weight for task {task!r}")
        term = tn.as_tensor(loss) * w[task]
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("multitask_loss needs at least one task loss")
    return total


# -- heads --------------------------------------------------------------------


class TaskHead:
    """Linear layer plus output nonlinearity for one task.

    Sequence-level kinds read the dense-interpolated d*M vector; per-step
    kinds are applied position-wise to the encoder output.
    """

    def __init__(self, kind: str, d: int, M: int, rng: np.random.Generator, T_max: int | None = None):
        self.kind = kind
        self.name, self.n_out = parse_head_kind(kind)
        self.per_step = self.name.startswith("per-step")
        self.M = M
        in_dim = d if self.per_step else d * M
        limit = math.sqrt(6.0 / (in_dim + self.n_out))
        if not self.per_step and T_max is not None and T_max > M:
            # each interpolation slot accumulates about T/M steps, so shrink the
            # init to keep the starting logits O(1) for long sequences
            limit *= M / T_max
        self.weight = Tensor(rng.uniform(-limit, limit, (in_dim, self.n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(self.n_out), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def logits(self, S: Tensor, lengths) -> Tensor:
        if self.per_step:
            return tn.matmul(S, self.weight) + self.bias
        B, T, _ = S.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        u = dense_interpolate(S, batch_weights(lengths, T, self.M))
        return tn.matmul(u, self.weight) + self.bias

    def __call__(self, S: Tensor, lengths=None) -> Tensor:
        """Probabilities (classification) or non-negative values (regression).

        binary -> [B]; multilabel -> [B, K]; multiclass -> [B, C];
        per-step kinds -> [B, T].
        """
        z = self.logits(S, lengths)
        if self.name == "binary":
            return tn.softmax_last(z)[:, 1]
        if self.name == "multilabel":
            return tn.sigmoid(z)
        if self.name == "multiclass":
            return tn.softmax_last(z)
        if self.name == "per-step-binary":
            return tn.softmax_last(z)[..., 1]
        return tn.relu(z)[..., 0]

    def loss(self, pred: Tensor, labels, step_mask=None) -> Tensor:
        if self.name == "binary":
            return binary_loss(labels, pred)
        if self.name == "multilabel":
            return multilabel_loss(labels, pred)
        if self.name == "multiclass":
            return multiclass_loss(labels, pred)
        if self.name == "per-step-binary":
            return binary_loss(labels, pred, mask=step_mask)
        return regression_loss(labels, pred, step_mask)
