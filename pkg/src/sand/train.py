"""Adam, chunked epoch construction, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .config import TrainConfig, parse_head_kind, sub_rng
from .data import SequenceBatch
from .errors import ConfigError, NonFiniteGradientError, ShapeError, TrainingDiverged
from .heads import MultiTaskWeights, multitask_loss
from .metrics import (
    HEADLINE,
    MetricsReport,
    auprc,
    auroc,
    headline_score,
    min_se_pplus,
    mse_mape,
    multilabel_auc,
    weighted_kappa,
)
from .model import SandModel
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad`` (missing = zero).
    """
    if grads is None:
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# -- chunking ------------------------------------------------------------------


def chunked_iterate(n: int, chunk_size: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle of range(n) cut into consecutive chunks (last one short)."""
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    perm = sub_rng(seed, "chunks").permutation(n)
    return [perm[i : i + chunk_size] for i in range(0, n, chunk_size)]


class ChunkSampler:
    """Hands out chunks without replacement; a new shuffled round of every
    chunk starts once the pool is exhausted."""

    def __init__(self, n: int, chunk_size: int, seed: int = 0):
        self.chunks = chunked_iterate(n, chunk_size, seed)
        self.rng = sub_rng(seed, "chunk-order")
        self.pool: list[int] = []

    def draw(self, k: int = 0) -> list[np.ndarray]:
        k = len(self.chunks) if k <= 0 else k
        out = []
        for _ in range(k):
            if not self.pool:
                self.pool = list(self.rng.permutation(len(self.chunks)))
            out.append(self.chunks[self.pool.pop()])
        return out


# -- prediction / evaluation ---------------------------------------------------


def predict(model: SandModel, head: str, ds: SequenceBatch, batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        outs = []
        for i in range(0, len(ds), batch_size):
            sl = slice(i, i + batch_size)
            outs.append(model(ds.x[sl], ds.lengths[sl], head=head).data)
    finally:
        model.training = was
    return np.concatenate(outs, axis=0)


def _batch_loss(model: SandModel, head: str, ds: SequenceBatch, idx=None) -> Tensor:
    sub = ds if idx is None else ds.subset(idx)
    th = model.heads[head]
    pred = th(model.encode(sub.x), sub.lengths)
    return th.loss(pred, sub.labels, sub.step_mask)


def validation_loss(model: SandModel, head: str, ds: SequenceBatch, batch_size: int = 256) -> float:
    """Loss over ``ds`` in eval mode, averaged over batches weighted by size."""
    was = model.training
    model.eval()
    try:
        total = 0.0
        for i in range(0, len(ds), batch_size):
            idx = np.arange(i, min(i + batch_size, len(ds)))
            total += _batch_loss(model, head, ds, idx).item() * len(idx)
    finally:
        model.training = was
    return total / len(ds)


def check_compatible(model: SandModel, head: str, ds: SequenceBatch) -> None:
    if model.heads[head].kind != ds.kind:
        raise ShapeError(f"head {head!r} is {model.heads[head].kind} but the dataset is {ds.kind}")
    if ds.R != model.cfg.R:
        raise ShapeError(f"dataset has R={ds.R} channels, model expects R={model.cfg.R}")


def evaluate(model: SandModel, head: str, ds: SequenceBatch, batch_size: int = 256) -> MetricsReport:
    """The metric set used for the head's task kind."""
    check_compatible(model, head, ds)
    kind_name, n_out = parse_head_kind(ds.kind)
    pred = predict(model, head, ds, batch_size)
    report = MetricsReport(ds.kind, counts={"n": len(ds)})
    v = report.values
    nan = float("nan")
    if kind_name in ("binary", "per-step-binary"):
        if kind_name == "per-step-binary":
            valid = ds.step_mask > 0
            scores, labels = pred[valid], ds.labels[valid]
            report.counts["steps"] = int(valid.sum())
        else:
            scores, labels = pred, ds.labels
        both = 0 < labels.sum() < len(labels)
        v["auroc"] = auroc(scores, labels) if both else nan
        v["auprc"] = auprc(scores, labels) if labels.sum() else nan
        v["min_se_pplus"] = min_se_pplus(scores, labels) if labels.sum() else nan
    elif kind_name == "multilabel":
        res = multilabel_auc(pred, ds.labels)
        v["micro_auc"], v["macro_auc"], v["weighted_auc"] = res.micro, res.macro, res.weighted
        report.counts["degenerate_labels"] = res.skipped
    elif kind_name == "multiclass":
        bins = pred.argmax(axis=1)
        v["kappa"] = weighted_kappa(ds.labels, bins, n_out)
        v["accuracy"] = float(np.mean(bins == ds.labels))
        means = model.meta.get(f"bucket_means.{head}")
        if ds.values is not None:
            if means is None:
                means = bucket_means(ds.labels, ds.values, n_out)
            err = mse_mape(ds.values, means[bins])
            v["mse"], v["mape"] = err.mse, err.mape
            report.counts["mape_excluded"] = err.excluded
    else:
        valid = ds.step_mask > 0
        err = mse_mape(ds.labels[valid], pred[valid])
        v["mse"], v["mape"] = err.mse, err.mape
        report.counts["mape_excluded"] = err.excluded
    return report


def bucket_means(labels, values, C: int) -> np.ndarray:
    """Mean continuous value per class; empty classes fall back to the overall mean."""
    labels = np.asarray(labels)
    values = np.asarray(values, dtype=np.float64)
    out = np.full(C, values.mean() if values.size else 0.0)
    for c in range(C):
        sel = labels == c
        if sel.any():
            out[c] = values[sel].mean()
    return out


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: SandModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    stopped_early: bool = False


def _batches(sampler: ChunkSampler, k: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for chunk in sampler.draw(k):
        chunk = chunk[rng.permutation(len(chunk))]
        out += [chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size)]
    return out


def train(
    model: SandModel,
    data: Mapping[str, tuple[SequenceBatch, SequenceBatch]] | tuple[SequenceBatch, SequenceBatch],
    cfg: TrainConfig,
    weights: Mapping[str, float] | None = None,
    history_path: str | Path | None = None,
    header: Mapping[str, object] | None = None,
) -> TrainResult:
    """Train ``model`` in place and return it restored to its best epoch.

    ``data`` maps head name -> (train split, validation split); a bare tuple
    means the model's only head.  Each optimizer step draws one batch per
    task and minimises sum_k weights[k] * loss_k (weights default to 1).
    The epoch length follows the task with the most batches; smaller tasks
    recycle their own chunk stream.
    """
    cfg.validate()
    if isinstance(data, tuple):
        data = {next(iter(model.heads)): data}
    if weights is None:
        weights = {k: 1.0 for k in data}
    elif isinstance(weights, MultiTaskWeights):
        weights = weights.as_dict()
    weights = {k: float(v) for k, v in weights.items()}
    missing = sorted(set(data) - set(weights))
    if missing:
        raise ConfigError(f"no loss weight for task(s) {', '.join(missing)}")
    for head, (tr, va) in data.items():
        check_compatible(model, head, tr)
        check_compatible(model, head, va)
    for head, (tr, _) in data.items():
        kind_name, n_out = parse_head_kind(tr.kind)
        if kind_name == "multiclass" and tr.values is not None:
            model.meta[f"bucket_means.{head}"] = bucket_means(tr.labels, tr.values, n_out)

    params = model.parameters()
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    model.rng = sub_rng(cfg.seed, "dropout")
    samplers = {h: ChunkSampler(len(tr), cfg.chunk_size, sub_seed(cfg.seed, h)) for h, (tr, _) in data.items()}
    shuffles = {h: sub_rng(cfg.seed, f"batches:{h}") for h in data}
    streams: dict[str, Iterator[np.ndarray]] = {}

    result = TrainResult(model)
    best_state = model.to_bytes()
    bad_epochs = 0
    writer = _HistoryWriter(history_path, data, weights, cfg, header)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        epoch_batches = {h: _batches(samplers[h], cfg.chunks_per_epoch, cfg.batch_size, shuffles[h]) for h in data}
        n_steps = max(len(b) for b in epoch_batches.values())
        for h in data:
            streams[h] = _cycle(epoch_batches[h], samplers[h], cfg, shuffles[h])
        # per task: (sum of batch loss * batch size, samples seen)
        per_task = {h: [0.0, 0] for h in data}
        try:
            for _ in range(n_steps):
                model.zero_grad()
                idx = {h: next(streams[h]) for h in data}
                losses = {h: _batch_loss(model, h, data[h][0], idx[h]) for h in data}
                total = multitask_loss(losses, weights)
                if not math.isfinite(total.item()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                backward(total)
                grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
                for k, g in grads.items():
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteGradientError(k)
                clip_global_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state)
                for h, l in losses.items():
                    per_task[h][0] += l.item() * len(idx[h])
                    per_task[h][1] += len(idx[h])
        except TrainingDiverged as exc:
            _restore(model, best_state)
            exc.result = result
            writer.close()
            raise

        task_train = {h: tot / count for h, (tot, count) in per_task.items()}
        row = {"epoch": epoch, "train_loss": float(sum(weights[h] * v for h, v in task_train.items()))}
        model.eval()
        scores, val_losses = [], []
        for h, (_, va) in data.items():
            report = evaluate(model, h, va)
            vl = validation_loss(model, h, va)
            val_losses.append(weights[h] * vl)
            kind_name = parse_head_kind(va.kind)[0]
            metric = cfg.metric or HEADLINE[kind_name]
            scores.append(headline_score(kind_name, report, metric))
            row[f"{h}.train_loss"] = task_train[h]
            row[f"{h}.val_loss"] = vl
            for k, val in report.values.items():
                row[f"{h}.{k}"] = val
        row["val_loss"] = float(np.sum(val_losses))
        row["score"] = float(np.mean(scores))
        result.history.append(row)
        writer.write(row)
        log.info("epoch %d train_loss %.5f score %.5f", epoch, row["train_loss"], row["score"])

        if row["score"] > result.best_score:
            result.best_score, result.best_epoch = row["score"], epoch
            best_state = model.to_bytes()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if cfg.patience > 0 and bad_epochs >= cfg.patience:
                result.stopped_early = True
                break

    writer.close()
    _restore(model, best_state)
    model.eval()
    return result


def sub_seed(seed: int, name: str) -> int:
    return int(sub_rng(seed, f"seed:{name}").integers(0, 2**31 - 1))


def _cycle(first: list[np.ndarray], sampler: ChunkSampler, cfg: TrainConfig, rng) -> Iterator[np.ndarray]:
    yield from first
    while True:
        yield from _batches(sampler, cfg.chunks_per_epoch, cfg.batch_size, rng)


def _restore(model: SandModel, blob: bytes) -> None:
    saved = SandModel.from_bytes(blob)
    for name, t in model.state().items():
        t.data = saved.state()[name].data
    model.meta = saved.meta


class _HistoryWriter:
    """CSV history: ``# key = value`` header lines, then one row per epoch."""

    def __init__(self, path, data, weights, cfg: TrainConfig, header):
        self.fh = None
        if path is None:
            return
        self.fh = open(path, "w", newline="")
        for k, v in (header or {}).items():
            self.fh.write(f"# {k} = {v}\n")
        for h, w in weights.items():
            self.fh.write(f"# lambda.{h} = {w!r}\n")
        self.fh.write(f"# lr = {cfg.lr!r}\n# batch_size = {cfg.batch_size}\n# seed = {cfg.seed}\n")
        self.writer = None

    def write(self, row: dict) -> None:
        if self.fh is None:
            return
        if self.writer is None:
            self.writer = csv.DictWriter(self.fh, fieldnames=list(row))
            self.writer.writeheader()
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()
            self.fh = None
