"""Datasets: synthetic task generators, NDJSON ingestion and standardization.

Generators (all deterministic given the seed; labels follow closed-form rules):

``windowed-binary``
    x ~ N(0, 1).  label = 1 iff the mean of channel ``channel`` over the last
    ``window`` steps exceeds ``Phi^-1(1 - skew) / sqrt(window)``, so the
    expected positive rate is ``skew``.
``long-range-multilabel``
    K labels.  Step ``motif_pos`` carries a flag (channel 0) and K motif bits
    (channels 1..K, as +-1); the final step carries K cue bits (channels
    K+1..2K).  Every other entry of those channels is zero; remaining
    channels are N(0, 1) noise.  label_k = motif_k XOR cue_k, so it cannot be
    read off either end of the sequence alone.
``per-step-binary``
    a_1 = x_1[c], a_t = rho * a_{t-1} + x_t[c]; label_t = 1 iff
    a_t > Phi^-1(1 - skew) * sqrt(1 / (1 - rho**2)).  Lengths are uniform on
    [min_length, T]; padding is excluded through ``step_mask``.
``length-buckets``
    Remaining stay (days) ~ Gamma(1.5, mean_days / 1.5).  Channel 0 at step t
    is (remaining + (T - t) / steps_per_day) / 7 plus N(0, 0.05**2) noise;
    other channels are N(0, 1).  label = bucket of the remaining days over
    the edges (1, 2, 3, 4, 5, 6, 7, 8, 14): one bucket under a day, seven
    day-long buckets, 8-14 days and over 14 days.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Callable

import numpy as np

from .config import parse_head_kind, parse_kv_text, sub_rng
from .errors import ConfigError, ParseError, UsageError

NDJSON_FORMAT = "sand-ndjson"
NDJSON_VERSION = 1
MANIFEST_VERSION = 1
BUCKET_EDGES_DAYS = (1, 2, 3, 4, 5, 6, 7, 8, 14)
N_BUCKETS = len(BUCKET_EDGES_DAYS) + 1


@dataclass
class SequenceBatch:
    """n padded sequences with their labels.

    ``labels`` is [n] for binary / multiclass, [n, K] for multilabel and
    [n, T] for per-step kinds.  ``values`` holds the continuous quantity
    behind bucketed labels when it is known.  The last ``n_indicator``
    channels are missing-value indicators.
    """

    x: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    kind: str
    ids: list[str]
    step_mask: np.ndarray | None = None
    values: np.ndarray | None = None
    n_indicator: int = 0

    def __post_init__(self):
        if self.step_mask is None and self.per_step:
            self.step_mask = length_mask(self.lengths, self.T)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def R(self) -> int:
        return self.x.shape[2]

    @property
    def per_step(self) -> bool:
        return parse_head_kind(self.kind)[0].startswith("per-step")

    def subset(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            x=self.x[idx],
            lengths=self.lengths[idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in idx],
            step_mask=None if self.step_mask is None else self.step_mask[idx],
            values=None if self.values is None else self.values[idx],
        )


def length_mask(lengths, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


# -- manifest ------------------------------------------------------------------


@dataclass
class DatasetManifest:
    generator: str
    n: int
    T: int
    R: int
    seed: int
    skew: float = 0.5
    params: dict[str, float] = field(default_factory=dict)
    splits: tuple[float, ...] = (0.7, 0.15, 0.15)
    counts: dict[str, int] = field(default_factory=dict)
    kind: str = ""

    def to_text(self) -> str:
        lines = [
            f"version = {MANIFEST_VERSION}",
            f"generator = {self.generator}",
            f"kind = {self.kind}",
            f"n = {self.n}",
            f"T = {self.T}",
            f"R = {self.R}",
            f"seed = {self.seed}",
            f"skew = {self.skew!r}",
            "splits = " + ",".join(repr(float(s)) for s in self.splits),
        ]
        lines += [f"param.{k} = {v!r}" for k, v in sorted(self.params.items())]
        lines += [f"count.{k} = {v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = parse_kv_text(text)
        try:
            return cls(
                generator=kv["generator"],
                n=int(kv["n"]),
                T=int(kv["T"]),
                R=int(kv["R"]),
                seed=int(kv["seed"]),
                skew=float(kv.get("skew", 0.5)),
                params={k[6:]: _num(v) for k, v in kv.items() if k.startswith("param.")},
                splits=tuple(float(s) for s in kv.get("splits", "0.7,0.15,0.15").split(",")),
                counts={k[6:]: int(v) for k, v in kv.items() if k.startswith("count.")},
                kind=kv.get("kind", ""),
            )
        except KeyError as exc:
            raise ParseError(f"manifest missing key {exc.args[0]!r}") from None


def _num(v: str):
    f = float(v)
    return int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f


# -- generators ------------------------------------------------------------------


def windowed_binary_threshold(skew: float, window: int) -> float:
    return NormalDist().inv_cdf(1.0 - skew) / math.sqrt(window)


def per_step_threshold(skew: float, rho: float) -> float:
    return NormalDist().inv_cdf(1.0 - skew) * math.sqrt(1.0 / (1.0 - rho * rho))


def bucket_of_days(days) -> np.ndarray:
    return np.searchsorted(np.asarray(BUCKET_EDGES_DAYS, dtype=float), np.asarray(days, dtype=float), side="right")


def _windowed_binary(n, T, R, rng, skew, window=8, channel=0):
    window, channel = int(window), int(channel)
    if not 1 <= window <= T or not 0 <= channel < R:
        raise ConfigError("windowed-binary needs 1 <= window <= T and channel < R")
    x = rng.standard_normal((n, T, R))
    thr = windowed_binary_threshold(skew, window)
    y = (x[:, T - window :, channel].mean(axis=1) > thr).astype(np.int64)
    return dict(x=x, labels=y, kind="binary"), dict(window=window, channel=channel)


def _long_range_multilabel(n, T, R, rng, skew, K=3, motif_pos=1):
    K, motif_pos = int(K), int(motif_pos)
    if R < 2 * K + 1:
        raise ConfigError(f"long-range-multilabel with K={K} needs R >= {2 * K + 1}")
    if not 1 <= motif_pos < T:
        raise ConfigError("motif_pos must lie in [1, T)")
    x = np.zeros((n, T, R))
    x[:, :, 2 * K + 1 :] = rng.standard_normal((n, T, R - 2 * K - 1))
    motif = rng.integers(0, 2, (n, K))
    cue = rng.integers(0, 2, (n, K))
    p = motif_pos - 1
    x[:, p, 0] = 1.0
    x[:, p, 1 : K + 1] = 2.0 * motif - 1.0
    x[:, T - 1, K + 1 : 2 * K + 1] = 2.0 * cue - 1.0
    y = (motif != cue).astype(np.int64)
    return dict(x=x, labels=y, kind=f"multilabel:{K}"), dict(K=K, motif_pos=motif_pos)


def _per_step_binary(n, T, R, rng, skew, rho=0.8, channel=0, min_length=None):
    channel = int(channel)
    min_length = T if min_length is None else int(min_length)
    if not 1 <= min_length <= T:
        raise ConfigError("min_length must lie in [1, T]")
    x = rng.standard_normal((n, T, R))
    lengths = rng.integers(min_length, T + 1, n)
    mask = length_mask(lengths, T)
    x *= mask[:, :, None]
    acc = np.zeros((n, T))
    acc[:, 0] = x[:, 0, channel]
    for t in range(1, T):
        acc[:, t] = rho * acc[:, t - 1] + x[:, t, channel]
    y = ((acc > per_step_threshold(skew, rho)) & (mask > 0)).astype(np.int64)
    return (
        dict(x=x, labels=y, kind="per-step-binary", lengths=lengths, step_mask=mask),
        dict(rho=float(rho), channel=channel, min_length=min_length),
    )


def _length_buckets(n, T, R, rng, skew, steps_per_day=24, mean_days=3.0):
    steps_per_day = int(steps_per_day)
    remaining = rng.gamma(1.5, float(mean_days) / 1.5, n)
    x = rng.standard_normal((n, T, R))
    t = np.arange(1, T + 1)
    x[:, :, 0] = (remaining[:, None] + (T - t)[None, :] / steps_per_day) / 7.0 + 0.05 * x[:, :, 0]
    y = bucket_of_days(remaining).astype(np.int64)
    return (
        dict(x=x, labels=y, kind=f"multiclass:{N_BUCKETS}", values=remaining),
        dict(steps_per_day=steps_per_day, mean_days=float(mean_days)),
    )


GENERATORS: dict[str, Callable] = {
    "windowed-binary": _windowed_binary,
    "long-range-multilabel": _long_range_multilabel,
    "per-step-binary": _per_step_binary,
    "length-buckets": _length_buckets,
}


def generate(task: str, n: int, T: int, R: int, seed: int, skew: float = 0.5,
             splits: tuple[float, ...] = (0.7, 0.15, 0.15), **params) -> tuple[SequenceBatch, DatasetManifest]:
    if task not in GENERATORS:
        raise UsageError(f"unknown generator {task!r}; choose from {sorted(GENERATORS)}")
    if n < 1 or T < 1 or R < 1:
        raise ConfigError("n, T and R must be positive")
    if not 0.0 < skew < 1.0:
        raise ConfigError("skew must lie in (0, 1)")
    rng = sub_rng(seed, f"data:{task}")
    fields, used = GENERATORS[task](n, T, R, rng, skew, **params)
    lengths = fields.pop("lengths", np.full(n, T))
    ds = SequenceBatch(
        ids=[f"{task}-{i:06d}" for i in range(n)],
        lengths=np.asarray(lengths, dtype=np.int64),
        **fields,
    )
    manifest = DatasetManifest(task, n, T, R, seed, skew, used, tuple(splits), kind=ds.kind)
    return ds, manifest


def split(ds: SequenceBatch, fractions=(0.7, 0.15, 0.15), seed: int = 0,
          names=("train", "val", "test")) -> dict[str, SequenceBatch]:
    """Seeded disjoint split.  Every split but the last gets round(f * n)
    samples; the last takes the remainder."""
    if len(fractions) != len(names) or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions {fractions} must be non-negative and sum to 1")
    n = len(ds)
    order = sub_rng(seed, "split").permutation(n)
    out, start = {}, 0
    for i, (name, f) in enumerate(zip(names, fractions)):
        stop = n if i == len(names) - 1 else min(n, start + int(round(f * n)))
        out[name] = ds.subset(np.sort(order[start:stop]))
        start = stop
    return out


def generate_splits(manifest: DatasetManifest) -> dict[str, SequenceBatch]:
    """Rebuild every split described by a manifest."""
    ds, _ = generate(manifest.generator, manifest.n, manifest.T, manifest.R, manifest.seed,
                     manifest.skew, manifest.splits, **manifest.params)
    parts = split(ds, manifest.splits, manifest.seed)
    manifest.counts = {k: len(v) for k, v in parts.items()}
    return parts


# -- NDJSON ----------------------------------------------------------------------

_LABEL_FIELD = {
    "binary": "label",
    "multiclass": "label",
    "multilabel": "labels",
    "per-step-binary": "step_labels",
    "per-step-regression": "step_targets",
}


def save_ndjson(ds: SequenceBatch, path: str | Path, **header) -> None:
    """One header record then one record per sequence.  Missing entries
    (indicator = 1) are written back as null."""
    kind_name, _ = parse_head_kind(ds.kind)
    field_name = _LABEL_FIELD[kind_name]
    raw_R = ds.R - ds.n_indicator
    head = {"format": NDJSON_FORMAT, "version": NDJSON_VERSION, "task": ds.kind, "R": raw_R, **header}
    with open(path, "w") as fh:
        fh.write(json.dumps(head) + "\n")
        for i, rid in enumerate(ds.ids):
            L = int(ds.lengths[i])
            series = ds.x[i, :L, :raw_R].tolist()
            if ds.n_indicator:
                missing = ds.x[i, :L, raw_R:] > 0.5
                series = [[None if missing[t, j] else v for j, v in enumerate(row)] for t, row in enumerate(series)]
            rec = {"id": rid, "series": series}
            lab = ds.labels[i]
            if kind_name in ("binary", "multiclass"):
                rec[field_name] = int(lab)
            elif kind_name == "multilabel":
                rec[field_name] = [int(v) for v in lab]
            elif kind_name == "per-step-binary":
                rec[field_name] = [int(v) for v in lab[:L]]
            else:
                rec[field_name] = [float(v) for v in lab[:L]]
            if ds.values is not None:
                rec["value"] = float(ds.values[i])
            fh.write(json.dumps(rec) + "\n")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def load_ndjson(path: str | Path, indicators: bool = True) -> SequenceBatch:
    """Read an NDJSON dataset.  Nulls become 0 and, with ``indicators``, a
    companion 0/1 channel per variable is appended (R -> 2R)."""
    kind = None
    R = None
    records = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", lineno)
        if rec.get("format") == NDJSON_FORMAT:
            if int(rec.get("version", 0)) != NDJSON_VERSION:
                raise ParseError(f"unsupported NDJSON version {rec.get('version')}", lineno)
            kind = rec.get("task")
            R = rec.get("R")
            continue
        records.append((lineno, rec))
    if not records:
        raise ParseError("no data records")
    if kind is None:
        kind = _infer_kind(records)
    kind_name, n_out = parse_head_kind(kind)
    field_name = _LABEL_FIELD[kind_name]

    series_list, labels, ids, values = [], [], [], []
    for lineno, rec in records:
        series = rec.get("series")
        if not isinstance(series, list) or not series:
            raise ParseError("'series' must be a non-empty list of rows", lineno)
        for t, row in enumerate(series):
            if not isinstance(row, list):
                raise ParseError(f"series row {t} is not a list", lineno)
            if R is None:
                R = len(row)
            if len(row) != R:
                raise ParseError(f"ragged series: row {t} has {len(row)} values, expected {R}", lineno)
            for v in row:
                if v is not None and not _is_number(v):
                    raise ParseError(f"non-numeric entry {v!r} in row {t}", lineno)
        if field_name not in rec:
            raise ParseError(f"missing label field {field_name!r}", lineno)
        lab = rec[field_name]
        L = len(series)
        if kind_name in ("binary", "multiclass"):
            if not _is_number(lab) or int(lab) != lab or not 0 <= lab < n_out:
                raise ParseError(f"label {lab!r} is not a class in [0, {n_out})", lineno)
        else:
            want = n_out if kind_name == "multilabel" else L
            if not isinstance(lab, list) or len(lab) != want or not all(_is_number(v) for v in lab):
                raise ParseError(f"{field_name!r} must be {want} numbers", lineno)
            if kind_name != "per-step-regression" and any(v not in (0, 1) for v in lab):
                raise ParseError(f"{field_name!r} entries must be 0 or 1", lineno)
        series_list.append(series)
        labels.append(lab)
        ids.append(str(rec.get("id", f"line{lineno}")))
        values.append(rec.get("value"))

    n = len(records)
    T = max(len(s) for s in series_list)
    lengths = np.array([len(s) for s in series_list], dtype=np.int64)
    x = np.zeros((n, T, 2 * R if indicators else R))
    for i, s in enumerate(series_list):
        raw = np.array([[np.nan if v is None else v for v in row] for row in s], dtype=np.float64)
        miss = np.isnan(raw)
        x[i, : len(s), :R] = np.where(miss, 0.0, raw)
        if indicators:
            x[i, : len(s), R:] = miss
    if kind_name in ("binary", "multiclass"):
        y = np.array(labels, dtype=np.int64)
    elif kind_name == "multilabel":
        y = np.array(labels, dtype=np.int64)
    else:
        y = np.zeros((n, T), dtype=np.int64 if kind_name == "per-step-binary" else np.float64)
        for i, lab in enumerate(labels):
            y[i, : len(lab)] = lab
    vals = np.array(values, dtype=np.float64) if all(v is not None for v in values) else None
    return SequenceBatch(x=x, lengths=lengths, labels=y, kind=kind, ids=ids, values=vals,
                         n_indicator=R if indicators else 0)


def _infer_kind(records) -> str:
    rec = records[0][1]
    for name in ("labels", "step_labels", "step_targets"):
        if name in rec:
            if name == "labels":
                return f"multilabel:{len(rec['labels'])}"
            return {"step_labels": "per-step-binary", "step_targets": "per-step-regression"}[name]
    labs = [r.get("label") for _, r in records if _is_number(r.get("label"))]
    top = int(max(labs)) if labs else 1
    return "binary" if top <= 1 else f"multiclass:{top + 1}"


def export_csv(ds: SequenceBatch, path: str | Path) -> None:
    """Long-format CSV (one row per valid step) for eyeballing a dataset."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t"] + [f"x{j}" for j in range(ds.R)] + ["label"])
        for i, rid in enumerate(ds.ids):
            lab = ds.labels[i]
            for t in range(int(ds.lengths[i])):
                if ds.per_step:
                    cell = lab[t]
                elif np.ndim(lab):
                    cell = " ".join(str(int(v)) for v in lab)
                else:
                    cell = lab
                w.writerow([rid, t + 1] + [repr(float(v)) for v in ds.x[i, t]] + [cell])


# -- standardization ------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: SequenceBatch, floor: float = 1e-8) -> "Standardizer":
        """Per-channel statistics over valid steps; indicator channels get (0, 1)."""
        valid = length_mask(ds.lengths, ds.T) > 0
        flat = ds.x[valid]
        mean = flat.mean(axis=0)
        std = np.maximum(flat.std(axis=0), floor)
        if ds.n_indicator:
            mean[-ds.n_indicator :] = 0.0
            std[-ds.n_indicator :] = 1.0
        return cls(mean, std)

    def apply(self, ds: SequenceBatch) -> SequenceBatch:
        valid = length_mask(ds.lengths, ds.T)[:, :, None]
        return replace(ds, x=((ds.x - self.mean) / self.std) * valid)

    def invert(self, ds: SequenceBatch) -> SequenceBatch:
        valid = length_mask(ds.lengths, ds.T)[:, :, None]
        return replace(ds, x=(ds.x * self.std + self.mean) * valid)


def standardize(ds: SequenceBatch, stats: Standardizer | None = None) -> tuple[SequenceBatch, Standardizer]:
    """Fit on ``ds`` when no statistics are given (i.e. pass the train split
    first), then apply."""
    stats = Standardizer.fit(ds) if stats is None else stats
    return stats.apply(ds), stats
