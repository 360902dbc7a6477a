"""``sand`` command line: gen, train, eval, bench, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.  ``SAND_OUT_DIR`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfig, RunConfig, TrainConfig, read_run_config, sub_rng, update_dataclass
from .data import SequenceBatch, Standardizer, generate, load_ndjson, save_ndjson, split
from .encoder import Encoder
from .errors import DataError, SandError, TrainingDiverged, UsageError
from .heads import MultiTaskWeights
from .metrics import HEADLINE
from .model import SandModel
from .tensor import backward
from .train import evaluate, train

log = logging.getLogger("sand")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SPLITS = ("train", "val", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def default_out_dir(sub: str) -> Path:
    return Path(os.environ.get("SAND_OUT_DIR", "sand_out")) / sub


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pairs(items: list[str] | None, flag: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{flag} expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _prepare_out(path: Path, files: list[str], force: bool) -> None:
    existing = [f for f in files if (path / f).exists()]
    if existing and not force:
        raise UsageError(f"{path / existing[0]} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


# -- gen ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    params = {}
    for k, v in _pairs(args.param, "--param").items():
        f = float(v)
        params[k] = int(f) if f.is_integer() and "." not in v else f
    out = Path(args.out) if args.out else default_out_dir("data")
    names = SPLITS if len(args.split) == 3 else tuple(f"split{i}" for i in range(len(args.split)))
    files = [f"{s}.ndjson" for s in names] + ["manifest.txt"]
    _prepare_out(out, files, args.force)
    ds, manifest = generate(args.task, args.n, args.T, args.R, args.seed, args.skew, tuple(args.split), **params)
    parts = split(ds, manifest.splits, manifest.seed, names)
    manifest.counts = {k: len(v) for k, v in parts.items()}
    for name, part in parts.items():
        save_ndjson(part, out / f"{name}.ndjson", split=name, generator=args.task, seed=args.seed)
    (out / "manifest.txt").write_text(manifest.to_text())
    width = max(len(args.task), 4)
    print(f"{'Task':<{width}}  " + "  ".join(f"{n:>8}" for n in names))
    print(f"{args.task:<{width}}  " + "  ".join(f"{manifest.counts[n]:>8}" for n in names))
    print(f"wrote {len(parts)} splits and manifest.txt to {out}")
    return EXIT_OK


# -- shared loading ---------------------------------------------------------------


def _load_split(path: Path, split_name: str, indicators: bool) -> SequenceBatch:
    if path.is_dir():
        path = path / f"{split_name}.ndjson"
    if not path.exists():
        raise DataError(f"dataset file {path} not found")
    return load_ndjson(path, indicators=indicators)


def _pad_to(ds: SequenceBatch, T: int) -> SequenceBatch:
    if ds.T >= T:
        return ds
    pad = T - ds.T
    x = np.pad(ds.x, ((0, 0), (0, pad), (0, 0)))
    step_mask = None if ds.step_mask is None else np.pad(ds.step_mask, ((0, 0), (0, pad)))
    labels = np.pad(ds.labels, ((0, 0), (0, pad))) if ds.per_step else ds.labels
    return replace(ds, x=x, labels=labels, step_mask=step_mask)


def _load_pair(path: Path, indicators: bool) -> tuple[SequenceBatch, SequenceBatch]:
    tr = _load_split(path, "train", indicators)
    va = _load_split(path, "val", indicators)
    if tr.kind != va.kind or tr.R != va.R:
        raise DataError(f"train ({tr.kind}, R={tr.R}) and val ({va.kind}, R={va.R}) splits disagree")
    T = max(tr.T, va.T)
    return _pad_to(tr, T), _pad_to(va, T)


# -- train -------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    run = read_run_config(args.config) if args.config else RunConfig()
    overrides = _pairs(args.set, "--set")
    for flag, key in (("lr", "lr"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    seed = overrides.pop("seed", None)
    if seed is not None:
        overrides.setdefault("model.seed", seed)
        overrides.setdefault("train.seed", seed)
    model_kv = {k.split(".", 1)[-1]: v for k, v in overrides.items() if not k.startswith("train.")}
    train_kv = {k.split(".", 1)[-1]: v for k, v in overrides.items() if not k.startswith("model.")}
    model_fields = set(ModelConfig.__dataclass_fields__)
    train_fields = set(TrainConfig.__dataclass_fields__)
    for k in set(model_kv) | set(train_kv):
        if k not in model_fields and k not in train_fields:
            raise UsageError(f"unknown config key {k!r}")
    update_dataclass(run.model, {k: v for k, v in model_kv.items() if k in model_fields})
    update_dataclass(run.train, {k: v for k, v in train_kv.items() if k in train_fields})
    return run


def _lambdas(run: RunConfig, tasks: list[str], cli: dict[str, str]) -> dict[str, float]:
    defaults = MultiTaskWeights().as_dict()
    alias = MultiTaskWeights.ALIASES
    given = {alias.get(k, k): float(v) for k, v in run.lambdas.items()}
    cli_given = {alias.get(k, k): float(v) for k, v in cli.items()}
    given.update(cli_given)
    out = {}
    for t in tasks:
        if t in given:
            out[t] = given[t]
        elif t in defaults:
            out[t] = defaults[t]
        else:
            raise UsageError(f"no loss weight for task {t!r}; pass --lambda {t}=VALUE")
    unknown = sorted(set(cli_given) - set(tasks))
    if unknown:
        raise UsageError(f"loss weight given for unknown task(s): {', '.join(unknown)}")
    return out


def build_and_train(run: RunConfig, data: dict[str, tuple[SequenceBatch, SequenceBatch]],
                    weights: dict[str, float] | None = None, standardize_inputs: bool = False,
                    history_path: Path | None = None, header: dict | None = None):
    """Fit a model whose input width and head kinds follow the datasets."""
    first = next(iter(data.values()))[0]
    stats = None
    if standardize_inputs:
        stats = Standardizer.fit(first)
        data = {h: (stats.apply(tr), stats.apply(va)) for h, (tr, va) in data.items()}
    T = max(max(tr.T, va.T) for tr, va in data.values())
    cfg = replace(run.model, R=first.R, T_max=max(run.model.T_max, T))
    if len(data) == 1 and "main" in data:
        cfg = replace(cfg, head_kind=first.kind)
    heads = {h: (tr.kind, cfg.M) for h, (tr, _) in data.items()}
    model = SandModel(cfg, heads)
    if stats is not None:
        model.meta["standardize.mean"] = stats.mean
        model.meta["standardize.std"] = stats.std
    result = train(model, data, run.train, weights, history_path, header)
    return model, result


def cmd_train(args) -> int:
    run = _run_config(args)
    indicators = not args.no_indicators
    if args.multi_task:
        tasks = _pairs(args.task, "--task")
        if not tasks:
            raise UsageError("--multi-task needs at least one --task NAME=DIR")
        data = {name: _load_pair(Path(p), indicators) for name, p in tasks.items()}
        R = {tr.R for tr, _ in data.values()}
        if len(R) != 1:
            raise DataError(f"multi-task datasets must share the channel count, got {sorted(R)}")
        weights = _lambdas(run, list(data), _pairs(args.weight, "--lambda"))
    else:
        if not args.data:
            raise UsageError("train needs --data DIR (or --multi-task with --task)")
        data = {"main": _load_pair(Path(args.data), indicators)}
        weights = {"main": 1.0}
    out = Path(args.out) if args.out else default_out_dir("run")
    _prepare_out(out, ["model.ckpt", "history.csv", "metrics.txt"], args.force)
    header = {"command": "train", "heads": ",".join(data)}
    try:
        model, result = build_and_train(run, data, weights, args.standardize, out / "history.csv", header)
    except TrainingDiverged as exc:
        if exc.result is not None:
            exc.result.model.info["diverged"] = "1"
            exc.result.model.save(out / "model.ckpt")
        raise
    model.info.update({"indicators": str(int(indicators)), "best_epoch": str(result.best_epoch)})
    model.save(out / "model.ckpt")
    lines = [f"best_epoch = {result.best_epoch}", f"stopped_early = {int(result.stopped_early)}"]
    for head, (_, va) in data.items():
        report = evaluate(model, head, va)
        metric = run.train.metric or HEADLINE[model.heads[head].name]
        print(f"{head}: validation {metric} = {report.values[metric]:.4f} (best epoch {result.best_epoch})")
        lines += [f"{head}.{k} = {v!r}" for k, v in report.values.items()]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote model.ckpt, history.csv, metrics.txt to {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = SandModel.load(args.checkpoint)
    indicators = model.info.get("indicators", "1") == "1"
    ds = _load_split(Path(args.data), args.split, indicators)
    head = args.head or next(iter(model.heads))
    if head not in model.heads:
        raise UsageError(f"checkpoint has no head {head!r}; heads: {', '.join(model.heads)}")
    if "standardize.mean" in model.meta:
        ds = Standardizer(model.meta["standardize.mean"], model.meta["standardize.std"]).apply(ds)
    report = evaluate(model, head, ds)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# -- bench -------------------------------------------------------------------------


def time_layer_stack(T: int, r: int, d: int, N: int, batch: int = 1, repeats: int = 5,
                     masked: bool = True, heads: int = 4, seed: int = 0) -> float:
    """Median forward+backward wall time (ms) of the encoder.

    ``masked`` uses the banded r-window kernel; otherwise every position
    attends to its whole past through the dense T x T kernel.
    """
    cfg = ModelConfig(R=max(1, min(8, d - 1)), d=d, N=N, heads=heads, r=r if masked else T - 1, M=1, T_max=T,
                      dropout_residue=0.0, dropout_attention=0.0, dropout_input=0.0,
                      attention="banded" if masked else "dense", seed=seed)
    enc = Encoder(cfg.validate(), sub_rng(seed, "init"))
    x = sub_rng(seed, "bench").standard_normal((batch, T, cfg.R))
    times = []
    for i in range(repeats + 1):
        start = time.perf_counter()
        out = enc(x, training=False)
        backward(out.sum())
        elapsed = (time.perf_counter() - start) * 1e3
        if i:  # first pass warms caches
            times.append(elapsed)
    return statistics.median(times)


def cmd_bench(args) -> int:
    rows = []
    for T, r, d, N in itertools.product(args.T, args.r, args.d, args.N):
        if args.no_mask:
            r_eff = T - 1
        else:
            if r >= T:
                raise UsageError(f"r={r} must be smaller than T={T} for the banded kernel")
            r_eff = r
        ms = time_layer_stack(T, r_eff, d, N, args.batch, args.repeats, masked=not args.no_mask, heads=args.heads)
        rows.append((T, r_eff, d, N, ms))
        print(f"T={T} r={r_eff} d={d} N={N}: {ms:.2f} ms", file=sys.stderr)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["T", "r", "d", "N", "median_ms"])
        for row in rows:
            w.writerow([*row[:4], f"{row[4]:.4f}"])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# -- sweep -------------------------------------------------------------------------


def sweep(run: RunConfig, data: tuple[SequenceBatch, SequenceBatch], grid: list[tuple[int, int, int]],
          workers: int = 1) -> list[tuple[int, int, int, str, float]]:
    """Train one model per (N, M, r); returns rows (N, M, r, metric, value)."""

    def one(point):
        N, M, r = point
        cfg = RunConfig(replace(run.model, N=N, M=M, r=r), run.train, run.lambdas)
        model, _ = build_and_train(cfg, {"main": data})
        metric = run.train.metric or HEADLINE[model.heads["main"].name]
        return (N, M, r, metric, evaluate(model, "main", data[1]).values[metric])

    if workers <= 1:
        return [one(p) for p in grid]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, grid))


def cmd_sweep(args) -> int:
    run = _run_config(args)
    data = _load_pair(Path(args.data), not args.no_indicators)
    grid = list(itertools.product(args.N, args.M, args.r))
    if args.max_runs and len(grid) > args.max_runs:
        print(f"warning: grid has {len(grid)} points; running only the first {args.max_runs}", file=sys.stderr)
        grid = grid[: args.max_runs]
    rows = sweep(run, data, grid, args.workers)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["N", "M", "r", "metric", "value"])
        for N, M, r, metric, value in rows:
            w.writerow([N, M, r, metric, repr(value)])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-indicators", action="store_true", help="do not append missing-value indicator channels")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sand", description="Masked self-attention with dense interpolation for time series.")
    parser.add_argument("--version", action="version", version=f"sand {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    from .data import GENERATORS

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=sorted(GENERATORS))
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--T", type=int, default=48)
    g.add_argument("--R", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skew", type=float, default=0.5, help="target positive rate")
    g.add_argument("--split", type=_float_list, default=[0.7, 0.15, 0.15])
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter")
    g.add_argument("--out", help="output directory")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    _add_train_flags(t)
    t.add_argument("--data", help="directory with train/val NDJSON splits")
    t.add_argument("--multi-task", action="store_true")
    t.add_argument("--task", action="append", metavar="NAME=DIR", help="task dataset (multi-task mode)")
    t.add_argument("--lambda", dest="weight", action="append", metavar="NAME=VALUE", help="task loss weight")
    t.add_argument("--standardize", action="store_true", help="z-score channels with train-split statistics")
    t.add_argument("--out", help="output directory")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="NDJSON file or split directory")
    e.add_argument("--split", default="test", help="split to read when --data is a directory")
    e.add_argument("--head", help="head to evaluate (default: the first)")
    e.add_argument("--out", help="write the key = value report here")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time encoder forward+backward")
    b.add_argument("--T", type=_int_list, default=[256, 512])
    b.add_argument("--r", type=_int_list, default=[16])
    b.add_argument("--d", type=_int_list, default=[64])
    b.add_argument("--N", type=_int_list, default=[1])
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--no-mask", action="store_true", help="full causal attention through the dense kernel")
    b.add_argument("--out", help="CSV path (default stdout)")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="grid over N, M and r")
    _add_train_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--N", type=_int_list, default=[1, 2])
    s.add_argument("--M", type=_int_list, default=[6, 12])
    s.add_argument("--r", type=_int_list, default=[16])
    s.add_argument("--max-runs", type=int, default=0, help="cap on grid points (0 = no cap)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_sweep)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except (SandError, OSError) as exc:
        print(f"sand: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
