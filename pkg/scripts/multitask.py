"""Train ihm-like and dc-like heads jointly and separately; compare test AUROC."""

from __future__ import annotations

import argparse

from sand.config import ModelConfig, TrainConfig
from sand.data import generate, split
from sand.heads import MultiTaskWeights
from sand.model import SandModel
from sand.train import evaluate, train

TASKS = {"ihm": ("windowed-binary", "binary"), "dc": ("per-step-binary", "per-step-binary")}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--T", type=int, default=48)
    ap.add_argument("--R", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    data = {}
    for name, (task, _) in TASKS.items():
        ds, _ = generate(task, args.n, args.T, args.R, seed=args.seed)
        data[name] = split(ds, seed=args.seed)
    base = dict(R=args.R, d=32, N=2, heads=4, r=8, M=6, T_max=args.T, seed=0)
    tc = TrainConfig(lr=1e-3, batch_size=32, epochs=args.epochs, patience=0, seed=0)

    for name, (_, kind) in TASKS.items():
        m = SandModel(ModelConfig(**base), {name: (kind, 6)})
        train(m, {name: (data[name]["train"], data[name]["val"])}, tc)
        print(f"single {name}: test AUROC {evaluate(m, name, data[name]['test'])['auroc']:.3f}")

    joint = SandModel(ModelConfig(**base), {name: (kind, 6) for name, (_, kind) in TASKS.items()})
    res = train(joint, {k: (v["train"], v["val"]) for k, v in data.items()}, tc, MultiTaskWeights())
    print("joint loss per epoch:", " ".join(f"{h['train_loss']:.4f}" for h in res.history))
    for name in TASKS:
        print(f"joint  {name}: test AUROC {evaluate(joint, name, data[name]['test'])['auroc']:.3f}")


if __name__ == "__main__":
    main()
