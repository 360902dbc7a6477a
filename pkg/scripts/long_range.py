"""Compare receptive fields on the long-range multilabel task.

The label depends on a motif near the start of a length-100 sequence, so only
configurations with N*r >= T - 1 can see it from the last step.
"""

from __future__ import annotations

import argparse

from sand.config import ModelConfig, TrainConfig
from sand.data import Standardizer, generate, split
from sand.model import SandModel
from sand.train import evaluate, train


def run(N: int, r: int, data, T: int, R: int, epochs: int, seed: int) -> float:
    tr, va, te = data
    cfg = ModelConfig(R=R, d=32, N=N, heads=4, r=r, M=4, T_max=T, head_kind="multilabel:3",
                      dropout_residue=0.0, dropout_attention=0.0, dropout_input=0.0, seed=seed)
    model = SandModel(cfg)
    train(model, (tr, va), TrainConfig(lr=2e-3, batch_size=32, epochs=epochs, patience=5, seed=seed))
    return evaluate(model, "main", te)["macro_auc"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--R", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--configs", default="1:99,1:48,2:32", help="comma list of N:r")
    args = ap.parse_args()

    ds, _ = generate("long-range-multilabel", args.n, args.T, args.R, seed=args.seed, K=3, motif_pos=1)
    parts = split(ds, seed=args.seed)
    stats = Standardizer.fit(parts["train"])
    data = tuple(stats.apply(parts[k]) for k in ("train", "val", "test"))
    for item in args.configs.split(","):
        N, r = (int(v) for v in item.split(":"))
        auc = run(N, r, data, args.T, args.R, args.epochs, args.seed)
        print(f"N={N} r={r} N*r={N * r:3d}  test macro AUROC {auc:.3f}")


if __name__ == "__main__":
    main()
