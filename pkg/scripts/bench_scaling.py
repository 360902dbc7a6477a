"""Time a forward+backward pass of the layer stack as T doubles."""

from __future__ import annotations

import argparse

from sand.cli import time_layer_stack


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", default="128,256,512")
    ap.add_argument("--r", type=int, default=16)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--N", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    Ts = [int(v) for v in args.T.split(",")]
    for masked in (True, False):
        prev = None
        for T in Ts:
            r = args.r if masked else T - 1
            ms = time_layer_stack(T, r, args.d, args.N, repeats=args.repeats, masked=masked)
            ratio = f"  x{ms / prev:.2f}" if prev else ""
            print(f"{'banded' if masked else 'full  '}  T={T:4d}  r={r:4d}  {ms:8.1f} ms{ratio}")
            prev = ms


if __name__ == "__main__":
    main()
