"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel is run on inputs sized like the desk model (64 px images,
16x16 token grid, 32 channels). Prints one row per kernel with the best
time of each backend and the speed-up.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import timeit

import numpy as np

from swindr import _fallback, kernels


def cases(rng):
    x = rng.normal(size=(64 * 256, 32)).astype(np.float32)
    gamma, beta = np.ones(32, np.float32), np.zeros(32, np.float32)
    _, xhat, rstd = _fallback.layer_norm_fwd(x, gamma, beta, 1e-5)
    scores = rng.normal(size=(64 * 2 * 16 * 16, 16)).astype(np.float32)
    probs = _fallback.softmax_fwd(scores)
    img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
    luts = _fallback.clahe_luts(img, 8, 8, 2.0, 256)
    rgb = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
    c, s = math.cos(0.7), math.sin(0.7)
    return {
        "gelu_fwd": lambda m: m.gelu_fwd(x),
        "layer_norm_fwd": lambda m: m.layer_norm_fwd(x, gamma, beta, 1e-5),
        "layer_norm_bwd": lambda m: m.layer_norm_bwd(x, xhat, rstd, gamma),
        "softmax_fwd": lambda m: m.softmax_fwd(scores),
        "softmax_bwd": lambda m: m.softmax_bwd(scores, probs),
        "clahe_luts": lambda m: m.clahe_luts(img, 8, 8, 2.0, 256),
        "clahe_apply": lambda m: m.clahe_apply(img, luts),
        "rotate_bilinear": lambda m: m.rotate_bilinear(rgb, c, s),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    if not kernels.COMPILED:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':<18}{'compiled ms':>13}{'numpy ms':>11}{'speed-up':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for label, mod in (("compiled", kernels), ("numpy", _fallback)):
            t = timeit.Timer(lambda: fn(mod))
            number, _ = t.autorange()
            times[label] = min(t.repeat(args.repeat, number)) / number
        rows.append({"kernel": name, **times, "speedup": times["numpy"] / times["compiled"]})
        print(f"{name:<18}{times['compiled'] * 1e3:>13.3f}{times['numpy'] * 1e3:>11.3f}{rows[-1]['speedup']:>10.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
