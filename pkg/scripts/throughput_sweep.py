#!/usr/bin/env python3
"""Tokens/sec across the resolution ladder, reference vs blocked attention.

Absolute numbers are machine-specific; the interesting outputs are the
trend over resolutions and that the two paths agree numerically.
"""

import argparse

import numpy as np

from patchlm import bench
from patchlm.model import ModelConfig, init_params


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--window", type=float, default=5.0, help="seconds per cell")
    parser.add_argument("--batch", type=int, default=1)
    parser.add_argument("--text-tokens", type=int, default=100)
    parser.add_argument("--resolutions", default="448,512,768,1024")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    params = init_params(ModelConfig(), np.random.default_rng(args.seed))
    paths = {
        "reference": lambda s: bench.forward_logits_reference(params, s),
        "blocked": lambda s: bench.forward_logits_blocked(params, s),
    }
    print(f"{'resolution':>10} {'path':>10} {'tokens/s':>12} {'batches':>8}")
    rng = np.random.default_rng(args.seed + 1)
    for side in (int(s) for s in args.resolutions.split(",")):
        workload = bench.synthetic_workload(side, args.batch, args.text_tokens, rng)
        for name, fn in paths.items():
            rep = bench.measure_throughput(fn, workload, args.window)
            print(f"{side:>10} {name:>10} {rep.tokens_per_second:>12,.0f} {rep.batches_measured:>8}")
        case = workload[0].sequences[0]
        eq = bench.verify_equivalence(paths["reference"], paths["blocked"], [case])
        print(f"{'':>10} equivalence max |diff| = {eq.max_abs_diff:.2e} ({'ok' if eq.passed else 'FAIL'})")


if __name__ == "__main__":
    main()
