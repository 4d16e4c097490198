"""Frontier baseline vs oracle-guided exploration on generated floorplans.

Prints per-map step counts and the median ratio. Usage:

    python3 scripts/run_efficiency.py --maps 20 --range 16
"""

import argparse
import statistics
import time

import numpy as np

from sensemap.explorer import run_exploration, run_frontier_baseline
from sensemap.metrics import reconstruction_accuracy
from sensemap.nnet import oracle_predictor
from sensemap.simworld import FloorplanConfig, SensorSpec, generate_floorplan, sample_free_cell


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--maps", type=int, default=20)
    ap.add_argument("--range", type=int, default=16, dest="range_L")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    spec = SensorSpec(args.range_L)
    base, orc = [], []
    t0 = time.perf_counter()
    print(f"{'map':>4} {'frontier':>9} {'oracle':>7} {'rho':>6} {'RA':>6}")
    for i in range(args.maps):
        truth = generate_floorplan(FloorplanConfig(width=args.size, height=args.size, seed=args.seed + i))
        start = sample_free_cell(truth, np.random.default_rng([args.seed, i]))
        b = run_frontier_baseline(truth, spec, start=start)
        o = run_exploration(truth, spec, oracle_predictor(truth), start=start)
        base.append(b.steps)
        orc.append(o.steps)
        ra = reconstruction_accuracy(o.final_map, truth)
        print(f"{i:>4} {b.steps:>9} {o.steps:>7} {o.rho:>6.3f} {ra:>6.3f}")
    mb, mo = statistics.median(base), statistics.median(orc)
    print(f"median frontier={mb} oracle={mo} ratio={mo / mb:.3f} ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
