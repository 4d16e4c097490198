"""Memorise 16 patches with a small network and compare SSIM against the raw observation."""

import argparse

import numpy as np
import torch

from sensemap.datasetgen import generate_samples
from sensemap.metrics import ssim
from sensemap.nnet import NetConfig, forward
from sensemap.simworld import FloorplanConfig, SensorSpec, generate_floorplan
from sensemap.training import TrainConfig, samples_to_arrays, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=250)
    ap.add_argument("--samples", type=int, default=16)
    args = ap.parse_args(argv)

    maps = [generate_floorplan(FloorplanConfig(seed=s)) for s in range(2)]
    pool = generate_samples(maps, SensorSpec(16, 360), stride=5, seed=0)
    samples = pool[:: max(1, len(pool) // args.samples)][: args.samples]
    xs, ys = samples_to_arrays(samples)
    cfg = NetConfig(side=32, base=4, patch=4)
    state = train((xs, ys), cfg, TrainConfig(epochs=args.epochs, batch_size=8, split_epoch=args.epochs))
    for r in state.history[:: max(1, args.epochs // 10)]:
        print(f"epoch {r.epoch:>4}  hybrid {r.mean_hybrid:.4f}  mse {r.mean_mse:.4f}  feat {r.mean_feat:.4f}")
    with torch.no_grad():
        pred = forward(cfg, state.params, xs).numpy()
    net = np.mean([ssim(pred[i, 0], ys[i, 0]) for i in range(len(xs))])
    ident = np.mean([ssim(s.obs.cells.numeric(), ys[i, 0]) for i, s in enumerate(samples)])
    print(f"SSIM network {net:.4f}  identity {ident:.4f}")


if __name__ == "__main__":
    main()
