"""Command-line experiment harness.

Every command reads one JSON config (``--config``), applies ``--set`` overrides,
and writes under the output root (``--out``, else ``$SENSEMAP_OUT``, else the
config's ``out``). Exit codes: 0 ok, 1 config error, 2 runtime error,
3 acceptance check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .config import ExperimentConfig
from .datasetgen import compute_stats, generate_samples, read_dataset, read_index, write_dataset
from .explorer import run_exploration, run_frontier_baseline, write_trace
from .gridmap import ConfigError, TrinaryMap, decode_gt_image, encode_gt_image
from .metrics import pfid, plpips, reconstruction_accuracy, ssim
from .nnet import CheckpointError, NetPredictor, identity_predictor, load_checkpoint, oracle_predictor
from .simworld import generate_floorplan, sample_free_cell
from .training import (
    FeatureNet,
    TrainState,
    history_csv,
    load_train_state,
    samples_to_arrays,
    save_train_state,
    train,
)

log = logging.getLogger("sensemap")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
METHODS = ("frontier", "sensemap", "sensemap-large", "oracle", "identity")


class CheckFailed(Exception):
    pass


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# worlds


def cmd_gen_worlds(cfg: ExperimentConfig) -> Path:
    root = cfg.out_dir() / "worlds"
    root.mkdir(parents=True, exist_ok=True)
    maps = []
    for i, seed in enumerate(cfg.world_seeds()):
        data = encode_gt_image(generate_floorplan(cfg.world_config(seed)))
        name = f"world_{i:03d}.png"
        (root / name).write_bytes(data)
        maps.append({"file": name, "seed": seed, "sha256": _sha(data)})
    _dump_json(root / "manifest.json", {"config_hash": cfg.hash(), "world": cfg.to_json()["world"], "maps": maps})
    log.info("wrote %d worlds to %s", len(maps), root)
    return root


def load_worlds(cfg: ExperimentConfig) -> list[TrinaryMap]:
    root = cfg.out_dir() / "worlds"
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no world manifest in {root}; run gen-worlds first") from exc
    expected = cfg.world_seeds()
    seeds = [m["seed"] for m in manifest["maps"]]
    if seeds != expected:
        raise ConfigError(f"manifest seeds {seeds} do not match config seeds {expected}")
    out = []
    for m in manifest["maps"]:
        data = (root / m["file"]).read_bytes()
        if _sha(data) != m["sha256"]:
            raise ConfigError(f"{root / m['file']} does not match its manifest checksum")
        out.append(decode_gt_image(data))
    return out


# ---------------------------------------------------------------------------
# dataset


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    maps = load_worlds(cfg)
    samples = generate_samples(maps, cfg.sensor, cfg.episodes, cfg.stride, cfg.seed, cfg.budget)
    root = write_dataset(samples, cfg.out_dir() / "data", seeds=[cfg.seed, *cfg.world_seeds()],
                         config_hash=cfg.hash())
    print(f"{len(samples)} samples -> {root}")
    print(compute_stats(samples).table())
    return root


def _stats_json(stats) -> dict:
    return {f"{sec}/{name}": dataclasses.asdict(s) for sec, name, s in stats.rows()}


def cmd_stats(cfg: ExperimentConfig) -> dict:
    root = cfg.out_dir() / "data"
    stats = compute_stats(read_dataset(root))
    print(stats.table())
    report = {"config_hash": cfg.hash(), "dataset_config_hash": read_index(root).get("config_hash", ""),
              "n_samples": stats.n_samples, "stats": _stats_json(stats)}
    _dump_json(cfg.out_dir() / "stats.json", report)
    return report


def split_indices(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    order = np.random.default_rng([seed, 7501]).permutation(n)
    k = int(round(fraction * n))
    return sorted(order[:k].tolist()), sorted(order[k:].tolist())


# ---------------------------------------------------------------------------
# training


def _train_variant(cfg: ExperimentConfig, net_cfg, xs, ys, tag: str, resume: bool) -> TrainState:
    root = cfg.out_dir() / "train"
    ckpt = root / f"model{tag}.ckpt"
    state: Optional[TrainState] = None
    if resume and ckpt.exists():
        saved_cfg, state, extra = load_train_state(ckpt)
        if saved_cfg != net_cfg:
            raise ConfigError(f"{ckpt} was trained with a different network config")
        if extra.get("train_seed") != cfg.train.seed:
            raise ConfigError(f"{ckpt} was trained with a different seed")
        log.info("resuming %s from epoch %d", ckpt.name, state.epoch)
    h = cfg.hash()
    extra = {"config_hash": h, "train_seed": cfg.train.seed, "phi_seed": cfg.phi_seed}

    def checkpoint(st: TrainState) -> None:
        save_train_state(ckpt, net_cfg, st, extra)
        (root / f"history{tag}.csv").write_text(history_csv(st.history, h))
        rec = st.history[-1]
        log.info("%s epoch %d  hybrid %.5f  mse %.5f  feat %.5f", tag or "model", rec.epoch,
                 rec.mean_hybrid, rec.mean_mse, rec.mean_feat)

    state = train((xs, ys), net_cfg, cfg.train, cfg.loss, FeatureNet(cfg.phi_seed), state=state,
                  on_epoch=checkpoint)
    # Also covers a resume that had nothing left to do.
    save_train_state(ckpt, net_cfg, state, extra)
    (root / f"history{tag}.csv").write_text(history_csv(state.history, h))
    return state


def cmd_train(cfg: ExperimentConfig, large: bool = False, resume: bool = False) -> Path:
    data_root = cfg.out_dir() / "data"
    samples = read_dataset(data_root)
    train_idx, test_idx = split_indices(len(samples), cfg.train_fraction, cfg.seed)
    if not train_idx:
        raise ConfigError("training split is empty")
    root = cfg.out_dir() / "train"
    root.mkdir(parents=True, exist_ok=True)
    _dump_json(root / "split.json", {"config_hash": cfg.hash(), "seed": cfg.seed, "fraction": cfg.train_fraction,
                                     "train": train_idx, "test": test_idx})
    xs, ys = samples_to_arrays([samples[i] for i in train_idx])
    _train_variant(cfg, cfg.net, xs, ys, "", resume)
    if large:
        _train_variant(cfg, cfg.large_net(), xs, ys, "-large", resume)
    return root


# ---------------------------------------------------------------------------
# exploration


def _predictor(method: str, truth: TrinaryMap, nets: dict):
    if method == "oracle":
        return oracle_predictor(truth)
    if method == "identity":
        return identity_predictor
    return nets[method]


def _load_net(cfg: ExperimentConfig, method: str) -> NetPredictor:
    path = cfg.out_dir() / "train" / ("model-large.ckpt" if method == "sensemap-large" else "model.ckpt")
    if not path.exists():
        raise ConfigError(f"method {method!r} needs checkpoint {path}; run train{' --large' if 'large' in method else ''}")
    try:
        net_cfg, params, _, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    if net_cfg.side != 2 * cfg.sensor.range_L:
        raise ConfigError(f"{path}: network side {net_cfg.side} does not match sensor range {cfg.sensor.range_L}")
    return NetPredictor(net_cfg, params)


def _episode(job):
    cfg, method, map_idx, rep, truth, nets, trace_path = job
    start = sample_free_cell(truth, np.random.default_rng([cfg.seed, map_idx, rep]))
    if method == "frontier":
        res = run_frontier_baseline(truth, cfg.sensor, budget=cfg.budget, start=start)
        ra = None
    else:
        res = run_exploration(truth, cfg.sensor, _predictor(method, truth, nets), cfg.fusion, cfg.weights,
                              budget=cfg.budget, start=start)
        ra = reconstruction_accuracy(res.final_map, truth)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    header = {"config_hash": cfg.hash(), "method": method, "map": map_idx, "repeat": rep, "start": list(start),
              "terminated": res.terminated}
    write_trace(res, trace_path)
    body = trace_path.read_text()
    trace_path.write_text(json.dumps(header, sort_keys=True) + "\n" + body)
    return {"method": method, "map": map_idx, "repeat": rep, "start": list(start), "steps": res.steps,
            "distance": res.distance, "rho": res.rho, "ra": ra, "terminated": res.terminated,
            "curve": [r for _, r in res.coverage_curve]}


def _mean_curve(curves: list[list[float]]) -> np.ndarray:
    n = max(len(c) for c in curves)
    padded = np.array([c + [c[-1]] * (n - len(c)) for c in curves])
    return padded.mean(axis=0)


def _summarise(method: str, eps: list[dict]) -> dict:
    steps = np.array([e["steps"] for e in eps], dtype=float)
    ras = [e["ra"] for e in eps if e["ra"] is not None]
    return {
        "method": method,
        "episodes": len(eps),
        "completed": sum(e["terminated"] == "complete" for e in eps),
        "mean_steps": float(steps.mean()),
        "median_steps": float(np.median(steps)),
        "mean_distance": float(np.mean([e["distance"] for e in eps])),
        "mean_rho": float(np.mean([e["rho"] for e in eps])),
        "mean_ra": float(np.mean(ras)) if ras else None,
    }


REPORT_COLUMNS = ["Method", "Episodes", "Completed", "Avg Exploration Time(steps)", "Median Exploration Time(steps)",
                  "Avg Distance(cells)", "Avg Coverage ρ", "Avg RA"]


def _report_csv(rows: list[dict], h: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={h}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(REPORT_COLUMNS)
    for r in rows:
        wr.writerow([r["method"], r["episodes"], r["completed"], f"{r['mean_steps']:.2f}", f"{r['median_steps']:.1f}",
                     f"{r['mean_distance']:.2f}", f"{r['mean_rho']:.4f}",
                     "-" if r["mean_ra"] is None else f"{r['mean_ra']:.4f}"])
    return buf.getvalue()


def _curves_svg(path: Path, curves: dict[str, np.ndarray], h: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": h, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for method, c in curves.items():
            ax.plot(np.arange(len(c)), c, label=method)
        ax.set_xlabel("step")
        ax.set_ylabel("coverage ρ")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": f"config_hash={h}"})
        plt.close(fig)


def cmd_explore(cfg: ExperimentConfig, methods: list[str]) -> dict:
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    nets = {m: _load_net(cfg, m) for m in methods if m.startswith("sensemap")}
    maps = load_worlds(cfg)
    root = cfg.out_dir() / "explore"
    jobs = [(cfg, m, i, r, truth, nets, root / "traces" / m / f"map{i:03d}_rep{r:02d}.jsonl")
            for m in methods for i, truth in enumerate(maps) for r in range(cfg.repeats)]
    t0 = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            episodes = list(pool.map(_episode, jobs))
    else:
        episodes = [_episode(j) for j in jobs]
    log.info("%d episodes in %.1f s", len(episodes), time.perf_counter() - t0)

    h = cfg.hash()
    rows = [_summarise(m, [e for e in episodes if e["method"] == m]) for m in methods]
    curves = {m: _mean_curve([e["curve"] for e in episodes if e["method"] == m]) for m in methods}
    report = {"config_hash": h, "methods": rows,
              "episodes": [{k: v for k, v in e.items() if k != "curve"} for e in episodes]}
    _dump_json(root / "report.json", report)
    (root / "report.csv").write_text(_report_csv(rows, h))
    n = max(len(c) for c in curves.values())
    buf = io.StringIO()
    buf.write(f"# config_hash={h}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["step", *methods])
    for s in range(n):
        wr.writerow([s, *(f"{curves[m][min(s, len(curves[m]) - 1)]:.6f}" for m in methods)])
    (root / "curves.csv").write_text(buf.getvalue())
    _curves_svg(root / "curves.svg", curves, h)
    print(_report_csv(rows, h), end="")
    return report


def check_explore(report: dict, ratio: float = 0.9, floor: float = 0.85) -> list[str]:
    """Oracle vs frontier acceptance: returns the list of failed conditions."""
    rows = {r["method"]: r for r in report["methods"]}
    if "oracle" not in rows or "frontier" not in rows:
        return ["--check needs both the oracle and frontier methods"]
    o, f = rows["oracle"], rows["frontier"]
    fails = []
    if o["median_steps"] > ratio * f["median_steps"]:
        fails.append(f"oracle median steps {o['median_steps']} > {ratio} x frontier {f['median_steps']}")
    if o["mean_rho"] < floor:
        fails.append(f"oracle coverage {o['mean_rho']:.4f} < {floor}")
    if o["mean_ra"] < floor:
        fails.append(f"oracle RA {o['mean_ra']:.4f} < {floor}")
    return fails


# ---------------------------------------------------------------------------
# evaluation


def _metric_row(name: str, preds: list[np.ndarray], gts: list[np.ndarray], phi: FeatureNet) -> dict:
    ss = [ssim(p, g) for p, g in zip(preds, gts)]
    lp = [plpips(phi, p, g) for p, g in zip(preds, gts)]
    fp = np.stack([phi.pooled(p) for p in preds])
    fg = np.stack([phi.pooled(g) for g in gts])
    fid = pfid(fp, fg) if len(preds) > fp.shape[1] else None
    return {"method": name, "ssim": float(np.mean(ss)), "plpips": float(np.mean(lp)), "pfid": fid,
            "n_samples": len(preds)}


def cmd_eval(cfg: ExperimentConfig, split: str = "test") -> dict:
    samples = read_dataset(cfg.out_dir() / "data")
    split_path = cfg.out_dir() / "train" / "split.json"
    if not split_path.exists():
        raise ConfigError(f"{split_path} missing; run train first")
    idx = json.loads(split_path.read_text())[split]
    if not idx:
        raise ConfigError(f"{split} split is empty")
    chosen = [samples[i] for i in idx]
    gts = [s.gt.numeric() for s in chosen]
    phi = FeatureNet(cfg.phi_seed)
    rows = []
    for method in ("sensemap", "sensemap-large"):
        path = cfg.out_dir() / "train" / ("model-large.ckpt" if method.endswith("large") else "model.ckpt")
        if method == "sensemap" or path.exists():
            net = _load_net(cfg, method)
            rows.append(_metric_row(method, [net(s.obs).values for s in chosen], gts, phi))
    rows.append(_metric_row("identity", [identity_predictor(s.obs).values for s in chosen], gts, phi))
    report = {"config_hash": cfg.hash(), "phi_seed": cfg.phi_seed, "phi_digest": phi.digest(), "split": split,
              "rows": rows}
    _dump_json(cfg.out_dir() / "eval" / f"report-{split}.json", report)
    print(f"{'method':<16}{'SSIM':>10}{'pLPIPS':>10}{'pFID':>12}")
    for r in rows:
        fid = "-" if r["pfid"] is None else f"{r['pfid']:.5f}"
        print(f"{r['method']:<16}{r['ssim']:>10.4f}{r['plpips']:>10.4f}{fid:>12}")
    return report


def check_eval(report: dict) -> list[str]:
    rows = {r["method"]: r for r in report["rows"]}
    if rows["sensemap"]["ssim"] <= rows["identity"]["ssim"]:
        return [f"model SSIM {rows['sensemap']['ssim']:.4f} <= identity {rows['identity']['ssim']:.4f}"]
    return []


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--out", help="output root (overrides $%s and the config)" % cfgmod.OUT_ENV)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sensemap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-worlds", parents=[common], help="generate seeded floorplans")
    sub.add_parser("gen-data", parents=[common], help="collect observation/ground-truth pairs")
    t = sub.add_parser("train", parents=[common], help="train the predictor")
    t.add_argument("--large", action="store_true", help="also train the double-base variant")
    t.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    e = sub.add_parser("explore", parents=[common], help="compare exploration methods")
    e.add_argument("--methods", default="frontier,oracle", help="comma list from: " + ",".join(METHODS))
    e.add_argument("--check", action="store_true", help="exit 3 unless oracle beats frontier by 10%%")
    v = sub.add_parser("eval", parents=[common], help="SSIM / pLPIPS / pFID on a dataset split")
    v.add_argument("--split", choices=("train", "test"), default="test")
    v.add_argument("--check", action="store_true", help="exit 3 unless model SSIM beats identity")
    sub.add_parser("stats", parents=[common], help="dataset statistics tables")
    sub.add_parser("show-config", parents=[common], help="print the resolved config and its hash")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = cfgmod.resolve(args.config, args.set, args.out)
        if args.command == "show-config":
            print(json.dumps({**cfg.to_json(), "config_hash": cfg.hash()}, indent=2, sort_keys=True))
        elif args.command == "gen-worlds":
            cmd_gen_worlds(cfg)
        elif args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, large=args.large, resume=args.resume)
        elif args.command == "stats":
            cmd_stats(cfg)
        elif args.command == "explore":
            report = cmd_explore(cfg, [m.strip() for m in args.methods.split(",") if m.strip()])
            if args.check and (fails := check_explore(report)):
                raise CheckFailed("; ".join(fails))
        elif args.command == "eval":
            report = cmd_eval(cfg, args.split)
            if args.check and (fails := check_eval(report)):
                raise CheckFailed("; ".join(fails))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("runtime error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
