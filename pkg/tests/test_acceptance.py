"""End-to-end acceptance checks, one test per criterion.

Each test records a single ``criterion N PASS|FAIL`` line (shown in the pytest
terminal summary, or printed when this file is run as a script) and then
asserts on it.
"""

import json
import math
import time

import networkx as nx
import numpy as np
import pytest
import torch
from scipy import ndimage

from conftest import ACCEPTANCE_LINES, random_map
from sensemap.cli import main
from sensemap.config import SCHEMA
from sensemap.datasetgen import generate_samples
from sensemap.explorer import SQRT2, astar, extract_frontiers, run_exploration, run_frontier_baseline
from sensemap.gridmap import (
    FREE,
    OBSTACLE,
    UNCERTAIN,
    ProbMap,
    TrinaryMap,
    decode_gt_image,
    decode_obs_image,
    encode_gt_image,
    encode_obs_image,
    trinary_from_prob,
)
from sensemap.metrics import SsimConfig, frechet_distance, gaussian_window, pfid, reconstruction_accuracy, ssim
from sensemap.nnet import NetConfig, forward, init_params, oracle_predictor
from sensemap.simworld import FloorplanConfig, RobotState, SensorSpec, generate_floorplan, sample_free_cell
from sensemap.simworld import sense_and_update
from sensemap.training import (
    FeatureNet,
    LossWeights,
    TrainConfig,
    backward,
    finite_difference_gradients,
    hybrid_loss,
    samples_to_arrays,
    train,
)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. A* against Dijkstra


def _move_counts(path):
    diag = sum(1 for a, b in zip(path, path[1:]) if a[0] != b[0] and a[1] != b[1])
    return len(path) - 1 - diag, diag


def _grid_graph(free):
    g = nx.Graph()
    h, w = free.shape
    for r, c in zip(*np.nonzero(free)):
        g.add_node((r, c))
        for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and free[nr, nc]:
                if dr and dc and not (free[r + dr, c] or free[r, c + dc]):
                    continue
                g.add_edge((r, c), (nr, nc), weight=SQRT2 if dr and dc else 1.0)
    return g


def test_criterion_1_astar_matches_dijkstra():
    t0 = time.perf_counter()
    mismatches = pairs = 0
    for seed in range(100):
        rng = np.random.default_rng([1, seed])
        m = random_map(rng, 32, 32, 0.3)
        g = _grid_graph(m.mask(FREE))
        src = sample_free_cell(m, rng)
        dist, paths = nx.single_source_dijkstra(g, tuple(src))
        goals = [tuple(sample_free_cell(m, rng)) for _ in range(5)]
        for goal in goals:
            if goal not in dist:
                continue
            pairs += 1
            # Costs a + b*sqrt(2) with integer a, b are equal iff the counts are.
            if _move_counts(astar(m, src, goal)) != _move_counts(paths[goal]):
                mismatches += 1
    dt = time.perf_counter() - t0
    record(1, mismatches == 0 and dt < 10, f"{pairs} reachable pairs on 100 maps, {mismatches} cost mismatches, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. frontier extraction against the definition


def _brute_frontiers(prob, robot, tau=0.1, nu=0.5):
    v = prob.values
    free, unc = v < tau, (v >= tau) & (v <= nu)
    labels, _ = ndimage.label(free)
    reach = labels == labels[robot]
    up = np.pad(unc, 1)
    near = up[:-2, 1:-1] | up[2:, 1:-1] | up[1:-1, :-2] | up[1:-1, 2:]
    return {tuple(c) for c in np.argwhere(reach & near)}


def test_criterion_2_frontiers_match_definition():
    t0 = time.perf_counter()
    bad = 0
    for seed in range(200):
        rng = np.random.default_rng([2, seed])
        # Smooth blobs of free space in an uncertain field, plus noise and walls.
        v = ndimage.gaussian_filter(rng.random((32, 32)), 2.0)
        v = (v - v.min()) / (v.max() - v.min())
        v = np.where(v < 0.45, rng.uniform(0, 0.1, v.shape), v)
        v[rng.random((32, 32)) < 0.05] = 1.0
        v[rng.random((32, 32)) < 0.02] = 0.5
        prob = ProbMap(v)
        free = np.argwhere(trinary_from_prob(prob, 0.1, 0.5).mask(FREE))
        robot = tuple(free[rng.integers(len(free))])
        got = extract_frontiers(prob, robot, 0.1, 0.5)
        if len(got) != len(set(got)) or set(got) != _brute_frontiers(prob, robot):
            bad += 1
    dt = time.perf_counter() - t0
    record(2, bad == 0 and dt < 10, f"200 maps, {bad} mismatches, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. gradients against finite differences


def test_criterion_3_gradient_check():
    cfg = NetConfig(side=16, base=2, patch=4, depth=1, heads=2)
    w, phi = LossWeights(10.0, 1.0), FeatureNet(0)
    t0 = time.perf_counter()
    errors, per_tensor = [], []
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        params = init_params(cfg, seed)
        # Zero biases put many ReLU inputs exactly on the kink; move off it.
        for k in params:
            if k.endswith(".b"):
                params[k] = params[k] + torch.tensor(rng.uniform(-0.1, 0.1, params[k].shape))
        x = torch.tensor(np.eye(3)[rng.integers(0, 3, (16, 16))].transpose(2, 0, 1))
        gt = torch.tensor(rng.integers(0, 2, (1, 16, 16)).astype(np.float64))
        analytic = backward(cfg, params, x, gt, w, phi)
        numeric = finite_difference_gradients(lambda q: hybrid_loss(w, phi, forward(cfg, q, x), gt), params,
                                              h=1e-5, chunk=512)
        scale = max(numeric[n].abs().max().item() for n in numeric)
        errors.append(max((analytic[n] - numeric[n]).abs().max().item() for n in numeric) / scale)
        per_tensor.append(max((analytic[n] - numeric[n]).abs().max().item()
                              / max(numeric[n].abs().max().item(), 1e-300) for n in numeric))
    dt = time.perf_counter() - t0
    worst = max(errors)
    record(3, worst < 1e-6 and dt < 120,
           f"max |analytic - numeric| / max |numeric| = {worst:.2e} over 3 seeds "
           f"(worst single-tensor ratio {max(per_tensor):.1e}), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 4. metric fidelity


def _naive_ssim(x, y, cfg=SsimConfig()):
    k, n = gaussian_window(cfg.window, cfg.sigma), cfg.window
    vals = []
    for i in range(x.shape[0] - n + 1):
        for j in range(x.shape[1] - n + 1):
            a, b = x[i : i + n, j : j + n], y[i : i + n, j : j + n]
            mx, my = (k * a).sum(), (k * b).sum()
            vx, vy = (k * (a - mx) ** 2).sum(), (k * (b - my) ** 2).sum()
            cxy = (k * (a - mx) * (b - my)).sum()
            vals.append((2 * mx * my + cfg.c1) * (2 * cxy + cfg.c2) / ((mx**2 + my**2 + cfg.c1) * (vx + vy + cfg.c2)))
    return float(np.mean(vals))


def _pfid_closed_form(fx, fy):
    import mpmath

    mpmath.mp.dps = 40
    A = mpmath.matrix(np.cov(fx, rowvar=False).tolist())
    B = mpmath.matrix(np.cov(fy, rowvar=False).tolist())
    P = A * B
    tr, det = P[0, 0] + P[1, 1], mpmath.det(P)
    disc = mpmath.sqrt(tr * tr - 4 * det)
    tr_sqrt = mpmath.sqrt((tr + disc) / 2) + mpmath.sqrt((tr - disc) / 2)
    d = fx.mean(0) - fy.mean(0)
    return float(mpmath.mpf(float(d @ d)) + A[0, 0] + A[1, 1] + B[0, 0] + B[1, 1] - 2 * tr_sqrt)


def test_criterion_4_metric_fidelity():
    rng = np.random.default_rng(4)
    x = rng.random((32, 32))
    self_err = abs(ssim(x, x) - 1.0)
    ssim_err = 0.0
    for _ in range(50):
        a, b = rng.random((20, 24)), rng.random((20, 24))
        ssim_err = max(ssim_err, abs(ssim(a, b) - _naive_ssim(a, b)))
    fid_err = 0.0
    for _ in range(10):
        fx = rng.normal(size=(300, 2)) @ rng.normal(size=(2, 2)) + rng.normal(size=2)
        fy = rng.normal(size=(250, 2)) @ rng.normal(size=(2, 2)) + rng.normal(size=2)
        fid_err = max(fid_err, abs(pfid(fx, fy) - _pfid_closed_form(fx, fy)))
    fid_1d = frechet_distance([0.0], [[1.0]], [1.0], [[1.0]])
    from sensemap.metrics import coverage_rho

    truth = TrinaryMap(np.array([[0, 0, 0, 0, 2, 2]]))
    half = TrinaryMap(np.array([[0, 0, 1, 1, 2, 2]]))
    over = TrinaryMap(np.array([[0, 0, 1, 1, 0, 0]]))
    counts_ok = (coverage_rho(truth, truth) == 1.0 and coverage_rho(half, truth) == 0.5
                 and reconstruction_accuracy(half, truth) == 1.0 and reconstruction_accuracy(over, truth) == 0.5)
    ok = self_err <= 1e-12 and ssim_err < 1e-9 and fid_err < 1e-6 and abs(fid_1d - 1.0) < 1e-12 and counts_ok
    record(4, ok, f"|SSIM(x,x)-1|={self_err:.1e}, SSIM vs naive {ssim_err:.1e}, pFID vs closed form {fid_err:.1e}, "
                  f"coverage/RA hand cases {'exact' if counts_ok else 'WRONG'}")


# ---------------------------------------------------------------------------
# 5. training sanity


def test_criterion_5_training_sanity():
    t0 = time.perf_counter()
    maps = [generate_floorplan(FloorplanConfig(seed=s)) for s in range(2)]
    pool = generate_samples(maps, SensorSpec(16, 360), stride=5, seed=0)
    samples = pool[:: max(1, len(pool) // 16)][:16]
    xs, ys = samples_to_arrays(samples)
    cfg = NetConfig(side=32, base=4, patch=4)
    # Memorisation check, so the late learning-rate drop is switched off.
    state = train((xs, ys), cfg, TrainConfig(epochs=250, batch_size=8, split_epoch=250, seed=0))
    steps = 250 * math.ceil(len(xs) / 8)
    first, last = state.history[0].mean_hybrid, state.history[-1].mean_hybrid
    with torch.no_grad():
        pred = forward(cfg, state.params, xs).numpy()
    model_ssim = float(np.mean([ssim(pred[i, 0], ys[i, 0]) for i in range(len(xs))]))
    ident_ssim = float(np.mean([ssim(s.obs.cells.numeric(), ys[i, 0]) for i, s in enumerate(samples)]))
    dt = time.perf_counter() - t0
    ok = len(xs) == 16 and steps == 500 and last <= 0.1 * first and model_ssim > ident_ssim and dt < 300
    record(5, ok, f"{steps} steps: loss {first:.4f} -> {last:.4f} ({100 * last / first:.1f}% of epoch 1), "
                  f"SSIM model {model_ssim:.4f} vs identity {ident_ssim:.4f}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 6. exploration efficiency with the oracle predictor


def test_criterion_6_exploration_efficiency():
    t0 = time.perf_counter()
    spec = SensorSpec(16)
    base_steps, orc_steps, rhos, ras, incomplete = [], [], [], [], 0
    for i in range(20):
        truth = generate_floorplan(FloorplanConfig(seed=i))
        start = sample_free_cell(truth, np.random.default_rng([6, i]))
        base = run_frontier_baseline(truth, spec, start=start)
        orc = run_exploration(truth, spec, oracle_predictor(truth), start=start)
        incomplete += (base.terminated != "complete") + (orc.terminated != "complete")
        base_steps.append(base.steps)
        orc_steps.append(orc.steps)
        rhos.append(orc.rho)
        ras.append(reconstruction_accuracy(orc.final_map, truth))
    dt = time.perf_counter() - t0
    mb, mo = float(np.median(base_steps)), float(np.median(orc_steps))
    ok = mo <= 0.9 * mb and min(rhos) >= 0.85 and min(ras) >= 0.85 and incomplete == 0 and dt < 600
    record(6, ok, f"median steps oracle {mo:.1f} vs frontier {mb:.1f} (ratio {mo / mb:.3f}), "
                  f"oracle min rho {min(rhos):.3f}, min RA {min(ras):.3f}, {incomplete} incomplete, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 7. sensing invariants


def test_criterion_7_sensing_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations = calls = 0
    while calls < 1000:
        h, w = (int(v) for v in rng.integers(8, 48, size=2))
        truth = random_map(rng, h, w, float(rng.uniform(0.05, 0.5)))
        if not truth.count(FREE):
            continue
        observed = TrinaryMap.filled(h, w)
        rr, cc = np.indices((h, w))
        for _ in range(10):
            spec = SensorSpec(int(rng.integers(1, 20)), int(rng.integers(4, 400)))
            robot = sample_free_cell(truth, rng)
            before = observed.cells.copy()
            n = sense_and_update(truth, observed, RobotState(robot), spec)
            calls += 1
            changed = observed.cells != before
            known = observed.cells != int(UNCERTAIN)
            far = (rr - robot[0]) ** 2 + (cc - robot[1]) ** 2 > spec.range_L**2
            if (np.any(observed.cells[known] != truth.cells[known])        # contradicts truth
                    or np.any(changed & (before != int(UNCERTAIN)))       # un-observes or rewrites
                    or np.any(changed & far)                              # beyond range
                    or n != int(changed.sum())):
                violations += 1
    dt = time.perf_counter() - t0
    record(7, violations == 0 and dt < 30, f"{calls} calls, {violations} violations, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 8. PNG format fidelity


def test_criterion_8_png_round_trip():
    import io

    from PIL import Image

    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(100):
        side = int(rng.choice([16, 32, 64]))
        obs = TrinaryMap(rng.integers(0, 3, (side, side)).astype(np.uint8))
        gt = TrinaryMap(rng.choice([int(FREE), int(OBSTACLE)], size=(side, side)).astype(np.uint8))
        ob, gb = encode_obs_image(obs), encode_gt_image(gt)
        rgb = np.asarray(Image.open(io.BytesIO(ob)))
        colours_ok = (np.all(rgb[obs.mask(FREE)] == (0, 0, 255)) and np.all(rgb[obs.mask(UNCERTAIN)] == (0, 255, 0))
                      and np.all(rgb[obs.mask(OBSTACLE)] == (255, 0, 0)))
        gray = np.asarray(Image.open(io.BytesIO(gb)))
        gray_ok = np.array_equal(gray == 255, gt.mask(OBSTACLE)) and np.array_equal(gray == 0, gt.mask(FREE))
        if not (colours_ok and gray_ok and decode_obs_image(ob) == obs and decode_gt_image(gb) == gt
                and encode_obs_image(decode_obs_image(ob)) == ob):
            bad += 1
    dt = time.perf_counter() - t0
    record(8, bad == 0 and dt < 5, f"100 patches, {bad} failures, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 9. determinism of the explore and train commands


DET_CONFIG = {
    "schema": SCHEMA,
    "world": {"width": 32, "height": 32, "room_count": [2, 4], "min_room": 6},
    "sensor": {"range_L": 8, "beam_count": 180},
    "net": {"side": 16, "base": 2, "patch": 4, "depth": 1, "heads": 2},
    "train": {"epochs": 3, "batch_size": 4},
    "seeds": [5],
    "map_count": 2,
    "repeats": 2,
    "episodes": 1,
    "budget": 150,
}


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(DET_CONFIG))
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in (["gen-worlds"], ["gen-data"], ["train"], ["explore", "--methods", "frontier,oracle,sensemap"]):
            assert main([*cmd, "--config", str(cfg), "--out", str(out)]) == 0
        outputs.append({p: (out / p).read_bytes() for p in (
            "train/history.csv", "train/model.ckpt", "explore/report.json", "explore/report.csv",
            "explore/curves.csv", "explore/curves.svg")})
    differing = [p for p in outputs[0] if outputs[0][p] != outputs[1][p]]
    record(9, not differing, f"{len(outputs[0])} output files compared, differing: {differing or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
