"""Training pairs of (local observation, local ground truth) from simulated runs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .explorer import EpisodeError, ExplorationResult, run_frontier_baseline
from .gridmap import (
    FREE,
    OBSTACLE,
    UNCERTAIN,
    Cell,
    LocalPatch,
    MapDomainError,
    MapFormatError,
    TrinaryMap,
    crop_local,
    decode_gt_image,
    decode_obs_image,
    encode_gt_image,
    encode_obs_image,
)
from .simworld import SensorSpec, sample_free_cell

GENERATOR_VERSION = "sensemap-data/1"


class DatasetIOError(IOError):
    pass


@dataclass(eq=False)
class DatasetSample:
    obs: LocalPatch
    gt: TrinaryMap
    robot_local: Cell
    map_id: int = 0
    step: int = 0

    def __post_init__(self):
        if self.obs.side != self.gt.height or self.gt.height != self.gt.width:
            raise MapDomainError(f"obs side {self.obs.side} and gt shape {self.gt.shape} differ")
        if self.gt.count(UNCERTAIN):
            raise MapDomainError("ground-truth patch contains uncertain cells")
        known = self.obs.cells.cells != int(UNCERTAIN)
        if np.any(self.obs.cells.cells[known] != self.gt.cells[known]):
            raise MapDomainError(f"observation disagrees with ground truth (map {self.map_id}, step {self.step})")

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetSample):
            return NotImplemented
        return (self.obs == other.obs and self.gt == other.gt and self.robot_local == other.robot_local
                and self.map_id == other.map_id and self.step == other.step)


Policy = Callable[..., ExplorationResult]


def collect_episode(
    truth: TrinaryMap,
    spec: SensorSpec,
    policy: Optional[Policy] = None,
    stride: int = 5,
    start=None,
    map_id: int = 0,
    budget: Optional[int] = None,
    observed: Optional[TrinaryMap] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[DatasetSample]:
    """Drive one exploration episode and emit a sample every ``stride`` steps (step 0 included).

    ``policy`` is called like :func:`run_frontier_baseline` (truth, spec,
    budget=, start=, on_step=, observed=).
    """
    if stride < 1:
        raise MapDomainError("stride must be >= 1")
    policy = policy or run_frontier_baseline
    if start is None:
        start = sample_free_cell(truth, rng if rng is not None else np.random.default_rng(map_id))
    L = spec.range_L
    samples: list[DatasetSample] = []

    def on_step(step: int, robot: Cell, obs_map: TrinaryMap) -> None:
        if step % stride:
            return
        obs = crop_local(obs_map, robot, L)
        gt = crop_local(truth, robot, L, pad=OBSTACLE).cells
        samples.append(DatasetSample(obs, gt, Cell(L, L), map_id, step))

    result = policy(truth, spec, budget=budget, start=start, on_step=on_step, observed=observed)
    if result.terminated == "stuck" and result.steps == 0:
        raise EpisodeError(f"no reachable frontier from start {tuple(start)} on map {map_id}")
    return samples


def generate_samples(maps: Sequence[TrinaryMap], spec: SensorSpec, episodes: int = 1, stride: int = 5,
                     seed: int = 0, budget: Optional[int] = None) -> list[DatasetSample]:
    if episodes < 1:
        raise MapDomainError("episodes must be >= 1")
    out = []
    for map_id, truth in enumerate(maps):
        for ep in range(episodes):
            rng = np.random.default_rng([seed, map_id, ep])
            out.extend(collect_episode(truth, spec, stride=stride, map_id=map_id, budget=budget, rng=rng))
    return out


# ---------------------------------------------------------------------------
# statistics


@dataclass
class Summary:
    mean: float
    max: float
    min: float
    std: float
    var: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        if not len(v):
            return cls(*(float("nan"),) * 5)
        return cls(float(v.mean()), float(v.max()), float(v.min()), float(v.std()), float(v.var()))


@dataclass
class DatasetStats:
    obs_free: Summary
    obs_uncertain: Summary
    obs_obstacle: Summary
    gt_free: Summary
    gt_obstacle: Summary
    gt_ratio: Summary
    coverage: Summary
    n_samples: int

    def rows(self) -> list[tuple[str, str, Summary]]:
        return [
            ("observation", "Free", self.obs_free),
            ("observation", "Uncertain", self.obs_uncertain),
            ("observation", "Obstacle", self.obs_obstacle),
            ("ground truth", "Free", self.gt_free),
            ("ground truth", "Obstacle", self.gt_obstacle),
            ("ground truth", "Ratio(free/obstacle)", self.gt_ratio),
            ("coverage", "Coverage", self.coverage),
        ]

    def table(self) -> str:
        lines = []
        section = None
        for sec, name, s in self.rows():
            if sec != section:
                section = sec
                lines.append(f"{sec} (pixels)" if sec != "coverage" else "coverage (obs free / gt free)")
                lines.append(f"  {'Category':<22}{'Mean':>12}{'Max':>12}{'Min':>12}{'Std':>12}{'Var':>14}")
            lines.append(f"  {name:<22}{s.mean:>12.2f}{s.max:>12.2f}{s.min:>12.2f}{s.std:>12.2f}{s.var:>14.2f}")
        return "\n".join(lines)


def compute_stats(samples: Sequence[DatasetSample]) -> DatasetStats:
    if not samples:
        raise MapDomainError("no samples")
    of = np.array([[s.obs.cells.count(st) for st in (FREE, UNCERTAIN, OBSTACLE)] for s in samples], dtype=float)
    gf = np.array([s.gt.count(FREE) for s in samples], dtype=float)
    go = np.array([s.gt.count(OBSTACLE) for s in samples], dtype=float)
    ratio = gf[go > 0] / go[go > 0]
    coverage = of[gf > 0, 0] / gf[gf > 0]
    return DatasetStats(Summary.of(of[:, 0]), Summary.of(of[:, 1]), Summary.of(of[:, 2]),
                        Summary.of(gf), Summary.of(go), Summary.of(ratio), Summary.of(coverage), len(samples))


# ---------------------------------------------------------------------------
# on-disk format: obs/NNNNNN.png, gt/NNNNNN.png, index.json


def write_dataset(samples: Sequence[DatasetSample], directory, seeds: Sequence[int] = (),
                  config_hash: str = "") -> Path:
    root = Path(directory)
    (root / "obs").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, s in enumerate(samples):
        obs_name, gt_name = f"obs/{i:06d}.png", f"gt/{i:06d}.png"
        (root / obs_name).write_bytes(encode_obs_image(s.obs.cells))
        (root / gt_name).write_bytes(encode_gt_image(s.gt))
        pairs.append({
            "obs": obs_name, "gt": gt_name, "map_id": s.map_id, "step": s.step,
            "robot_local": list(s.robot_local),
            "origin": list(s.obs.origin) if s.obs.origin is not None else None,
            "center": list(s.obs.center),
        })
    index = {
        "version": GENERATOR_VERSION,
        "patch_side": samples[0].obs.side if samples else None,
        "seeds": list(seeds),
        "config_hash": config_hash,
        "pairs": pairs,
    }
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return root


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc.strerror}") from exc


def read_index(directory) -> dict:
    path = Path(directory) / "index.json"
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"corrupt index {path}: {exc}") from exc


def read_dataset(directory) -> list[DatasetSample]:
    root = Path(directory)
    index = read_index(root)
    out = []
    for p in index["pairs"]:
        decoded = []
        for key, decode in (("obs", decode_obs_image), ("gt", decode_gt_image)):
            path = root / p[key]
            try:
                decoded.append(decode(_read(path)))
            except MapFormatError as exc:
                raise MapFormatError(f"{path}: {exc}") from exc
        obs_map, gt = decoded
        origin = Cell(*p["origin"]) if p.get("origin") is not None else None
        patch = LocalPatch(obs_map, origin, Cell(*p["center"]))
        out.append(DatasetSample(patch, gt, Cell(*p["robot_local"]), p["map_id"], p["step"]))
    return out


def dataset_digest(directory) -> str:
    """SHA-256 over index.json and every referenced image, in index order."""
    root = Path(directory)
    h = hashlib.sha256(_read(root / "index.json"))
    for p in read_index(root)["pairs"]:
        h.update(_read(root / p["obs"]))
        h.update(_read(root / p["gt"]))
    return h.hexdigest()
