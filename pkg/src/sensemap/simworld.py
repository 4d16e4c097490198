"""Ground-truth worlds and an omnidirectional LiDAR model."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .gridmap import (
    FREE,
    OBSTACLE,
    UNCERTAIN,
    Cell,
    MapDomainError,
    TrinaryMap,
    decode_gt_image,
)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RobotState:
    position: Cell
    orientation: float = 0.0
    time_step: int = 0

    def __post_init__(self):
        if not (-math.pi < self.orientation <= math.pi):
            raise MapDomainError(f"orientation {self.orientation} outside (-pi, pi]")
        if self.time_step < 0:
            raise MapDomainError("time_step must be >= 0")


@dataclass(frozen=True)
class SensorSpec:
    range_L: int = 16
    beam_count: int = 360

    def __post_init__(self):
        if self.range_L < 1:
            raise MapDomainError("range_L must be >= 1")
        if self.beam_count < 4:
            raise MapDomainError("beam_count must be >= 4")


def beam_offsets(angle: float, range_L: float) -> list[tuple[int, int]]:
    """Cells a ray from the origin cell centre passes through, as (drow, dcol).

    Grid traversal stops at the first cell entered beyond ``range_L`` along the
    ray or whose centre lies farther than ``range_L``. Angle 0 points east
    (+col), pi/2 north (-row). A ray through an exact corner steps diagonally.
    """
    dx = math.cos(angle)
    dy = -math.sin(angle)
    if abs(dx) < 1e-15:
        dx = 0.0
    if abs(dy) < 1e-15:
        dy = 0.0
    step_c = 1 if dx > 0 else -1
    step_r = 1 if dy > 0 else -1
    t_max_c = 0.5 / abs(dx) if dx else math.inf
    t_max_r = 0.5 / abs(dy) if dy else math.inf
    t_delta_c = 1.0 / abs(dx) if dx else math.inf
    t_delta_r = 1.0 / abs(dy) if dy else math.inf

    r = c = 0
    out = []
    while True:
        t = min(t_max_c, t_max_r)
        if t > range_L:
            break
        if abs(t_max_c - t_max_r) < 1e-12:
            c += step_c
            r += step_r
            t_max_c += t_delta_c
            t_max_r += t_delta_r
        elif t_max_c < t_max_r:
            c += step_c
            t_max_c += t_delta_c
        else:
            r += step_r
            t_max_r += t_delta_r
        if r * r + c * c > range_L * range_L:
            break
        out.append((r, c))
    return out


def cast_beam(truth: TrinaryMap, origin, angle: float, range_L: int) -> tuple[list[Cell], Optional[Cell]]:
    """Trace one beam. Returns the free cells passed and the blocking obstacle, if any.

    Leaving the map ends the beam without a hit.
    """
    if not truth.in_bounds(origin) or truth[origin] != FREE:
        raise MapDomainError(f"beam origin {tuple(origin)} is not a free cell")
    r0, c0 = origin
    covered = []
    for dr, dc in beam_offsets(angle, range_L):
        cell = Cell(r0 + dr, c0 + dc)
        if not truth.in_bounds(cell):
            break
        if truth[cell] == OBSTACLE:
            return covered, cell
        covered.append(cell)
    return covered, None


@lru_cache(maxsize=16)
def _beam_table(range_L: int, beam_count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rays = [beam_offsets(2 * math.pi * k / beam_count, range_L) for k in range(beam_count)]
    depth = max(len(ray) for ray in rays)
    dr = np.zeros((beam_count, depth), dtype=np.int64)
    dc = np.zeros((beam_count, depth), dtype=np.int64)
    valid = np.zeros((beam_count, depth), dtype=bool)
    for k, ray in enumerate(rays):
        if ray:
            arr = np.asarray(ray)
            dr[k, : len(ray)] = arr[:, 0]
            dc[k, : len(ray)] = arr[:, 1]
            valid[k, : len(ray)] = True
    return dr, dc, valid


def sensed_cells(truth: TrinaryMap, origin, spec: SensorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (free_seen, obstacle_seen) for a full scan from ``origin``.

    Equivalent to the union of ``cast_beam`` over all beams, plus the origin cell.
    """
    dr, dc, valid = _beam_table(spec.range_L, spec.beam_count)
    h, w = truth.shape
    rows = origin[0] + dr
    cols = origin[1] + dc
    inside = valid & (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rr = np.clip(rows, 0, h - 1)
    cc = np.clip(cols, 0, w - 1)
    is_obs = inside & (truth.cells[rr, cc] == int(OBSTACLE))
    stop = ~inside | is_obs
    # Index of the first stopping cell per beam; rows without one run to full depth.
    first = np.where(stop.any(axis=1), stop.argmax(axis=1), stop.shape[1])
    k = np.arange(stop.shape[1])[None, :]
    covered = k < first[:, None]
    hit = is_obs & (k == first[:, None])

    free_seen = np.zeros((h, w), dtype=bool)
    obs_seen = np.zeros((h, w), dtype=bool)
    free_seen[rows[covered], cols[covered]] = True
    free_seen[origin[0], origin[1]] = True
    obs_seen[rows[hit], cols[hit]] = True
    return free_seen, obs_seen


def sense_and_update(truth: TrinaryMap, observed: TrinaryMap, robot: RobotState, spec: SensorSpec) -> int:
    """Apply one 360-degree scan to ``observed`` in place; returns cells newly revealed."""
    if truth.shape != observed.shape:
        raise MapDomainError(f"truth {truth.shape} and observed {observed.shape} differ in shape")
    pos = robot.position
    if not truth.in_bounds(pos) or truth[pos] != FREE:
        raise MapDomainError(f"robot at {tuple(pos)} is not on a free cell")
    free_seen, obs_seen = sensed_cells(truth, pos, spec)
    before = observed.cells == int(UNCERTAIN)
    observed.cells[free_seen] = int(FREE)
    observed.cells[obs_seen] = int(OBSTACLE)
    return int(np.count_nonzero(before & (free_seen | obs_seen)))


# ---------------------------------------------------------------------------
# procedural floorplans


@dataclass(frozen=True)
class FloorplanConfig:
    width: int = 64
    height: int = 64
    room_count: tuple[int, int] = (4, 7)
    corridor_width: int = 3
    door_width: int = 3
    min_room: int = 7
    corridor_prob: float = 0.3
    seed: int = 0
    max_retries: int = 20


def _free_components(free: np.ndarray) -> int:
    from scipy import ndimage

    _, n = ndimage.label(free)
    return n


def _try_floorplan(cfg: FloorplanConfig, rng: np.random.Generator) -> Optional[np.ndarray]:
    h, w = cfg.height, cfg.width
    grid = np.full((h, w), int(OBSTACLE), dtype=np.uint8)
    grid[1 : h - 1, 1 : w - 1] = int(FREE)
    target = int(rng.integers(cfg.room_count[0], cfg.room_count[1] + 1))
    rooms = [(1, h - 1, 1, w - 1)]
    doors: set[tuple[int, int]] = set()
    m = cfg.min_room

    def wall_ok(axis, x, r0, r1, c0, c1):
        # A new wall must not end against an existing door opening.
        if axis == 0:
            return (r0 - 1, x) not in doors and (r1, x) not in doors
        return (x, c0 - 1) not in doors and (x, c1) not in doors

    def carve_door(axis, x, lo, hi):
        dw = min(cfg.door_width, hi - lo)
        start = int(rng.integers(lo, hi - dw + 1))
        for k in range(start, start + dw):
            cell = (k, x) if axis == 0 else (x, k)
            grid[cell] = int(FREE)
            doors.add(cell)

    while len(rooms) < target:
        order = sorted(range(len(rooms)), key=lambda i: -(rooms[i][1] - rooms[i][0]) * (rooms[i][3] - rooms[i][2]))
        for idx in order:
            r0, r1, c0, c1 = rooms[idx]
            rh, rw = r1 - r0, c1 - c0
            # axis 0: vertical wall (split columns); axis 1: horizontal wall (split rows)
            axis = 0 if rw >= rh else 1
            span_lo, span_hi = (c0, c1) if axis == 0 else (r0, r1)
            corridor = rng.random() < cfg.corridor_prob
            gap = cfg.corridor_width + 1 if corridor else 0
            lo, hi = span_lo + m, span_hi - m - 1 - gap
            cands = [x for x in range(lo, hi + 1) if wall_ok(axis, x, r0, r1, c0, c1)
                     and (not corridor or wall_ok(axis, x + gap, r0, r1, c0, c1))]
            if not cands:
                continue
            x = int(cands[rng.integers(len(cands))])
            other_lo, other_hi = (r0, r1) if axis == 0 else (c0, c1)
            walls = [x, x + gap] if corridor else [x]
            for wx in walls:
                if axis == 0:
                    grid[r0:r1, wx] = int(OBSTACLE)
                else:
                    grid[wx, c0:c1] = int(OBSTACLE)
                carve_door(axis, wx, other_lo, other_hi)
            if axis == 0:
                a, b = (r0, r1, c0, x), (r0, r1, walls[-1] + 1, c1)
            else:
                a, b = (r0, x, c0, c1), (walls[-1] + 1, r1, c0, c1)
            rooms[idx : idx + 1] = [a, b]
            break
        else:
            return None
    free = grid == int(FREE)
    if _free_components(free) != 1:
        return None
    return grid


def generate_floorplan(cfg: FloorplanConfig) -> TrinaryMap:
    """Binary rooms-and-corridors map with an obstacle border and one connected free region."""
    if cfg.width < 32 or cfg.height < 32:
        raise MapDomainError("floorplan dimensions must be >= 32")
    if cfg.room_count[0] < 1 or cfg.room_count[1] < cfg.room_count[0]:
        raise MapDomainError(f"bad room_count range {cfg.room_count}")
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([cfg.seed, attempt])
        grid = _try_floorplan(cfg, rng)
        if grid is not None:
            return TrinaryMap(grid)
    raise GenerationError(
        f"could not place {cfg.room_count[0]}+ rooms of side {cfg.min_room} in "
        f"{cfg.height}x{cfg.width} after {cfg.max_retries} attempts"
    )


def load_floorplan(path) -> TrinaryMap:
    return decode_gt_image(Path(path).read_bytes())


def free_component(m: TrinaryMap, start) -> np.ndarray:
    """Mask of free cells 4-connected to ``start``."""
    seen = np.zeros(m.shape, dtype=bool)
    if not m.in_bounds(start) or m[start] != FREE:
        return seen
    free = m.cells == int(FREE)
    h, w = m.shape
    q = deque([tuple(start)])
    seen[start[0], start[1]] = True
    while q:
        r, c = q.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and free[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                q.append((nr, nc))
    return seen


def sample_free_cell(m: TrinaryMap, rng: np.random.Generator) -> Cell:
    cells = np.argwhere(m.mask(FREE))
    if not len(cells):
        raise MapDomainError("map has no free cells")
    r, c = cells[rng.integers(len(cells))]
    return Cell(int(r), int(c))
