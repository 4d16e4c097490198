"""Prediction-guided frontier exploration and the plain frontier baseline."""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .gridmap import (
    FREE,
    OBSTACLE,
    UNCERTAIN,
    Cell,
    ConfigError,
    LocalPatch,
    MapDomainError,
    ProbMap,
    TrinaryMap,
    binarize,
    check_thresholds,
    crop_local,
    trinary_from_prob,
    window_bounds,
)
from .metrics import coverage_rho
from .simworld import RobotState, SensorSpec, free_component, sense_and_update

SQRT2 = math.sqrt(2.0)

Predictor = Callable[[LocalPatch], ProbMap]


class PathNotFound(RuntimeError):
    pass


class NoReachableWaypoint(RuntimeError):
    """Frontier clusters exist but none yields a reachable waypoint."""


class EpisodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.25
    tau: float = 0.1
    nu: float = 0.5
    predict_stride: int = 1

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        check_thresholds(self.tau, self.nu)
        if self.predict_stride < 1:
            raise ConfigError("predict_stride must be >= 1")


@dataclass(frozen=True)
class CostWeights:
    w_prob: float = 1.0
    w_dis: Optional[float] = None  # None: 1 / map side

    def __post_init__(self):
        if self.w_prob < 0 or (self.w_dis is not None and self.w_dis < 0):
            raise ConfigError("cost weights must be >= 0")

    def resolved(self, shape) -> "CostWeights":
        if self.w_dis is not None:
            return self
        return CostWeights(self.w_prob, 1.0 / max(shape))


@dataclass
class FrontierCluster:
    members: list[Cell]
    centroid: tuple[float, float]
    dis: float = 0.0
    cost: float = 0.0


@dataclass
class ExplorationResult:
    steps: int
    distance: float
    coverage_curve: list[tuple[int, float]]
    final_prob: ProbMap
    final_map: TrinaryMap
    terminated: str
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def rho(self) -> float:
        return self.coverage_curve[-1][1]


# ---------------------------------------------------------------------------
# probability map updates


def fuse_prediction(prob: ProbMap, pred: ProbMap, robot, alpha: float) -> ProbMap:
    """Blend a local prediction into the global map in place (and return it).

    The prediction covers rows/cols [robot - L, robot + L - 1]; cells of that
    window outside the map are dropped.
    """
    side = pred.shape[0]
    if pred.shape != (side, side) or side % 2:
        raise MapDomainError(f"prediction must be square with even side, got {pred.shape}")
    h, w = prob.shape
    if not (0 <= robot[0] < h and 0 <= robot[1] < w):
        raise MapDomainError(f"robot {tuple(robot)} outside map")
    r0, r1, c0, c1 = window_bounds(robot, side // 2)
    sr0, sr1, sc0, sc1 = max(r0, 0), min(r1, h), max(c0, 0), min(c1, w)
    local = pred.values[sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0]
    win = prob.values[sr0:sr1, sc0:sc1]
    # Convex blend of values in [0, 1] stays in [0, 1] up to rounding.
    prob.values[sr0:sr1, sc0:sc1] = np.clip(alpha * local + (1.0 - alpha) * win, 0.0, 1.0)
    return prob


def observe_clamp(prob: ProbMap, observed: TrinaryMap) -> ProbMap:
    """Pin directly sensed cells: free to 0, obstacle to 1. In place."""
    if prob.shape != observed.shape:
        raise MapDomainError(f"shape mismatch {prob.shape} vs {observed.shape}")
    prob.values[observed.mask(FREE)] = 0.0
    prob.values[observed.mask(OBSTACLE)] = 1.0
    return prob


# ---------------------------------------------------------------------------
# frontiers


def frontier_cells(classified: TrinaryMap, robot) -> list[Cell]:
    """Reachable free cells with at least one uncertain 4-neighbour, in BFS order."""
    if not classified.in_bounds(robot) or classified[robot] != FREE:
        raise MapDomainError(f"robot cell {tuple(robot)} is not free")
    cells = classified.cells
    h, w = cells.shape
    seen = np.zeros((h, w), dtype=bool)
    seen[robot[0], robot[1]] = True
    q = deque([(int(robot[0]), int(robot[1]))])
    out = []
    while q:
        r, c = q.popleft()
        is_frontier = False
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            v = cells[nr, nc]
            if v == UNCERTAIN:
                is_frontier = True
            elif v == FREE and not seen[nr, nc]:
                seen[nr, nc] = True
                q.append((nr, nc))
        if is_frontier:
            out.append(Cell(r, c))
    return out


def extract_frontiers(prob: ProbMap, robot, tau: float, nu: float) -> list[Cell]:
    return frontier_cells(trinary_from_prob(prob, tau, nu), robot)


def cluster_frontiers(cells: Iterable) -> list[FrontierCluster]:
    """8-connected components, ordered by their smallest member."""
    remaining = {Cell(int(r), int(c)) for r, c in cells}
    clusters = []
    for seed in sorted(remaining):
        if seed not in remaining:
            continue
        remaining.discard(seed)
        members = [seed]
        q = deque([seed])
        while q:
            r, c = q.popleft()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    n = Cell(r + dr, c + dc)
                    if n in remaining:
                        remaining.discard(n)
                        members.append(n)
                        q.append(n)
        members.sort()
        arr = np.asarray(members, dtype=np.float64)
        clusters.append(FrontierCluster(members, (float(arr[:, 0].mean()), float(arr[:, 1].mean()))))
    return clusters


def cluster_cost(cluster: FrontierCluster, prob: ProbMap, robot, w: CostWeights) -> float:
    """Mean |0.5 - p| over members plus weighted centroid distance; fills ``dis``/``cost``."""
    if not cluster.members:
        raise MapDomainError("empty frontier cluster")
    w = w.resolved(prob.shape)
    idx = np.asarray(cluster.members)
    uncertainty = float(np.mean(np.abs(0.5 - prob.values[idx[:, 0], idx[:, 1]])))
    cluster.dis = math.hypot(cluster.centroid[0] - robot[0], cluster.centroid[1] - robot[1])
    cluster.cost = w.w_prob * uncertainty + w.w_dis * cluster.dis
    return cluster.cost


def _snap(
    cluster: FrontierCluster,
    reachable: np.ndarray,
    space: np.ndarray,
    robot,
    radius: Optional[int],
) -> Optional[Cell]:
    """Rounded centroid if the robot can reach it, else the first reachable cell
    met by a breadth-first search outward from the members through ``space``."""
    h, w = reachable.shape
    robot = (int(robot[0]), int(robot[1]))
    r = int(math.floor(cluster.centroid[0] + 0.5))
    c = int(math.floor(cluster.centroid[1] + 0.5))
    if 0 <= r < h and 0 <= c < w and reachable[r, c] and (r, c) != robot:
        return Cell(r, c)
    cy, cx = cluster.centroid
    sources = sorted(cluster.members, key=lambda m: ((m[0] - cy) ** 2 + (m[1] - cx) ** 2, m[0], m[1]))
    depth = {tuple(m): 0 for m in sources}
    q = deque(tuple(m) for m in sources)
    while q:
        cur = q.popleft()
        if reachable[cur] and cur != robot:
            return Cell(*cur)
        d = depth[cur]
        if radius is not None and d >= radius:
            continue
        cr, cc = cur
        for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
            if 0 <= nr < h and 0 <= nc < w and (space[nr, nc] or reachable[nr, nc]) and (nr, nc) not in depth:
                depth[(nr, nc)] = d + 1
                q.append((nr, nc))
    return None


def select_waypoint(
    clusters: list[FrontierCluster],
    prob: ProbMap,
    robot,
    w: CostWeights,
    passable: Optional[TrinaryMap] = None,
    tau: float = 0.1,
    nu: float = 0.5,
    snap_radius: Optional[int] = None,
    exclude: Iterable = (),
) -> Optional[Cell]:
    """Centroid of the cheapest cluster, snapped onto a cell the robot can reach.

    ``passable`` marks the cells the robot may travel (its free cells); it
    defaults to the probability map classified under (tau, nu). Snapping
    searches outward from the cluster through cells classified free, up to
    ``snap_radius`` steps. Returns None when there are no clusters; raises
    NoReachableWaypoint when every cluster is discarded.
    """
    if not clusters:
        return None
    classified = trinary_from_prob(prob, tau, nu)
    if passable is None:
        passable = classified
    reachable = free_component(passable, robot)
    for cell in exclude:
        reachable[cell[0], cell[1]] = False
    space = classified.mask(FREE)
    for cl in clusters:
        cluster_cost(cl, prob, robot, w)
    ranked = sorted(clusters, key=lambda cl: (cl.cost, cl.members[0][0], cl.members[0][1]))
    for cl in ranked:
        goal = _snap(cl, reachable, space, robot, snap_radius)
        if goal is not None:
            return goal
    raise NoReachableWaypoint(f"none of {len(clusters)} frontier clusters has a reachable waypoint")


# ---------------------------------------------------------------------------
# planning

_MOVES = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
          (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2)]


def neighbours(free: np.ndarray, r: int, c: int):
    """8-connected moves over ``free``; diagonals need at least one open orthogonal cell."""
    h, w = free.shape
    for dr, dc, cost in _MOVES:
        nr, nc = r + dr, c + dc
        if not (0 <= nr < h and 0 <= nc < w) or not free[nr, nc]:
            continue
        if dr and dc and not (free[r + dr, c] or free[r, c + dc]):
            continue
        yield nr, nc, cost


def octile(a, b) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (dr + dc) + (SQRT2 - 2.0) * min(dr, dc)


def path_cost(path) -> float:
    """Exact-form cost: straight moves + sqrt(2) * diagonal moves."""
    diag = sum(1 for a, b in zip(path, path[1:]) if a[0] != b[0] and a[1] != b[1])
    return (len(path) - 1 - diag) + diag * SQRT2


def astar(passable: TrinaryMap, start, goal) -> list[Cell]:
    free = passable.mask(FREE)
    start, goal = Cell(int(start[0]), int(start[1])), Cell(int(goal[0]), int(goal[1]))
    for name, cell in (("start", start), ("goal", goal)):
        if not passable.in_bounds(cell) or not free[cell]:
            raise MapDomainError(f"{name} {tuple(cell)} is not a free cell")
    g = {start: 0.0}
    came: dict[Cell, Optional[Cell]] = {start: None}
    heap = [(octile(start, goal), 0.0, start)]
    closed = set()
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = came[cur]
            return path[::-1]
        closed.add(cur)
        for nr, nc, step in neighbours(free, cur[0], cur[1]):
            nxt = Cell(nr, nc)
            ng = gc + step
            if ng < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = ng
                came[nxt] = cur
                heapq.heappush(heap, (ng + octile(nxt, goal), ng, nxt))
    raise PathNotFound(f"no path from {tuple(start)} to {tuple(goal)}")


# ---------------------------------------------------------------------------
# episodes

StepHook = Callable[[int, Cell, TrinaryMap], None]


def _run(
    truth: TrinaryMap,
    spec: SensorSpec,
    start,
    budget: Optional[int],
    predictor: Optional[Predictor],
    fusion: FusionConfig,
    weights: CostWeights,
    on_step: Optional[StepHook],
    max_revisits: int,
    observed: Optional[TrinaryMap] = None,
) -> ExplorationResult:
    if not truth.in_bounds(start) or truth[start] != FREE:
        raise MapDomainError(f"start {tuple(start)} is not a free cell")
    if budget is not None and budget < 0:
        raise ConfigError("budget must be >= 0")
    baseline = predictor is None
    weights = CostWeights(0.0, weights.resolved(truth.shape).w_dis) if baseline else weights.resolved(truth.shape)

    if observed is None:
        observed = TrinaryMap.filled(*truth.shape)
    else:
        if observed.shape != truth.shape:
            raise MapDomainError(f"observed map {observed.shape} does not match truth {truth.shape}")
        known = ~observed.mask(UNCERTAIN)
        if np.any(observed.cells[known] != truth.cells[known]):
            raise MapDomainError("initial observed map disagrees with ground truth")
        observed = observed.copy()
    prob = ProbMap.uniform(*truth.shape)
    robot = Cell(int(start[0]), int(start[1]))
    steps, distance = 0, 0.0
    waypoint: Optional[Cell] = None
    path: list[Cell] = []
    picks: Counter = Counter()
    trace: list[dict] = []
    curve: list[tuple[int, float]] = []

    def current_map() -> TrinaryMap:
        return observed if baseline else binarize(prob)

    def perceive(action: str) -> None:
        revealed = sense_and_update(truth, observed, RobotState(robot, 0.0, steps), spec)
        if not baseline and steps % fusion.predict_stride == 0:
            pred = predictor(crop_local(observed, robot, spec.range_L))
            fuse_prediction(prob, pred, robot, fusion.alpha)
        # The baseline's map stays the plain sensed encoding (0 / 0.5 / 1).
        observe_clamp(prob, observed)
        rho = coverage_rho(current_map(), truth)
        curve.append((steps, rho))
        trace.append({"step": steps, "robot": list(robot), "revealed": revealed, "rho": rho,
                      "waypoint": list(waypoint) if waypoint else None, "action": action})
        if on_step is not None:
            on_step(steps, robot, observed)

    perceive("start")
    terminated = None
    while terminated is None:
        if waypoint is None or robot == waypoint or not path:
            fronts = extract_frontiers(prob, robot, fusion.tau, fusion.nu)
            clusters = cluster_frontiers(fronts)
            excluded = [c for c, n in picks.items() if n >= max_revisits]
            try:
                waypoint = select_waypoint(clusters, prob, robot, weights, passable=observed,
                                           tau=fusion.tau, nu=fusion.nu, exclude=excluded)
            except NoReachableWaypoint:
                terminated = "stuck"
                break
            if waypoint is None:
                terminated = "complete"
                break
            picks[waypoint] += 1
            path = astar(observed, robot, waypoint)[1:]
        if budget is not None and steps >= budget:
            terminated = "budget_exhausted"
            break
        nxt = path.pop(0)
        if truth[nxt] != FREE or observed[nxt] != FREE:
            raise EpisodeError(f"planned step into non-free cell {tuple(nxt)} at step {steps}")
        distance += SQRT2 if (nxt[0] != robot[0] and nxt[1] != robot[1]) else 1.0
        robot = nxt
        steps += 1
        perceive("move")

    return ExplorationResult(steps, distance, curve, prob, current_map().copy(), terminated, trace)


def run_exploration(
    truth: TrinaryMap,
    spec: SensorSpec,
    predictor: Predictor,
    fusion: FusionConfig = FusionConfig(),
    weights: CostWeights = CostWeights(),
    budget: Optional[int] = None,
    start=None,
    on_step: Optional[StepHook] = None,
    max_revisits: int = 4,
    observed: Optional[TrinaryMap] = None,
) -> ExplorationResult:
    """Explore ``truth`` guided by a global probability map fused from ``predictor``."""
    if start is None:
        raise ConfigError("start cell required")
    return _run(truth, spec, start, budget, predictor, fusion, weights, on_step, max_revisits, observed)


def run_frontier_baseline(
    truth: TrinaryMap,
    spec: SensorSpec,
    budget: Optional[int] = None,
    start=None,
    on_step: Optional[StepHook] = None,
    max_revisits: int = 4,
    observed: Optional[TrinaryMap] = None,
) -> ExplorationResult:
    """Nearest-frontier exploration on the sensed map alone."""
    if start is None:
        raise ConfigError("start cell required")
    return _run(truth, spec, start, budget, None, FusionConfig(), CostWeights(), on_step, max_revisits, observed)


def write_trace(result: ExplorationResult, path) -> None:
    with open(path, "w") as fh:
        for rec in result.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
