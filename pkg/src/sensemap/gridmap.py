"""Grid map types, PNG encodings and local-window cropping.

Maps are stored row-major as ``uint8`` state codes (row 0 at the image top),
so image IO is a direct array conversion.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image


class MapDomainError(ValueError):
    """Argument outside the domain an operation is defined on."""


class MapFormatError(ValueError):
    """Malformed image data."""


class ConfigError(ValueError):
    """Inconsistent configuration values."""


class CellState(IntEnum):
    FREE = 0
    UNCERTAIN = 1
    OBSTACLE = 2

    @property
    def numeric(self) -> float:
        return self.value / 2.0

    @classmethod
    def from_numeric(cls, v: float) -> "CellState":
        code = float(v) * 2
        if code not in (0.0, 1.0, 2.0):
            raise MapDomainError(f"{v!r} is not a cell encoding")
        return cls(int(code))


FREE = CellState.FREE
UNCERTAIN = CellState.UNCERTAIN
OBSTACLE = CellState.OBSTACLE


class Cell(NamedTuple):
    row: int
    col: int


@dataclass(eq=False)
class TrinaryMap:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise MapDomainError(f"map must be 2-D, got shape {cells.shape}")
        if cells.size and cells.max() > 2:
            raise MapDomainError("map contains invalid cell codes")
        self.cells = cells.astype(np.uint8, copy=False)

    @classmethod
    def filled(cls, height: int, width: int, state: CellState = UNCERTAIN) -> "TrinaryMap":
        return cls(np.full((height, width), int(state), dtype=np.uint8))

    @classmethod
    def from_numeric(cls, values) -> "TrinaryMap":
        values = np.asarray(values, dtype=np.float64)
        codes = np.rint(values * 2)
        if not np.array_equal(codes / 2, values):
            raise MapDomainError("numeric map values must be 0, 0.5 or 1")
        return cls(codes.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def __getitem__(self, cell) -> CellState:
        return CellState(int(self.cells[cell[0], cell[1]]))

    def __setitem__(self, cell, state: CellState) -> None:
        self.cells[cell[0], cell[1]] = int(state)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrinaryMap):
            return NotImplemented
        return np.array_equal(self.cells, other.cells)

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def numeric(self) -> np.ndarray:
        return self.cells.astype(np.float64) / 2.0

    def mask(self, state: CellState) -> np.ndarray:
        return self.cells == int(state)

    def count(self, state: CellState) -> int:
        return int(np.count_nonzero(self.cells == int(state)))

    def copy(self) -> "TrinaryMap":
        return TrinaryMap(self.cells.copy())


@dataclass(eq=False)
class ProbMap:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise MapDomainError(f"probability map must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0 or not np.all(np.isfinite(values))):
            raise MapDomainError("probabilities must lie in [0, 1]")
        self.values = values

    @classmethod
    def uniform(cls, height: int, width: int) -> "ProbMap":
        return cls(np.full((height, width), 0.5))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __getitem__(self, cell) -> float:
        return float(self.values[cell[0], cell[1]])

    def copy(self) -> "ProbMap":
        return ProbMap(self.values.copy())


@dataclass(eq=False)
class LocalPatch:
    """Square window of a global map; the robot sits at local index (L, L)."""

    cells: TrinaryMap
    origin: Optional[Cell]
    center: Cell

    @property
    def side(self) -> int:
        return self.cells.height

    @property
    def range_L(self) -> int:
        return self.side // 2

    @property
    def local_center(self) -> Cell:
        return Cell(self.range_L, self.range_L)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LocalPatch):
            return NotImplemented
        return self.cells == other.cells and self.origin == other.origin and self.center == other.center


def window_bounds(robot, range_L: int) -> tuple[int, int, int, int]:
    """Global (row0, row1, col0, col1), half-open, of the 2L window around ``robot``."""
    r, c = robot
    return r - range_L, r + range_L, c - range_L, c + range_L


def crop_window(array: np.ndarray, robot, range_L: int, pad) -> np.ndarray:
    """Copy the 2L x 2L window around ``robot`` out of ``array``, padding outside cells."""
    side = 2 * range_L
    r0, r1, c0, c1 = window_bounds(robot, range_L)
    out = np.full((side, side), pad, dtype=array.dtype)
    h, w = array.shape
    sr0, sr1 = max(r0, 0), min(r1, h)
    sc0, sc1 = max(c0, 0), min(c1, w)
    if sr0 < sr1 and sc0 < sc1:
        out[sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = array[sr0:sr1, sc0:sc1]
    return out


def crop_local(m: TrinaryMap, robot, range_L: int, pad: CellState = UNCERTAIN) -> LocalPatch:
    if range_L < 1:
        raise MapDomainError(f"range_L must be >= 1, got {range_L}")
    if not m.in_bounds(robot):
        raise MapDomainError(f"robot {tuple(robot)} outside {m.height}x{m.width} map")
    robot = Cell(int(robot[0]), int(robot[1]))
    cells = crop_window(m.cells, robot, range_L, int(pad))
    origin = Cell(robot.row - range_L, robot.col - range_L)
    return LocalPatch(TrinaryMap(cells), origin, robot)


# Observation images: channel order (R, G, B) = (obstacle, uncertain, free).
_OBS_CHANNEL = {FREE: 2, UNCERTAIN: 1, OBSTACLE: 0}


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _load_png(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise MapFormatError(f"not a readable PNG image: {exc}") from exc
    return img


def encode_obs_image(m: TrinaryMap) -> bytes:
    rgb = np.zeros((m.height, m.width, 3), dtype=np.uint8)
    for state, ch in _OBS_CHANNEL.items():
        rgb[..., ch][m.mask(state)] = 255
    return _png_bytes(rgb, "RGB")


def decode_obs_image(data: bytes) -> TrinaryMap:
    img = _load_png(data)
    if img.mode != "RGB":
        raise MapFormatError(f"observation image must be 3-channel RGB, got mode {img.mode}")
    rgb = np.asarray(img)
    if not np.all((rgb == 0) | (rgb == 255)):
        r, c, _ = np.argwhere((rgb != 0) & (rgb != 255))[0]
        raise MapFormatError(f"pixel ({r}, {c}) has a channel value other than 0 or 255")
    on = rgb == 255
    bad = on.sum(axis=2) != 1
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise MapFormatError(f"pixel ({r}, {c}) = {tuple(int(v) for v in rgb[r, c])} does not set exactly one channel")
    cells = np.empty(rgb.shape[:2], dtype=np.uint8)
    for state, ch in _OBS_CHANNEL.items():
        cells[on[..., ch]] = int(state)
    return TrinaryMap(cells)


def encode_gt_image(m: TrinaryMap) -> bytes:
    if m.count(UNCERTAIN):
        r, c = np.argwhere(m.mask(UNCERTAIN))[0]
        raise MapDomainError(f"ground-truth map has an uncertain cell at ({r}, {c})")
    return _png_bytes(np.where(m.mask(OBSTACLE), 255, 0).astype(np.uint8), "L")


def decode_gt_image(data: bytes) -> TrinaryMap:
    img = _load_png(data)
    if img.mode != "L":
        raise MapFormatError(f"ground-truth image must be single-channel, got mode {img.mode}")
    gray = np.asarray(img)
    bad = (gray != 0) & (gray != 255)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise MapFormatError(f"pixel ({r}, {c}) = {int(gray[r, c])} is neither 0 nor 255")
    return TrinaryMap(np.where(gray == 255, int(OBSTACLE), int(FREE)).astype(np.uint8))


def check_thresholds(tau: float, nu: float) -> None:
    if not (0.0 <= tau < nu <= 1.0):
        raise ConfigError(f"thresholds need 0 <= tau < nu <= 1, got tau={tau}, nu={nu}")


def trinary_from_prob(p: ProbMap, tau: float, nu: float) -> TrinaryMap:
    check_thresholds(tau, nu)
    v = p.values
    cells = np.full(v.shape, int(UNCERTAIN), dtype=np.uint8)
    cells[v < tau] = int(FREE)
    cells[v > nu] = int(OBSTACLE)
    return TrinaryMap(cells)


def binarize(p: ProbMap) -> TrinaryMap:
    """Final reconstruction: below 0.5 free, above obstacle, untouched 0.5 uncertain."""
    v = p.values
    cells = np.full(v.shape, int(UNCERTAIN), dtype=np.uint8)
    cells[v < 0.5] = int(FREE)
    cells[v > 0.5] = int(OBSTACLE)
    return TrinaryMap(cells)
