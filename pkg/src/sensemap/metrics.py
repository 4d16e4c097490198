"""Map-quality and exploration metrics.

pLPIPS and pFID are proxies: they use the fixed seeded feature network from
:mod:`sensemap.training` instead of pretrained AlexNet/Inception backbones,
so their values are not comparable with published LPIPS/FID numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import correlate2d

from .gridmap import FREE, MapDomainError, TrinaryMap


class MetricNumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass
class MetricsReport:
    ssim: float
    plpips: float
    pfid: Optional[float]
    rho: Optional[float] = None
    ra: Optional[float] = None
    n_samples: int = 0


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_map(x, y, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-window SSIM over every fully-contained Gaussian window."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise MapDomainError(f"ssim needs equal 2-D shapes, got {x.shape} and {y.shape}")
    if min(x.shape) < cfg.window:
        raise MapDomainError(f"image {x.shape} smaller than the {cfg.window}x{cfg.window} window")
    k = gaussian_window(cfg.window, cfg.sigma)

    def filt(a):
        return correlate2d(a, k, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * sxy + cfg.c2)
    den = (mu_x**2 + mu_y**2 + cfg.c1) * (sxx + syy + cfg.c2)
    return num / den


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    return float(np.mean(ssim_map(x, y, cfg)))


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a)
    return a / n if n > 0 else a


def plpips(phi, x, y) -> float:
    """Sum over feature layers of the L2 distance between unit-normalised activations."""
    fx = phi.activations(x)
    fy = phi.activations(y)
    return float(sum(np.linalg.norm(_unit(a) - _unit(b)) for a, b in zip(fx, fy)))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = _clamp_eigs(vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _clamp_eigs(vals: np.ndarray) -> np.ndarray:
    if vals.min(initial=0.0) < -1e-10:
        raise MetricNumericError(f"matrix not positive semidefinite (eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None)


def frechet_distance(mu_x, cov_x, mu_y, cov_y) -> float:
    mu_x, mu_y = np.atleast_1d(mu_x), np.atleast_1d(mu_y)
    cov_x, cov_y = np.atleast_2d(cov_x), np.atleast_2d(cov_y)
    root_x = _sym_sqrt(cov_x)
    inner = root_x @ cov_y @ root_x
    inner = (inner + inner.T) / 2.0
    tr_sqrt = float(np.sum(np.sqrt(_clamp_eigs(np.linalg.eigvalsh(inner)))))
    diff = mu_x - mu_y
    return float(diff @ diff + np.trace(cov_x) + np.trace(cov_y) - 2.0 * tr_sqrt)


def pfid(features_x, features_y) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows = samples)."""
    fx = np.asarray(features_x, dtype=np.float64)
    fy = np.asarray(features_y, dtype=np.float64)
    if fx.ndim == 1:
        fx = fx[:, None]
    if fy.ndim == 1:
        fy = fy[:, None]
    if fx.shape[1] != fy.shape[1]:
        raise MapDomainError(f"feature dims differ: {fx.shape[1]} vs {fy.shape[1]}")
    need = fx.shape[1] + 1
    if len(fx) < need or len(fy) < need:
        raise MapDomainError(f"pfid needs >= {need} samples per side, got {len(fx)} and {len(fy)}")
    mu_x, mu_y = fx.mean(axis=0), fy.mean(axis=0)
    cov_x = np.atleast_2d(np.cov(fx, rowvar=False))
    cov_y = np.atleast_2d(np.cov(fy, rowvar=False))
    return max(frechet_distance(mu_x, cov_x, mu_y, cov_y), 0.0)


def coverage_rho(m: TrinaryMap, truth: TrinaryMap) -> float:
    if m.shape != truth.shape:
        raise MapDomainError(f"shape mismatch {m.shape} vs {truth.shape}")
    denom = truth.count(FREE)
    if denom == 0:
        raise MapDomainError("ground truth has no free cells")
    return m.count(FREE) / denom


def reconstruction_accuracy(m: TrinaryMap, truth: TrinaryMap) -> float:
    if m.shape != truth.shape:
        raise MapDomainError(f"shape mismatch {m.shape} vs {truth.shape}")
    claimed = m.mask(FREE)
    n = int(claimed.sum())
    if n == 0:
        raise MapDomainError("reconstruction has no free cells")
    return int(np.count_nonzero(claimed & truth.mask(FREE))) / n
