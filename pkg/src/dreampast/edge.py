"""Canny edge detection (numpy/scipy.ndimage)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])

DEFAULT_SIGMA = 1.4
DEFAULT_LOW = 0.1
DEFAULT_HIGH = 0.2

_TAN_22_5 = np.tan(np.pi / 8)


@dataclass(frozen=True)
class CannyParams:
    sigma: float = DEFAULT_SIGMA
    low: float = DEFAULT_LOW
    high: float = DEFAULT_HIGH

    def validate(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.low < self.high:
            raise ValueError(f"need 0 < low < high, got low={self.low}, high={self.high}")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "low": self.low, "high": self.high}


@dataclass(frozen=True)
class EdgeMap:
    edges: np.ndarray  # H x W uint8 in {0, 1}
    params: CannyParams


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[-1] == 1:
            return image[..., 0]
        return image[..., :3] @ LUMA
    if image.ndim != 2:
        raise ValueError(f"expected H x W or H x W x C image, got shape {image.shape}")
    return image


@lru_cache(maxsize=64)
def step_response(sigma: float) -> float:
    """Peak gradient of a smoothed unit step, used to put magnitudes on a [0, 1] contrast scale."""
    n = int(8 * sigma) + 8
    step = np.zeros(2 * n)
    step[n:] = 1.0
    s = ndimage.gaussian_filter1d(step, sigma, mode="reflect")
    return float(np.max(s[2:] - s[:-2]))


def gradients(gray: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed Sobel gradients; a unit step in intensity has peak magnitude 1."""
    smooth = ndimage.gaussian_filter(gray, sigma, mode="reflect")
    scale = 4.0 * step_response(sigma)
    gx = ndimage.sobel(smooth, axis=1, mode="reflect") / scale
    gy = ndimage.sobel(smooth, axis=0, mode="reflect") / scale
    # Rounding away last-bit noise keeps the result exactly equivariant under
    # 90-degree rotations, where summation order differs.
    return np.round(gx, 12), np.round(gy, 12)


def non_maximum_suppression(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    mag = np.hypot(gx, gy)
    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay < _TAN_22_5 * ax
    vert = ax < _TAN_22_5 * ay
    diag = ~horiz & ~vert
    same_sign = (gx * gy) > 0

    p = np.pad(mag, 1, mode="constant")
    h, w = mag.shape

    def shifted(dr: int, dc: int) -> np.ndarray:
        return p[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]

    keep = np.zeros_like(mag, dtype=bool)
    keep |= horiz & (mag >= shifted(0, -1)) & (mag >= shifted(0, 1))
    keep |= vert & (mag >= shifted(-1, 0)) & (mag >= shifted(1, 0))
    keep |= diag & same_sign & (mag >= shifted(-1, -1)) & (mag >= shifted(1, 1))
    keep |= diag & ~same_sign & (mag >= shifted(-1, 1)) & (mag >= shifted(1, -1))
    keep &= mag > 0
    return np.where(keep, mag, 0.0)


def hysteresis(thin: np.ndarray, low: float, high: float) -> np.ndarray:
    strong = thin >= high
    candidate = thin >= low
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(candidate)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels]


def canny(image: np.ndarray, sigma: float = DEFAULT_SIGMA, low: float = DEFAULT_LOW, high: float = DEFAULT_HIGH) -> EdgeMap:
    params = CannyParams(sigma, low, high)
    params.validate()
    gray = to_gray(image)
    if not np.isfinite(gray).all():
        raise ValueError("image contains non-finite pixels")
    gx, gy = gradients(gray, sigma)
    thin = non_maximum_suppression(gx, gy)
    edges = hysteresis(thin, low, high)
    return EdgeMap(edges=edges.astype(np.uint8), params=params)
