"""Gaussian confidence-map targets and local-maximum decoding."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter


@dataclass(frozen=True)
class TargetSpec:
    sigma: float = 6.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.amplitude <= 1:
            raise ValueError(f"amplitude must be in (0, 1], got {self.amplitude}")


@dataclass(frozen=True)
class PeakParams:
    """Decoding thresholds; ``min_separation`` defaults to ``2 * sigma``."""

    tau: float = 0.5
    radius: int = 3
    min_separation: float = 12.0

    @classmethod
    def for_sigma(cls, sigma: float, tau: float = 0.5, radius: int = 3) -> "PeakParams":
        return cls(tau=tau, radius=radius, min_separation=2.0 * sigma)


def render_target(labels, spec: TargetSpec, height: int, width: int, dtype=np.float32) -> np.ndarray:
    """Sum of isotropic Gaussians at ``labels`` (row, col), clamped to [0, 1]."""
    pts = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((height, width), dtype=np.float64)
    if len(pts) == 0:
        return out.astype(dtype)
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= height) | (pts[:, 1] < 0) | (pts[:, 1] >= width)
    if bad.any():
        raise ValueError(f"label(s) {pts[bad].tolist()} outside a {height}x{width} map")
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    two_var = 2.0 * spec.sigma ** 2
    # separable: exp(-(dr^2 + dc^2) / 2s^2) = exp(-dr^2 / 2s^2) * exp(-dc^2 / 2s^2)
    gr = np.exp(-((rows[None, :] - pts[:, :1]) ** 2) / two_var)
    gc = np.exp(-((cols[None, :] - pts[:, 1:]) ** 2) / two_var)
    out = spec.amplitude * np.einsum("kr,kc->rc", gr, gc)
    return np.clip(out, 0.0, 1.0).astype(dtype)


def strict_local_maxima(confidence: np.ndarray, radius: int) -> np.ndarray:
    """Boolean mask of pixels strictly greater than every other pixel in their window."""
    size = 2 * radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[radius, radius] = False
    neighbours = maximum_filter(confidence, footprint=footprint, mode="constant", cval=-np.inf)
    return confidence > neighbours


def extract_peaks(confidence: np.ndarray, tau: float = 0.5, radius: int = 3,
                  min_separation: float = 12.0) -> np.ndarray:
    """Decode a confidence map into an ``(k, 3)`` array of (row, col, score).

    Candidates are strict window maxima scoring at least ``tau``. They are
    then visited by descending score and kept only if no kept peak lies
    closer than ``min_separation``.
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    m = np.asarray(confidence, dtype=np.float64)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    mask = strict_local_maxima(m, radius) & (m >= tau)
    rows, cols = np.nonzero(mask)
    scores = m[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    kept: list[tuple[int, int, float]] = []
    min_sq = float(min_separation) ** 2
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if all((r - kr) ** 2 + (c - kc) ** 2 >= min_sq for kr, kc, _ in kept):
            kept.append((r, c, float(scores[idx])))
    return np.array(kept, dtype=np.float64).reshape(-1, 3)


def rescale_points(points, from_size: Sequence[int], to_size: Sequence[int]) -> np.ndarray:
    """Scale (row, col, ...) coordinates per axis and round to the nearest pixel."""
    fh, fw = from_size
    th, tw = to_size
    if min(fh, fw, th, tw) <= 0:
        raise ValueError("sizes must be positive")
    pts = np.array(points, dtype=np.float64)
    if pts.ndim != 2:
        pts = pts.reshape(-1, 2)
    pts[:, 0] = np.floor(pts[:, 0] * (th / fh) + 0.5)
    pts[:, 1] = np.floor(pts[:, 1] * (tw / fw) + 0.5)
    return pts


def rescale_detections(detections, from_size, to_size) -> np.ndarray:
    return rescale_points(detections, from_size, to_size)


def write_pgm8(path, confidence: np.ndarray) -> None:
    """Export a [0, 1] map as binary 8-bit PGM with value ``round(255 * v)``."""
    m = np.asarray(confidence, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    pixels = np.rint(np.clip(m, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
