"""Synthetic overhead depth scenes for desk-scale experiments.

A scene is a flat floor seen from a ceiling camera. Each person is a
spherical head cap over an elliptical shoulder mound; optional chairs are
flat boxes that must not be detected. Depth is distance from the camera in
millimetres, so the top of a person of height ``H`` sits at
``camera_height - H``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    DepthFrame,
    ManifestRecord,
    NORM_DIVISOR_MM,
    condition_for_count,
    derive_seed,
    save_depth,
    write_manifest,
)

HEAD_RADIUS_MM = 100.0


class SceneError(RuntimeError):
    """Objects could not be placed within the retry budget."""


@dataclass(frozen=True)
class SceneConfig:
    frame_size: tuple[int, int] = (212, 256)
    camera_height: float = 3400.0
    people: tuple[int, int] = (1, 4)
    person_height: tuple[float, float] = (1500.0, 1900.0)
    head_radius_px: tuple[float, float] = (7.0, 9.0)
    chair_prob: float = 0.0
    max_chairs: int = 2
    noise_sigma: float = 10.0
    min_separation_px: float = 32.0
    max_retries: int = 200

    def __post_init__(self):
        if self.person_height[1] >= self.camera_height:
            raise ValueError("people must be shorter than the camera height")
        if self.people[0] < 0 or self.people[1] < self.people[0]:
            raise ValueError(f"invalid person count range {self.people}")
        if not 0.0 <= self.chair_prob <= 1.0:
            raise ValueError("chair_prob must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def floor_depth(self) -> float:
        return self.camera_height


def _grid(shape):
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return rows.astype(np.float64), cols.astype(np.float64)


def _place(rng, n, shape, margin, others, min_sep, retries, what):
    placed = []
    h, w = shape
    for _ in range(n):
        for _attempt in range(retries):
            r = int(rng.integers(int(np.ceil(margin)), h - int(np.ceil(margin))))
            c = int(rng.integers(int(np.ceil(margin)), w - int(np.ceil(margin))))
            if all((r - a) ** 2 + (c - b) ** 2 >= min_sep ** 2 for a, b in others + placed):
                placed.append((r, c))
                break
        else:
            raise SceneError(f"could not place {what} #{len(placed) + 1} after {retries} attempts")
    return placed


def _render_person(depth, rows, cols, center, height_mm, head_px, camera, rng):
    r0, c0 = center
    top = camera - height_mm
    mm_per_px = HEAD_RADIUS_MM / head_px
    d = np.hypot(rows - r0, cols - c0)
    head = d <= head_px
    dist_mm = d[head] * mm_per_px
    cap = top + HEAD_RADIUS_MM - np.sqrt(np.maximum(HEAD_RADIUS_MM ** 2 - dist_mm ** 2, 0.0))
    depth[head] = np.minimum(depth[head], cap)
    # shoulders: elliptical dome 250 mm below the head top, random orientation
    theta = rng.uniform(0, np.pi)
    a, b = 2.3 * head_px, 1.3 * head_px
    u = (rows - r0) * np.cos(theta) + (cols - c0) * np.sin(theta)
    v = -(rows - r0) * np.sin(theta) + (cols - c0) * np.cos(theta)
    rho2 = (u / a) ** 2 + (v / b) ** 2
    body = rho2 <= 1.0
    shoulders = top + 250.0 + 150.0 * rho2[body]
    depth[body] = np.minimum(depth[body], shoulders)


def _render_chair(depth, center, rng, camera):
    h, w = depth.shape
    r0, c0 = center
    half = int(rng.integers(8, 13))
    seat = camera - 450.0
    r_lo, r_hi = max(0, r0 - half), min(h, r0 + half)
    c_lo, c_hi = max(0, c0 - half), min(w, c0 + half)
    depth[r_lo:r_hi, c_lo:c_hi] = np.minimum(depth[r_lo:r_hi, c_lo:c_hi], seat)
    back = max(2, half // 4)
    depth[r_lo:r_lo + back, c_lo:c_hi] = np.minimum(depth[r_lo:r_lo + back, c_lo:c_hi], camera - 900.0)


def sample_person_count(config: SceneConfig, rng: np.random.Generator) -> int:
    lo, hi = config.people
    return int(rng.integers(lo, hi + 1))


def generate_scene(config: SceneConfig = SceneConfig(), seed: int = 0) -> tuple[DepthFrame, np.ndarray]:
    """Render one frame. Returns the millimetre depth frame and (k, 2) head centres."""
    rng = np.random.default_rng(seed)
    shape = tuple(config.frame_size)
    depth = np.full(shape, config.floor_depth, dtype=np.float64)
    rows, cols = _grid(shape)

    n_people = sample_person_count(config, rng)
    head_px = rng.uniform(*config.head_radius_px, size=n_people)
    heights = rng.uniform(*config.person_height, size=n_people)
    heads = _place(rng, n_people, shape, config.head_radius_px[1] + 1, [], config.min_separation_px,
                   config.max_retries, "person")
    n_chairs = int((rng.random(config.max_chairs) < config.chair_prob).sum())
    chairs = _place(rng, n_chairs, shape, 13, heads, config.min_separation_px + 13,
                    config.max_retries, "chair")
    for center in chairs:
        _render_chair(depth, center, rng, config.camera_height)
    for center, hp, hm in zip(heads, head_px, heights):
        _render_person(depth, rows, cols, center, hm, hp, config.camera_height, rng)

    if config.noise_sigma > 0:
        depth = depth + rng.normal(0.0, config.noise_sigma, size=shape)
    depth = np.clip(np.rint(depth), 1, 65535).astype(np.uint16)
    labels = np.array(heads, dtype=np.float64).reshape(-1, 2)
    return DepthFrame(depth, normalized=False, source_id=f"synth:{seed}"), labels


def generate_dataset(config: SceneConfig, n_frames: int, seed: int, out_dir, fmt: str = "pgm") -> DatasetManifest:
    """Write ``n_frames`` scenes plus ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_frames):
        frame, labels = generate_scene(config, derive_seed(seed, "scene", i))
        rel = f"frames/{i:06d}.{fmt}"
        save_depth(out_dir / rel, frame.depth, fmt)
        records.append(ManifestRecord(rel, [tuple(map(float, p)) for p in labels], condition_for_count(len(labels))))
    manifest = DatasetManifest(records, tuple(config.frame_size), NORM_DIVISOR_MM, out_dir,
                               {"camera_height": config.camera_height, "seed": seed})
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
