"""Depth-frame codecs, input preparation and dataset manifests.

Supported containers:

* binary PGM (``P5``); maxval > 255 means 16-bit big-endian samples
* 16-bit grayscale PNG
* raw little-endian uint16 with a JSON sidecar ``<file>.json`` holding
  ``{"height": H, "width": W}``
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

NORM_DIVISOR_MM = 4500.0
MANIFEST_FORMAT = "dpdnet-manifest"
MANIFEST_VERSION = 1


class DepthIOError(ValueError):
    """A depth file could not be read as the requested format."""


class ManifestError(ValueError):
    pass


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit sub-seed for ``labels`` under a master ``seed``."""
    text = ":".join([str(int(seed)), *map(str, labels)])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


@dataclass
class DepthFrame:
    """One depth image: millimetres (``normalized=False``) or [0, 1] reals."""

    depth: np.ndarray
    normalized: bool = False
    source_id: str = ""
    index: int = 0
    native_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.depth.ndim != 2:
            raise ValueError(f"depth frame must be 2-D, got shape {self.depth.shape}")
        if self.native_size is None:
            self.native_size = tuple(self.depth.shape)
        if self.normalized and (self.depth.min(initial=0) < 0 or self.depth.max(initial=0) > 1):
            raise ValueError("normalized depth must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.depth.shape)

    @property
    def invalid_mask(self) -> np.ndarray:
        if self.normalized:
            return np.zeros(self.depth.shape, dtype=bool)
        return self.depth <= 0


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------

_PGM_HEADER = re.compile(rb"^P5(?:\s+|#[^\n]*\n)*?(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise DepthIOError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise DepthIOError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = raw[m.end():]
    if len(payload) < expected:
        raise DepthIOError(f"{path}: truncated PGM payload, expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width).astype(np.uint16)


def write_pgm(path, depth: np.ndarray) -> None:
    arr = np.asarray(depth)
    if arr.ndim != 2:
        raise ValueError("PGM frames must be 2-D")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def read_png16(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DepthIOError(f"{path}: unreadable PNG ({exc})") from exc
    if arr.ndim != 2:
        raise DepthIOError(f"{path}: expected a single-channel PNG, got shape {arr.shape}")
    return arr.astype(np.uint16)


def write_png16(path, depth: np.ndarray) -> None:
    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path, format="PNG")


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def read_raw16(path, shape: Sequence[int] | None = None) -> np.ndarray:
    if shape is None:
        try:
            dims = json.loads(_sidecar(path).read_text())
            shape = (int(dims["height"]), int(dims["width"]))
        except (OSError, KeyError, ValueError) as exc:
            raise DepthIOError(f"{path}: missing or invalid sidecar {_sidecar(path).name}") from exc
    h, w = shape
    raw = Path(path).read_bytes()
    expected = 2 * h * w
    if len(raw) != expected:
        raise DepthIOError(f"{path}: expected {expected} bytes for {h}x{w}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<u2").reshape(h, w).astype(np.uint16)


def write_raw16(path, depth: np.ndarray) -> None:
    arr = np.asarray(depth)
    Path(path).write_bytes(arr.astype("<u2").tobytes())
    _sidecar(path).write_text(json.dumps({"height": arr.shape[0], "width": arr.shape[1]}))


_READERS = {"pgm": read_pgm, "png": read_png16, "raw": read_raw16}
_WRITERS = {"pgm": write_pgm, "png": write_png16, "raw": write_raw16}


def _format_of(path, fmt: str | None) -> str:
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    if fmt not in _READERS:
        raise DepthIOError(f"{path}: unsupported depth format {fmt!r}")
    return fmt


def load_depth(path, fmt: str | None = None, index: int = 0) -> DepthFrame:
    fmt = _format_of(path, fmt)
    try:
        depth = _READERS[fmt](path)
    except FileNotFoundError as exc:
        raise DepthIOError(f"{path}: no such file") from exc
    return DepthFrame(depth, normalized=False, source_id=str(path), index=index)


def save_depth(path, depth: np.ndarray, fmt: str | None = None) -> None:
    depth = np.asarray(depth)
    if depth.min(initial=0) < 0 or depth.max(initial=0) > 65535:
        raise ValueError("depth values must fit in uint16 millimetres")
    _WRITERS[_format_of(path, fmt)](path, np.rint(depth).astype(np.uint16))


# ---------------------------------------------------------------------------
# preparation
# ---------------------------------------------------------------------------

def _block_mean(x: np.ndarray, fh: int, fw: int) -> np.ndarray:
    h, w = x.shape
    return x.reshape(h // fh, fh, w // fw, fw).mean(axis=(1, 3))


def resize_depth(depth: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Resize to ``(height, width)``: block averaging for exact integer factors, else bilinear."""
    th, tw = size
    h, w = depth.shape
    if (h, w) == (th, tw):
        return depth.astype(np.float32, copy=True)
    if h % th == 0 and w % tw == 0:
        return _block_mean(depth.astype(np.float64), h // th, w // tw).astype(np.float32)
    return cv2.resize(depth.astype(np.float32), (tw, th), interpolation=cv2.INTER_LINEAR)


def prepare_input(frame: DepthFrame, size: Sequence[int], norm_divisor: float = NORM_DIVISOR_MM) -> DepthFrame:
    """Fill dropouts, resize to ``size`` and scale millimetres into [0, 1]."""
    size = tuple(size)
    if frame.normalized:
        if frame.shape == size:
            return frame
        resized = np.clip(resize_depth(frame.depth, size), 0.0, 1.0)
        return DepthFrame(resized, True, frame.source_id, frame.index, frame.native_size)
    depth = frame.depth.astype(np.float64)
    invalid = frame.invalid_mask
    if invalid.all():
        raise ValueError(f"frame {frame.source_id or frame.index} has no valid depth pixels")
    if invalid.any():
        depth = depth.copy()
        depth[invalid] = np.median(depth[~invalid])
    out = np.clip(resize_depth(depth, size) / norm_divisor, 0.0, 1.0).astype(np.float32)
    return DepthFrame(out, True, frame.source_id, frame.index, frame.native_size)


def rescale_labels(centroids, from_size: Sequence[int], to_size: Sequence[int]) -> np.ndarray:
    """Per-axis linear rescaling of (row, col) points, clamped inside the target frame."""
    fh, fw = from_size
    th, tw = to_size
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2).copy()
    pts[:, 0] = np.clip(pts[:, 0] * th / fh, 0, th - 1)
    pts[:, 1] = np.clip(pts[:, 1] * tw / fw, 0, tw - 1)
    return pts


def frames_to_batch(frames: Sequence[DepthFrame]) -> np.ndarray:
    return np.stack([f.depth for f in frames]).astype(np.float32)[..., None]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def condition_for_count(n: int) -> str:
    if n <= 0:
        return "no-people"
    if n == 1:
        return "single"
    if n == 2:
        return "two"
    return "multi"


@dataclass
class ManifestRecord:
    frame: str
    heads: list[tuple[float, float]]
    condition: str

    def to_json(self) -> dict:
        return {"frame": self.frame, "heads": [list(h) for h in self.heads], "condition": self.condition}


@dataclass
class DatasetManifest:
    """Header constants plus one record per frame; frame paths are relative to ``root``."""

    records: list[ManifestRecord]
    native_size: tuple[int, int]
    norm_divisor: float = NORM_DIVISOR_MM
    root: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def frame_path(self, i: int) -> Path:
        return self.root / self.records[i].frame

    def load_frame(self, i: int) -> DepthFrame:
        return load_depth(self.frame_path(i), index=i)

    def header(self) -> dict:
        return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                "native_size": list(self.native_size), "norm_divisor": self.norm_divisor, **self.extra}


def parse_header_line(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed header line: {exc}") from exc
    if not isinstance(header, dict):
        raise ManifestError("header line must be a JSON object")
    return header


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    lines = [json.dumps(manifest.header(), sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = parse_header_line(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    if int(header.get("version", 0)) != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
    h, w = (int(v) for v in header["native_size"])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
            rec = ManifestRecord(obj["frame"], [tuple(map(float, p)) for p in obj["heads"]], obj["condition"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad record ({exc})") from exc
        for r, c in rec.heads:
            if not (0 <= r < h and 0 <= c < w):
                raise ManifestError(f"{path}:{lineno}: head ({r}, {c}) outside {h}x{w}")
        if check_files and not (path.parent / rec.frame).is_file():
            raise ManifestError(f"{path}:{lineno}: missing frame file {rec.frame}")
        records.append(rec)
    extra = {k: v for k, v in header.items() if k not in ("format", "version", "native_size", "norm_divisor")}
    return DatasetManifest(records, (h, w), float(header.get("norm_divisor", NORM_DIVISOR_MM)),
                           path.parent, extra)


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
