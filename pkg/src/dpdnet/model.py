"""DPDnet: a main encoder-decoder block followed by a refinement block.

Both blocks map an overhead depth image to a per-pixel confidence map of the
same size. The refinement block sees the depth image concatenated with the
main block's map.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .layers import (
    BatchNorm,
    Concatenate,
    Conv2D,
    Conv2DTranspose,
    Cropping2D,
    MaxPool2D,
    Module,
    ReLU,
    SeparableConv2D,
    Sequential,
    Sigmoid,
    UpSampling2D,
    ZeroPadding2D,
)
from . import layers as _layers
from .tensor import Tensor


@dataclass(frozen=True)
class ModelVariant:
    name: str
    input_size: tuple[int, int]
    sigma: float
    tag: int

    @property
    def height(self) -> int:
        return self.input_size[0]

    @property
    def width(self) -> int:
        return self.input_size[1]


STANDARD = ModelVariant("std", (212, 256), 6.0, 0)
FAST = ModelVariant("fast", (106, 128), 3.0, 1)
VARIANTS = {v.name: v for v in (STANDARD, FAST)}


def get_variant(variant) -> ModelVariant:
    if isinstance(variant, ModelVariant):
        return variant
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None


def variant_from_tag(tag: int) -> ModelVariant:
    for v in VARIANTS.values():
        if v.tag == tag:
            return v
    raise ValueError(f"unknown variant tag {tag}")


@dataclass(frozen=True)
class ResidualBlockSpec:
    filters: tuple[int, int, int]
    kernel: int = 3
    stride: int = 1
    direction: str = "encoding"
    flavor: str = "standard"

    def __post_init__(self):
        if len(self.filters) != 3 or min(self.filters) < 1:
            raise ValueError(f"filters must be three positive ints, got {self.filters}")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        if self.direction not in ("encoding", "decoding"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.flavor not in ("standard", "separable"):
            raise ValueError(f"unknown conv flavor {self.flavor!r}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.direction == "encoding":
            return -(-h // self.stride), -(-w // self.stride)
        return h * self.stride, w * self.stride


class ResidualBlock(Module):
    """Bottleneck residual unit: 1x1 -> kxk -> 1x1 main branch plus a 1x1 projection shortcut."""

    def __init__(self, in_channels: int, spec: ResidualBlockSpec, rng=None):
        rng = rng or np.random.default_rng()
        a, b, c = spec.filters
        k, s = spec.kernel, spec.stride
        self.spec = spec
        mid_conv = SeparableConv2D if spec.flavor == "separable" else Conv2D
        if spec.direction == "encoding":
            self.branch = Sequential(
                conv1=Conv2D(in_channels, a, 1, s, rng), bn1=BatchNorm(a), relu1=ReLU(),
                conv2=mid_conv(a, b, k, 1, rng), bn2=BatchNorm(b), relu2=ReLU(),
                conv3=Conv2D(b, c, 1, 1, rng), bn3=BatchNorm(c),
            )
            self.shortcut = Sequential(conv=Conv2D(in_channels, c, 1, s, rng), bn=BatchNorm(c))
        else:
            up = {"up": UpSampling2D(s)} if s > 1 else {}
            self.branch = Sequential(
                **up,
                conv1=Conv2D(in_channels, a, 1, 1, rng), bn1=BatchNorm(a), relu1=ReLU(),
                conv2=mid_conv(a, b, k, 1, rng), bn2=BatchNorm(b), relu2=ReLU(),
                conv3=Conv2D(b, c, 1, 1, rng), bn3=BatchNorm(c),
            )
            up = {"up": UpSampling2D(s)} if s > 1 else {}
            self.shortcut = Sequential(**up, conv=Conv2D(in_channels, c, 1, 1, rng), bn=BatchNorm(c))

    def forward(self, x):
        saved, _layers._TRACE = _layers._TRACE, None
        try:
            return F.relu(self.branch(x) + self.shortcut(x))
        finally:
            _layers._TRACE = saved


def build_encoding_block(in_channels: int, spec: ResidualBlockSpec, rng=None) -> ResidualBlock:
    if spec.direction != "encoding":
        raise ValueError("build_encoding_block needs an encoding spec")
    return ResidualBlock(in_channels, spec, rng)


def build_decoding_block(in_channels: int, spec: ResidualBlockSpec, rng=None) -> ResidualBlock:
    if spec.direction != "decoding":
        raise ValueError("build_decoding_block needs a decoding spec")
    return ResidualBlock(in_channels, spec, rng)


def _ceil_split(excess: int) -> tuple[int, int]:
    return (excess + 1) // 2, excess // 2


def _width(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


class _Planner:
    """Threads spatial extents and channel counts through a layer chain."""

    def __init__(self, h: int, w: int, channels: int, scale: float, rng):
        self.h, self.w, self.c = h, w, channels
        self.scale = scale
        self.rng = rng
        self.layers: dict[str, Module] = {}

    def add(self, name: str, layer: Module, hw=None, channels=None):
        self.layers[name] = layer
        if hw is not None:
            self.h, self.w = hw
        if channels is not None:
            self.c = channels

    def stem(self, filters: int = 64):
        f = _width(filters, self.scale)
        self.add("stem_conv", Conv2D(self.c, f, 7, 2, self.rng), (-(-self.h // 2), -(-self.w // 2)), f)
        self.add("stem_bn", BatchNorm(f))
        self.add("stem_relu", ReLU())
        self.add("pool", MaxPool2D(3), (self.h // 3, self.w // 3))

    def block(self, name: str, filters, stride: int, direction: str, flavor: str = "standard"):
        spec = ResidualBlockSpec(tuple(_width(f, self.scale) for f in filters), 3, stride, direction, flavor)
        self.add(name, ResidualBlock(self.c, spec, self.rng), spec.output_hw(self.h, self.w), spec.filters[2])


def _crop_to(h: int, w: int, target_h: int, target_w: int) -> tuple[tuple[int, int], tuple[int, int]]:
    if h < target_h or w < target_w:
        raise ValueError(f"cannot crop {h}x{w} to {target_h}x{target_w}")
    return _ceil_split(h - target_h), _ceil_split(w - target_w)


def build_main_block(variant=STANDARD, filter_scale: float = 1.0, rng=None) -> Sequential:
    """Main block: stem, three encoders, three separable decoders, x6 upscaling head."""
    variant = get_variant(variant)
    rng = rng or np.random.default_rng()
    th, tw = variant.input_size
    p = _Planner(th, tw, 1, filter_scale, rng)
    p.stem()
    p.block("enc1", (64, 64, 256), 1, "encoding")
    p.block("enc2", (128, 128, 512), 2, "encoding")
    p.block("enc3", (256, 256, 1024), 2, "encoding")
    p.block("dec1", (1024, 1024, 256), 1, "decoding", "separable")
    p.block("dec2", (512, 512, 128), 2, "decoding", "separable")
    p.block("dec3", (256, 256, 64), 2, "decoding", "separable")
    # smallest map that still covers the target after x3 upsampling and a x2 transposed conv
    need_h, need_w = math.ceil(th / 6), math.ceil(tw / 6)
    if p.h < need_h or p.w < need_w:
        pad = (max(0, -(-(need_h - p.h) // 2)), max(0, -(-(need_w - p.w) // 2)))
        p.add("pad1", ZeroPadding2D(pad), (p.h + 2 * pad[0], p.w + 2 * pad[1]))
    p.add("crop1", Cropping2D(_crop_to(p.h, p.w, need_h, need_w)), (need_h, need_w))
    p.add("up", UpSampling2D(3), (p.h * 3, p.w * 3))
    f = _width(64, filter_scale)
    p.add("deconv", Conv2DTranspose(p.c, f, 7, 2, rng), (p.h * 2, p.w * 2), f)
    p.add("crop2", Cropping2D(_crop_to(p.h, p.w, th, tw)), (th, tw))
    p.add("head_bn", BatchNorm(p.c))
    p.add("head_relu", ReLU())
    p.add("head_conv", Conv2D(p.c, 1, 3, 1, rng), channels=1)
    p.add("sigmoid", Sigmoid())
    body = Sequential(**p.layers)
    body.label = "main"
    return body


class RefinementBlock(Module):
    """Shallower encoder-decoder over the depth image stacked with the main map."""

    def __init__(self, variant=STANDARD, filter_scale: float = 1.0, rng=None):
        variant = get_variant(variant)
        rng = rng or np.random.default_rng()
        th, tw = variant.input_size
        p = _Planner(th, tw, 2, filter_scale, rng)
        p.stem()
        p.block("enc1", (64, 64, 256), 1, "encoding")
        p.block("enc2", (128, 128, 512), 2, "encoding")
        p.block("dec1", (512, 512, 128), 2, "decoding")
        p.block("dec2", (256, 256, 64), 2, "decoding")
        # smallest symmetric zero padding so that x3 upsampling covers the target
        pad_h = max(0, -(-(math.ceil(th / 3) - p.h) // 2))
        pad_w = max(0, -(-(math.ceil(tw / 3) - p.w) // 2))
        p.add("pad", ZeroPadding2D((pad_h, pad_w)), (p.h + 2 * pad_h, p.w + 2 * pad_w))
        p.add("up", UpSampling2D(3), (p.h * 3, p.w * 3))
        p.add("crop", Cropping2D(_crop_to(p.h, p.w, th, tw)), (th, tw))
        p.add("head_conv", Conv2D(p.c, 1, 3, 1, rng), channels=1)
        p.add("sigmoid", Sigmoid())
        self.fuse = Concatenate()
        self.body = Sequential(**p.layers)
        self.body.label = "refine"

    def forward(self, depth, confidence):
        x = self.fuse(depth, confidence)
        if _layers._TRACE is not None:
            _layers._TRACE.append(("refine.fuse", x.shape))
        return self.body(x)


def build_refinement_block(variant=STANDARD, filter_scale: float = 1.0, rng=None) -> RefinementBlock:
    return RefinementBlock(variant, filter_scale, rng)


class DPDNet(Module):
    """Full two-stage network. ``forward`` returns ``(main_map, refined_map)``."""

    def __init__(self, variant=STANDARD, filter_scale: float = 1.0, seed: int = 0):
        if filter_scale <= 0:
            raise ValueError(f"filter_scale must be positive, got {filter_scale}")
        self.variant = get_variant(variant)
        self.filter_scale = float(filter_scale)
        rng = np.random.default_rng(seed)
        self.main = build_main_block(self.variant, self.filter_scale, rng)
        self.refine = build_refinement_block(self.variant, self.filter_scale, rng)

    def main_parameters(self) -> list[Tensor]:
        return self.main.parameters()

    def refinement_parameters(self) -> list[Tensor]:
        return self.refine.parameters()

    def check_input(self, x: Tensor) -> None:
        expected = (*self.variant.input_size, 1)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"{self.variant.name} model expects input (batch, {expected[0]}, {expected[1]}, 1), got {x.shape}"
            )

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        main_out = self.main(x)
        return main_out, self.refine(x, main_out)


def forward(model: DPDNet, frames) -> tuple[Tensor, Tensor]:
    return model(frames)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DPDN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHBfI")


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def save_checkpoint(model: DPDNet, path) -> None:
    """Write parameters and batch-norm statistics as little-endian float32.

    Layout: magic ``DPDN``, u16 version, u8 variant tag, f32 filter scale,
    u32 tensor count; then per tensor a u16 name length, the UTF-8 name, a u8
    rank, u32 dims and the raw values.
    """
    state = model.state_dict()
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.variant.tag,
                          model.filter_scale, len(state))]
    for name, value in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}: "
                                  f"needed {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> DPDNet:
    """Rebuild the model recorded in ``path``; parameters round-trip bitwise."""
    r = _Reader(Path(path).read_bytes())
    magic, version, tag, scale, count = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        variant = variant_from_tag(tag)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    # shortest decimal that maps to the stored f32, so 0.3 rebuilds as 0.3
    model = DPDNet(variant, float(str(np.float32(scale))))
    expected = model.state_dict()
    names = list(expected)
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, model needs {len(expected)}")
    state = {}
    for i in range(count):
        label = names[i]
        (n,) = r.unpack("<H", f"name length of tensor '{label}'")
        name = r.take(n, f"name of tensor '{label}'").decode("utf-8")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor '{name}'")
        (rank,) = r.unpack("<B", f"rank of tensor '{name}'")
        dims = r.unpack(f"<{rank}I", f"dims of tensor '{name}'")
        if tuple(dims) != expected[name].shape:
            raise CheckpointError(f"shape mismatch for tensor '{name}': file {tuple(dims)}, "
                                  f"model {expected[name].shape}")
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * size, f"data of tensor '{name}'")
        state[name] = np.frombuffer(data, dtype="<f4").reshape(dims)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{len(r.blob) - r.pos} trailing bytes after the last tensor")
    model.load_state_dict(state)
    model.eval()
    return model
