"""Synthetic moving-shape videos, the frozen patch featurizer, and the SCV1 file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

SHAPES = ("disk", "rectangle", "triangle")


@dataclass(frozen=True)
class GenConfig:
    frames: int = 6
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 4
    shapes: tuple[str, ...] = SHAPES
    min_size: float = 8.0  # half-extent in pixels
    max_size: float = 14.0
    min_speed: float = 0.0  # pixels per frame
    max_speed: float = 3.0
    background_amplitude: float = 0.08
    patch_size: int = 8

    def validate(self) -> None:
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("frames, height and width must be positive")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"frame {self.height}x{self.width} not divisible by patch size {self.patch_size}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"object range {self.min_objects}-{self.max_objects} is inverted or negative")
        if self.max_objects > 65535:
            raise ConfigError("at most 65535 objects fit the u16 mask format")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError(f"size range {self.min_size}-{self.max_size} is invalid")
        if 2 * self.max_size > min(self.height, self.width):
            raise ConfigError(f"objects of half-extent {self.max_size} do not fit a {self.height}x{self.width} frame")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ConfigError(f"speed range {self.min_speed}-{self.max_speed} is invalid")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ConfigError(f"unknown shapes {sorted(unknown)}; palette is {SHAPES}")


@dataclass
class VideoSample:
    frames: np.ndarray  # float32 [T, 3, H, W] in [0, 1]
    gt_masks: np.ndarray  # int32 [T, H, W], 0 = background
    clip_id: str = ""
    num_objects: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.gt_masks, other.gt_masks)
        )


@dataclass(frozen=True)
class _Object:
    shape: str
    size: float
    aspect: float
    color: np.ndarray = field(compare=False)
    trajectory: np.ndarray = field(compare=False)  # [T, 2] (y, x) centres


def _bounce(p0: float, v: float, lo: float, hi: float, steps: int) -> np.ndarray:
    """Linear motion with elastic reflection inside [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return np.full(steps, lo)
    raw = (p0 - lo) + v * np.arange(steps)
    folded = np.mod(raw, 2 * span)
    return lo + np.where(folded > span, 2 * span - folded, folded)


def _object_mask(obj: _Object, t: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cy, cx = obj.trajectory[t]
    dy, dx = yy - cy, xx - cx
    r = obj.size
    if obj.shape == "disk":
        return dy * dy + dx * dx <= r * r
    if obj.shape == "rectangle":
        return (np.abs(dy) <= r * obj.aspect) & (np.abs(dx) <= r)
    # upward triangle inscribed in the [-r, r] box
    inside_y = (dy >= -r) & (dy <= r)
    half_width = r * (dy + r) / (2 * r)
    return inside_y & (np.abs(dx) <= half_width)


def _background(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing="ij")
    base = rng.uniform(0.2, 0.8, size=3)
    bg = np.empty((3, cfg.height, cfg.width))
    for c in range(3):
        field_ = np.zeros((cfg.height, cfg.width))
        for _ in range(3):
            ky, kx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([cfg.height, cfg.width])
            phase = rng.uniform(0, 2 * np.pi)
            field_ += np.sin(ky * yy + kx * xx + phase)
        bg[c] = base[c] + cfg.background_amplitude * field_ / 3.0
    return bg


def generate_clip(cfg: GenConfig, seed: int, clip_id: str | None = None) -> VideoSample:
    """Render one clip; identical ``(cfg, seed)`` gives bit-identical output."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    T, H, W = cfg.frames, cfg.height, cfg.width
    bg = _background(cfg, rng)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(count):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        size = float(rng.uniform(cfg.min_size, cfg.max_size))
        aspect = float(rng.uniform(0.6, 1.0)) if shape == "rectangle" else 1.0
        color = rng.uniform(0.0, 1.0, size=3)
        speed = float(rng.uniform(cfg.min_speed, cfg.max_speed))
        angle = float(rng.uniform(0, 2 * np.pi))
        ext_y = size * aspect
        y0 = float(rng.uniform(ext_y, H - 1 - ext_y))
        x0 = float(rng.uniform(size, W - 1 - size))
        ys = _bounce(y0, speed * np.sin(angle), ext_y, H - 1 - ext_y, T)
        xs = _bounce(x0, speed * np.cos(angle), size, W - 1 - size, T)
        objects.append(_Object(shape, size, aspect, color, np.stack([ys, xs], axis=1)))

    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    frames = np.empty((T, 3, H, W))
    masks = np.zeros((T, H, W), dtype=np.int32)
    for t in range(T):
        img = bg.copy()
        for idx, obj in enumerate(objects, start=1):
            m = _object_mask(obj, t, yy, xx)
            img[:, m] = obj.color[:, None]
            masks[t][m] = idx
        frames[t] = img
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return VideoSample(frames, masks, clip_id if clip_id is not None else f"seed{seed}", count)


def generate_dataset(cfg: GenConfig, count: int, seed: int) -> list[VideoSample]:
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [generate_clip(cfg, int(s), clip_id=f"clip{i:05d}") for i, s in enumerate(seeds)]


# -- frozen featurizer ---------------------------------------------------------
@dataclass(frozen=True)
class FeatConfig:
    patch_size: int = 8
    d_feat: int = 16
    gain: float = 3.0
    pos_amplitude: float = 1.0


@dataclass
class PatchFeatures:
    p: np.ndarray  # [T, N, D_feat]
    grid_h: int
    grid_w: int


class Featurizer:
    """Random linear patch map + positional offset + tanh, fixed at construction."""

    def __init__(self, cfg: FeatConfig, seed: int, grid_h: int, grid_w: int):
        rng = np.random.default_rng(seed)
        fan_in = cfg.patch_size * cfg.patch_size * 3
        self.cfg = cfg
        self.grid_h, self.grid_w = grid_h, grid_w
        self.weight = rng.normal(0.0, cfg.gain / np.sqrt(fan_in), size=(fan_in, cfg.d_feat))
        # offset is a random linear function of patch coordinates, so nearby patches get nearby offsets
        # and location stays decodable; i.i.d. per-patch noise left the decoder unable to place objects
        yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, grid_h), np.linspace(-1.0, 1.0, grid_w), indexing="ij")
        coords = np.stack([yy.ravel(), xx.ravel()], axis=1)
        self.offset = coords @ rng.normal(0.0, cfg.pos_amplitude, size=(2, cfg.d_feat))
        self.weight.setflags(write=False)
        self.offset.setflags(write=False)

    def pre_activation(self, frames: np.ndarray) -> np.ndarray:
        P = self.cfg.patch_size
        T, C, H, W = frames.shape
        if H % P or W % P:
            raise ConfigError(f"frame {H}x{W} not divisible by patch size {P}")
        if (H // P, W // P) != (self.grid_h, self.grid_w):
            raise ConfigError(f"featurizer built for a {self.grid_h}x{self.grid_w} grid, got {H // P}x{W // P}")
        x = frames.astype(np.float64) - 0.5
        patches = x.reshape(T, C, H // P, P, W // P, P).transpose(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(T, (H // P) * (W // P), C * P * P)
        return patches @ self.weight + self.offset

    def __call__(self, frames: np.ndarray) -> PatchFeatures:
        return PatchFeatures(np.tanh(self.pre_activation(frames)), self.grid_h, self.grid_w)


def featurize(frames: np.ndarray, cfg: FeatConfig, seed: int) -> PatchFeatures:
    P = cfg.patch_size
    H, W = frames.shape[-2:]
    if H % P or W % P:
        raise ConfigError(f"frame {H}x{W} not divisible by patch size {P}")
    return Featurizer(cfg, seed, H // P, W // P)(frames)


# -- SCV1 dataset file -----------------------------------------------------------
MAGIC = b"SCV1"


def write_dataset(samples: Sequence[VideoSample], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            T, C, H, W = s.frames.shape
            if C != 3 or s.gt_masks.shape != (T, H, W):
                raise ConfigError(f"sample {s.clip_id}: frames {s.frames.shape} vs masks {s.gt_masks.shape}")
            fh.write(struct.pack("<III", T, H, W))
            fh.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.gt_masks, dtype="<u2").tobytes())


def check_magic(head: bytes, magic: bytes) -> None:
    if len(head) < 4:
        raise FormatError("truncated", "file shorter than its magic bytes")
    if head != magic:
        if head[:3] == magic[:3] and head[3:4].isdigit():
            raise FormatError("version", f"expected {magic.decode()}, found {head.decode()}")
        raise FormatError("bad_magic", f"bad magic {head!r}")


def read_dataset(path: str | Path) -> list[VideoSample]:
    buf = Path(path).read_bytes()
    check_magic(buf[:4], MAGIC)
    if len(buf) < 8:
        raise FormatError("truncated", "missing sample count")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out = []
    for i in range(count):
        if len(buf) < pos + 12:
            raise FormatError("truncated", f"sample {i} header cut short")
        T, H, W = struct.unpack_from("<III", buf, pos)
        pos += 12
        if T == 0 or H == 0 or W == 0:
            raise FormatError("malformed", f"sample {i} has zero dimension {T}x{H}x{W}")
        nf, nm = T * 3 * H * W * 4, T * H * W * 2
        if len(buf) < pos + nf + nm:
            raise FormatError("truncated", f"sample {i} payload cut short")
        frames = np.frombuffer(buf, dtype="<f4", count=T * 3 * H * W, offset=pos).reshape(T, 3, H, W)
        pos += nf
        masks = np.frombuffer(buf, dtype="<u2", count=T * H * W, offset=pos).reshape(T, H, W)
        pos += nm
        out.append(
            VideoSample(
                frames.astype(np.float32),
                masks.astype(np.int32),
                clip_id=f"clip{i:05d}",
                num_objects=int(masks.max(initial=0)),
            )
        )
    if pos != len(buf):
        raise FormatError("malformed", f"{len(buf) - pos} trailing bytes after {count} samples")
    return out
