"""Shared domain types, deterministic RNG streams, and bit-exact file formats.

Coordinates live on the unit square: a point is (x, y) with x, y in [0, 1].
Dense fields are stored as H x W x C grids where pixel (i, j) covers the cell
[j/W, (j+1)/W] x [i/H, (i+1)/H] and carries Lebesgue mass exactly 1/(H*W).

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

GRID_MAGIC = b"PPGRID1"
CHECKPOINT_MAGIC = b"PPCKPT1"
PHILOX_ID = "philox4x64"

# splitmix-style multiplier used to derive child stream indices
_STREAM_MIX = 0x9E3779B97F4A7C15
_U64 = 1 << 64


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValueError):
    """A file does not conform to its on-disk format."""


class ShapeError(ValueError):
    """Array or grid shapes are incompatible."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


# ---------------------------------------------------------------------------
# Random number streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible random stream.

    Identical (algorithm_id, seed, stream) triples reproduce identical value
    sequences across platforms.  The generator is counter-based (Philox 4x64),
    so sibling streams derived via :meth:`substream` are independent and may
    be consumed in any order, which keeps parallel runs deterministic.
    """

    seed: int
    stream: int = 0
    algorithm_id: str = PHILOX_ID

    def __post_init__(self) -> None:
        if self.algorithm_id != PHILOX_ID:
            raise ValidationError(f"unknown RNG algorithm: {self.algorithm_id!r}")
        object.__setattr__(self, "seed", int(self.seed) % _U64)
        object.__setattr__(self, "stream", int(self.stream) % _U64)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the origin of this stream."""
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "RngStream":
        """Derive the index-th child stream (e.g. one per image)."""
        if index < 0:
            raise ValidationError("substream index must be >= 0")
        child = (self.stream * _STREAM_MIX + index + 1) % _U64
        return replace(self, stream=child)

    def metadata(self) -> dict:
        return {"algorithm_id": self.algorithm_id, "seed": self.seed, "stream": self.stream}


# ---------------------------------------------------------------------------
# Marked points
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkedPoint:
    """A center point on [0,1]^2 with a (width, height, class) mark.

    Width/height marks may be any real number inside probabilistic
    computations; ground-truth marks are nonnegative and predictions are
    clamped at detection output only.
    """

    x: float
    y: float
    w: float = 0.0
    h: float = 0.0
    class_id: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValidationError(f"point ({self.x}, {self.y}) outside [0,1]^2")
        if self.class_id < 0:
            raise ValidationError("class_id must be >= 0")


@dataclass(frozen=True)
class MarkedPointConfig:
    """A finite, possibly empty, configuration of marked points on one image."""

    image_id: str
    points: tuple[MarkedPoint, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)

    def positions(self) -> np.ndarray:
        """(n, 2) array of (x, y) coordinates."""
        if not self.points:
            return np.zeros((0, 2))
        return np.array([(p.x, p.y) for p in self.points])

    def sizes(self) -> np.ndarray:
        """(n, 2) array of (w, h) marks."""
        if not self.points:
            return np.zeros((0, 2))
        return np.array([(p.w, p.h) for p in self.points])

    def classes(self) -> np.ndarray:
        return np.array([p.class_id for p in self.points], dtype=np.int64)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Dense H x W x C field over the unit square.

    Values are float64 internally and float32 on disk.  The array is copied
    on construction and frozen, so grids can be shared freely.
    """

    h_px: int
    w_px: int
    channels: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.h_px < 1 or self.w_px < 1 or self.channels < 1:
            raise ValidationError("grid dimensions must be >= 1")
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != (self.h_px, self.w_px, self.channels):
            raise ShapeError(
                f"grid values shape {v.shape} != ({self.h_px}, {self.w_px}, {self.channels})"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "Grid":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ShapeError(f"expected 2- or 3-d array, got shape {v.shape}")
        return cls(v.shape[0], v.shape[1], v.shape[2], v)

    def channel(self, k: int) -> np.ndarray:
        """Read-only (H, W) view of channel k."""
        return self.values[:, :, k]

    @property
    def pixel_mass(self) -> float:
        """Lebesgue mass of one pixel cell."""
        return 1.0 / (self.h_px * self.w_px)


def pixel_of(x: float, y: float, h_px: int, w_px: int) -> tuple[int, int]:
    """Nearest-pixel index (i, j) of a point in [0,1]^2.

    i = min(floor(y*H), H-1), j = min(floor(x*W), W-1); the upper domain
    boundary maps into the last row/column.
    """
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValidationError(f"point ({x}, {y}) outside [0,1]^2")
    i = min(int(math.floor(y * h_px)), h_px - 1)
    j = min(int(math.floor(x * w_px)), w_px - 1)
    return i, j


def pixels_of(xs: np.ndarray, ys: np.ndarray, h_px: int, w_px: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`pixel_of` for coordinate arrays."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size and (xs.min() < 0.0 or xs.max() > 1.0 or ys.min() < 0.0 or ys.max() > 1.0):
        raise ValidationError("coordinates outside [0,1]^2")
    ii = np.minimum(np.floor(ys * h_px).astype(np.int64), h_px - 1)
    jj = np.minimum(np.floor(xs * w_px).astype(np.int64), w_px - 1)
    return ii, jj


def pixel_centers(h_px: int, w_px: int) -> tuple[np.ndarray, np.ndarray]:
    """Center coordinates of every pixel: (ys of shape (H,), xs of shape (W,))."""
    ys = (np.arange(h_px) + 0.5) / h_px
    xs = (np.arange(w_px) + 0.5) / w_px
    return ys, xs


# ---------------------------------------------------------------------------
# Test regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestRegion:
    """Axis-aligned rectangle on [0,1]^2 queried for void probability."""

    cx: float
    cy: float
    rw: float
    rh: float

    def __post_init__(self) -> None:
        if not (self.rw > 0.0 and self.rh > 0.0):
            raise ValidationError("region width and height must be positive")
        if self.x_lo > 1.0 or self.x_hi < 0.0 or self.y_lo > 1.0 or self.y_hi < 0.0:
            raise ValidationError("region does not intersect [0,1]^2")

    @property
    def x_lo(self) -> float:
        return self.cx - 0.5 * self.rw

    @property
    def x_hi(self) -> float:
        return self.cx + 0.5 * self.rw

    @property
    def y_lo(self) -> float:
        return self.cy - 0.5 * self.rh

    @property
    def y_hi(self) -> float:
        return self.cy + 0.5 * self.rh

    @property
    def area(self) -> float:
        return self.rw * self.rh

    def contains(self, x: float, y: float) -> bool:
        """Closed-rectangle membership; boundary points belong to the region."""
        return self.x_lo <= x <= self.x_hi and self.y_lo <= y <= self.y_hi

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "rw": self.rw, "rh": self.rh}


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_grid(grid: Grid, path: str | Path) -> None:
    """Write a grid file: magic line, JSON header line, raw little-endian f32 payload."""
    if not np.isfinite(grid.values).all():
        raise ValidationError("grid contains non-finite values")
    header = {
        "h": grid.h_px,
        "w": grid.w_px,
        "c": grid.channels,
        "dtype": "f32",
        "order": "row-major",
        "endian": "little",
    }
    payload = grid.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + b"\n")
        fh.write(json.dumps(header, separators=(",", ":")).encode("ascii") + b"\n")
        fh.write(payload)


def read_grid(path: str | Path) -> Grid:
    """Read a grid file written by :func:`write_grid`.

    Round-trips are bit-exact at 32-bit precision.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, sep, rest = blob.partition(b"\n")
    if magic != GRID_MAGIC or not sep:
        raise FormatError(f"{path}: bad magic line")
    header_line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(header_line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    for key, expect in (("dtype", "f32"), ("order", "row-major"), ("endian", "little")):
        if header.get(key) != expect:
            raise FormatError(f"{path}: unsupported {key}={header.get(key)!r}")
    try:
        h, w, c = int(header["h"]), int(header["w"]), int(header["c"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: header missing shape fields") from exc
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)
    return Grid(h, w, c, values)


def write_config(cfg: MarkedPointConfig, path: str | Path) -> None:
    """Write a marked-point configuration as UTF-8 JSON (exact float round-trip)."""
    for p in cfg.points:
        if p.w < 0.0 or p.h < 0.0:
            raise ValidationError(f"{cfg.image_id}: negative ground-truth size ({p.w}, {p.h})")
    doc = {
        "image_id": cfg.image_id,
        "points": [
            {"x": p.x, "y": p.y, "w": p.w, "h": p.h, "class_id": p.class_id}
            for p in cfg.points
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_config(path: str | Path) -> MarkedPointConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from exc
    try:
        image_id = doc["image_id"]
        raw_points = doc["points"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing image_id/points") from exc
    points = []
    for rp in raw_points:
        if rp["w"] < 0.0 or rp["h"] < 0.0:
            raise ValidationError(f"{path}: negative ground-truth size in {rp}")
        points.append(
            MarkedPoint(
                x=float(rp["x"]),
                y=float(rp["y"]),
                w=float(rp["w"]),
                h=float(rp["h"]),
                class_id=int(rp["class_id"]),
            )
        )
    return MarkedPointConfig(image_id=str(image_id), points=tuple(points))


# ---------------------------------------------------------------------------
# Small parallel helper
# ---------------------------------------------------------------------------

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map preserving input order; results are identical for any thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
