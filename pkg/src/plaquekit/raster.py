"""Planar image container, colour-space transforms and spatial convolution.

Everything here is a pure function over read-only arrays: the pixel buffer of
a :class:`PlanarImage` is frozen on construction, so images may be shared
between threads or handed to worker processes without copying defensively.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ChannelCountMismatch, DimensionMismatch, WrongColorspace

__all__ = [
    "ColorSpace",
    "PlanarImage",
    "Kernel2D",
    "ChannelStats",
    "DIRECTIONAL_LAPLACIAN",
    "OD_FLOOR",
    "LMS_FLOOR",
    "round_half_away",
    "to_uint8",
    "split_channels",
    "merge_channels",
    "to_optical_density",
    "from_optical_density",
    "rgb_to_decorrelated_lab",
    "decorrelated_lab_to_rgb",
    "channel_stats",
    "convolve2d",
    "read_image",
    "write_image",
]


class ColorSpace(str, enum.Enum):
    RGB8 = "RGB8"
    OD = "OD"
    LAB_DECORR = "LAB_DECORR"
    GRAY = "GRAY"
    RGBA_ENHANCED = "RGBA_ENHANCED"

    @property
    def channel_names(self) -> tuple[str, ...]:
        return _CHANNEL_NAMES[self]

    @property
    def is_8bit(self) -> bool:
        return self in (ColorSpace.RGB8, ColorSpace.RGBA_ENHANCED)


_CHANNEL_NAMES = {
    ColorSpace.RGB8: ("red", "green", "blue"),
    ColorSpace.OD: ("od_red", "od_green", "od_blue"),
    ColorSpace.LAB_DECORR: ("l", "alpha", "beta"),
    ColorSpace.GRAY: ("gray",),
    ColorSpace.RGBA_ENHANCED: ("red", "green", "blue", "enhanced"),
}


@dataclass(frozen=True, eq=False)
class PlanarImage:
    """A 2-D raster with an explicit colour-space tag.

    ``data`` is stored as ``(height, width, channels)``. 8-bit spaces hold
    ``uint8``, OD and lαβ hold ``float64``; GRAY may be either.
    """

    data: np.ndarray
    space: ColorSpace

    def __post_init__(self):
        space = ColorSpace(self.space)
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionMismatch(f"expected a 2-D raster, got shape {arr.shape}")
        n = len(space.channel_names)
        if arr.shape[2] != n:
            raise ChannelCountMismatch(
                f"{space.value} needs {n} channel(s), got {arr.shape[2]}"
            )
        if space.is_8bit:
            if arr.dtype != np.uint8:
                raise TypeError(f"{space.value} data must be uint8, got {arr.dtype}")
        elif space is ColorSpace.GRAY:
            if arr.dtype not in (np.uint8, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = arr.astype(np.float64, copy=False)
        if space is ColorSpace.RGBA_ENHANCED and not np.isin(arr[:, :, 3], (0, 255)).all():
            raise ValueError("enhancement channel must hold only 0 and 255")
        if space is ColorSpace.OD and (arr < 0).any():
            raise ValueError("optical density must be non-negative")
        arr = np.array(arr, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "space", space)

    @classmethod
    def rgb(cls, data) -> PlanarImage:
        return cls(np.asarray(data, dtype=np.uint8), ColorSpace.RGB8)

    @classmethod
    def gray(cls, data) -> PlanarImage:
        return cls(np.asarray(data), ColorSpace.GRAY)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def channels(self) -> tuple[str, ...]:
        return self.space.channel_names

    def plane(self, index: int = 0) -> np.ndarray:
        """Read-only 2-D view of one channel."""
        return self.data[:, :, index]

    def __eq__(self, other):
        if not isinstance(other, PlanarImage):
            return NotImplemented
        return (
            self.space is other.space
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Kernel2D:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {w.shape}")
        if not np.isfinite(w).all():
            raise ValueError("kernel weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Kernel2D):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    __hash__ = None


# Directional Laplacian used by the enhancement pipeline; printed asymmetric,
# sums to 4, and happens to be invariant under 180-degree rotation.
DIRECTIONAL_LAPLACIAN = Kernel2D(
    np.array([[-1, -1, 1], [-1, 8, -1], [1, -1, -1]], dtype=np.float64)
)


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> ChannelStats:
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy rounds half-to-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def to_uint8(x) -> np.ndarray:
    """Round half away from zero, clamp to [0, 255], cast."""
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def _require(img: PlanarImage, *spaces: ColorSpace) -> None:
    if img.space not in spaces:
        names = "/".join(s.value for s in spaces)
        raise WrongColorspace(f"expected {names} image, got {img.space.value}")


def split_channels(img: PlanarImage) -> tuple[PlanarImage, PlanarImage, PlanarImage]:
    _require(img, ColorSpace.RGB8)
    return tuple(PlanarImage(img.plane(i), ColorSpace.GRAY) for i in range(3))


def merge_channels(planes: Sequence[PlanarImage], space: ColorSpace) -> PlanarImage:
    space = ColorSpace(space)
    if len(planes) != len(space.channel_names):
        raise ChannelCountMismatch(
            f"{space.value} needs {len(space.channel_names)} planes, got {len(planes)}"
        )
    for p in planes:
        _require(p, ColorSpace.GRAY)
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise DimensionMismatch(f"plane shapes differ: {sorted(shapes)}")
    stacked = np.stack([p.plane(0) for p in planes], axis=-1)
    if space.is_8bit and stacked.dtype != np.uint8:
        raise TypeError(f"{space.value} planes must be uint8")
    return PlanarImage(stacked, space)


# Intensities are clamped to this floor before the log so that v = 0 stays finite.
OD_FLOOR = 0.5


def to_optical_density(img: PlanarImage, background_intensity: float = 255.0) -> PlanarImage:
    """Per-channel optical density ``-log10(max(v, 0.5) / I0)``.

    Values brighter than ``background_intensity`` would give negative density
    and are clipped to 0.
    """
    _require(img, ColorSpace.RGB8)
    if background_intensity <= 0:
        raise ValueError("background_intensity must be positive")
    # 8-bit input has 256 possible values, so evaluate the formula once per value
    v = np.maximum(np.arange(256, dtype=np.float64), OD_FLOOR)
    table = np.maximum(-np.log10(v / background_intensity), 0.0)
    return PlanarImage(table[img.data], ColorSpace.OD)


def from_optical_density(img: PlanarImage, background_intensity: float = 255.0) -> PlanarImage:
    _require(img, ColorSpace.OD)
    return PlanarImage(to_uint8(background_intensity * 10.0 ** (-img.data)), ColorSpace.RGB8)


# RGB -> LMS cone response and LMS(log) -> lαβ, as published for the lαβ
# colour-transfer method. Inverses are computed, not the rounded published ones,
# so the round trip is exact up to floating point.
RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
LOGLMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64
)
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LAB_TO_LOGLMS = np.linalg.inv(LOGLMS_TO_LAB)

# LMS responses (0..255 scale) are floored here before log10; small enough that
# flooring never moves a pixel by more than a tenth of an 8-bit step.
LMS_FLOOR = 0.01


def rgb_to_decorrelated_lab(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.RGB8)
    rgb = img.data.astype(np.float64)
    lms = rgb @ RGB_TO_LMS.T
    log_lms = np.log10(np.maximum(lms, LMS_FLOOR))
    return PlanarImage(log_lms @ LOGLMS_TO_LAB.T, ColorSpace.LAB_DECORR)


def lab_to_rgb_float(lab: np.ndarray) -> np.ndarray:
    """Unquantised inverse of the lαβ transform on a ``(..., 3)`` array."""
    log_lms = np.clip(lab @ LAB_TO_LOGLMS.T, -30.0, 30.0)
    return (10.0**log_lms) @ LMS_TO_RGB.T


def decorrelated_lab_to_rgb(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.LAB_DECORR)
    return PlanarImage(to_uint8(lab_to_rgb_float(img.data)), ColorSpace.RGB8)


def channel_stats(img: PlanarImage) -> ChannelStats:
    flat = img.data.reshape(-1, img.data.shape[2]).astype(np.float64)
    return ChannelStats(
        tuple(float(m) for m in flat.mean(axis=0)),
        tuple(float(s) for s in flat.std(axis=0)),
    )


def convolve2d(img: PlanarImage, kernel: Kernel2D) -> PlanarImage:
    """True 2-D convolution (kernel flipped) with replicate padding.

    Output is float64 and never clamped.
    """
    _require(img, ColorSpace.GRAY)
    x = img.plane(0).astype(np.float64)
    h, w = x.shape
    r = kernel.size // 2
    padded = np.pad(x, r, mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    k = kernel.weights
    for i in range(kernel.size):
        for j in range(kernel.size):
            if k[i, j] != 0.0:
                out += k[i, j] * padded[2 * r - i : 2 * r - i + h, 2 * r - j : 2 * r - j + w]
    return PlanarImage(out, ColorSpace.GRAY)


def read_image(path) -> PlanarImage:
    """Load an 8-bit PNG/TIFF as RGB8 (or RGBA_ENHANCED for 4-channel files
    whose alpha plane is binary)."""
    with Image.open(path) as im:
        if im.mode == "RGBA":
            arr = np.asarray(im)
            if np.isin(arr[:, :, 3], (0, 255)).all():
                return PlanarImage(arr, ColorSpace.RGBA_ENHANCED)
            return PlanarImage(arr[:, :, :3], ColorSpace.RGB8)
        if im.mode == "L":
            return PlanarImage(np.asarray(im), ColorSpace.GRAY)
        return PlanarImage(np.asarray(im.convert("RGB")), ColorSpace.RGB8)


def read_mask(path) -> np.ndarray:
    """Load a mask file as a boolean array; any non-zero sample is foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def write_image(img: PlanarImage, path) -> None:
    if img.data.dtype != np.uint8:
        raise TypeError("only 8-bit images can be written")
    arr = img.data[:, :, 0] if img.data.shape[2] == 1 else img.data
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path)
