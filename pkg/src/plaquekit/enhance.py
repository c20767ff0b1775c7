"""Frequency-domain enhancement of the green channel.

The green plane is low-passed with an ideal circular mask in the centred
spectrum, brought back to image space, convolved with a directional
Laplacian, and band-thresholded to a binary plane that is appended to the RGB
image as a fourth channel.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import fft as sp_fft

from .errors import NonRealResult
from .raster import (
    DIRECTIONAL_LAPLACIAN,
    ColorSpace,
    Kernel2D,
    PlanarImage,
    _require,
    convolve2d,
    merge_channels,
    split_channels,
)

__all__ = [
    "EnhanceParams",
    "Spectrum",
    "dft2",
    "idft2",
    "low_pass_mask",
    "low_pass_filter",
    "band_threshold",
    "enhance_channel",
    "enhancement_stages",
    "enhance_image",
]

IMAG_RTOL = 1e-9
# absolute floor so that a plane filtered down to rounding noise is not rejected
IMAG_ATOL = 1e-9


@dataclass(frozen=True)
class EnhanceParams:
    """Parameters of the enhancement chain.

    ``cutoff`` of ``None`` means ``min(width, height) / 4``, resolved per image
    by :meth:`resolve`. Thresholds may be ``-inf``/``inf`` for an open band.
    """

    cutoff: Optional[float] = None
    t_low: float = 20.0
    t_high: float = 255.0
    kernel: Kernel2D = DIRECTIONAL_LAPLACIAN

    def __post_init__(self):
        if self.cutoff is not None and not self.cutoff > 0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")
        if not self.t_low <= self.t_high:
            raise ValueError(f"t_low ({self.t_low}) must not exceed t_high ({self.t_high})")

    def resolve(self, width: int, height: int) -> EnhanceParams:
        if self.cutoff is not None:
            return self
        return replace(self, cutoff=min(width, height) / 4)

    def to_dict(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "t_low": self.t_low,
            "t_high": self.t_high,
            "kernel": self.kernel.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EnhanceParams:
        kernel = Kernel2D(np.asarray(d["kernel"])) if "kernel" in d else DIRECTIONAL_LAPLACIAN
        return cls(d.get("cutoff"), float(d.get("t_low", 20.0)), float(d.get("t_high", 255.0)), kernel)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Complex 2-D spectrum with the DC bin moved to ``(height // 2, width // 2)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.complex128, copy=True)
        if arr.ndim != 2:
            raise ValueError("spectrum must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def dft2(img: PlanarImage) -> Spectrum:
    _require(img, ColorSpace.GRAY)
    return Spectrum(sp_fft.fftshift(sp_fft.fft2(img.plane(0).astype(np.float64))))


def idft2(spec: Spectrum) -> PlanarImage:
    """Inverse of :func:`dft2`.

    Raises:
        NonRealResult: the imaginary part exceeds ``1e-9`` of the result's norm
            (with an absolute floor of ``1e-9``), which only happens when the
            conjugate symmetry of the spectrum is broken.
    """
    z = sp_fft.ifft2(sp_fft.ifftshift(spec.data))
    residue = np.linalg.norm(z.imag)
    if residue > max(IMAG_RTOL * np.linalg.norm(z), IMAG_ATOL):
        raise NonRealResult(f"imaginary residue {residue:.3e} exceeds tolerance")
    return PlanarImage(np.ascontiguousarray(z.real), ColorSpace.GRAY)


def low_pass_mask(shape: tuple[int, int], cutoff: float) -> np.ndarray:
    """Boolean ideal low-pass mask; bins at integer distance <= cutoff from DC."""
    return _cached_mask(tuple(int(n) for n in shape), float(cutoff)).copy()


@functools.lru_cache(maxsize=32)
def _cached_mask(shape: tuple[int, int], cutoff: float) -> np.ndarray:
    h, w = shape
    dy = np.arange(h) - h // 2
    dx = np.arange(w) - w // 2
    return np.hypot(dy[:, None], dx[None, :]) <= cutoff


def low_pass_filter(spec: Spectrum, cutoff: float) -> Spectrum:
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    return Spectrum(np.where(_cached_mask(spec.shape, float(cutoff)), spec.data, 0))


def band_threshold(values: np.ndarray, t_low: float, t_high: float) -> np.ndarray:
    """255 where ``t_low <= v <= t_high``, 0 elsewhere."""
    return np.where((values >= t_low) & (values <= t_high), 255, 0).astype(np.uint8)


def enhancement_stages(gray: PlanarImage, params: EnhanceParams) -> dict:
    """Run the chain and keep every intermediate (used for stage dumps)."""
    p = params.resolve(gray.width, gray.height)
    spectrum = dft2(gray)
    filtered = low_pass_filter(spectrum, p.cutoff)
    smoothed = idft2(filtered)
    convolved = convolve2d(smoothed, p.kernel)
    binary = band_threshold(convolved.plane(0), p.t_low, p.t_high)
    return {
        "spectrum": spectrum,
        "filtered_spectrum": filtered,
        "lowpassed": smoothed,
        "convolved": convolved,
        "binary": PlanarImage(binary, ColorSpace.GRAY),
        "params": p,
    }


def enhance_channel(gray: PlanarImage, params: EnhanceParams = EnhanceParams()) -> PlanarImage:
    return enhancement_stages(gray, params)["binary"]


def enhance_image(img: PlanarImage, params: EnhanceParams = EnhanceParams()) -> PlanarImage:
    """Append the enhanced green plane to an RGB8 image as a fourth channel."""
    r, g, b = split_channels(img)
    return merge_channels([r, g, b, enhance_channel(g, params)], ColorSpace.RGBA_ENHANCED)
