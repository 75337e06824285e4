"""Stokes-vector algebra over images.

Images are numpy arrays of shape (H, W, 3) holding scene-linear RGB radiance.
Only linear polarization is handled: a pixel's polarization state is the
triple (s0, s1, s2), and an ideal linear polarizer at angle ``phi`` transmits

    I(phi) = (s0 + s1*cos(2*phi) + s2*sin(2*phi)) / 2.

The polarizer reference frame is the image frame: 0 degrees is horizontal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InputError, UnphysicalStokesError

# Ratio of image mean s0 used as the default polarization-length threshold.
DEFAULT_EPSILON_RATIO = 1e-4


def _check_radiance(name: str, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"{name}: expected (H, W, 3) array, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InputError(f"{name}: empty image {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputError(f"{name}: non-finite values")
    if np.any(img < 0):
        raise InputError(f"{name}: negative radiance")


@dataclass(frozen=True)
class CaptureSet:
    """Flash captures through a linear polarizer at 0, 45 and 90 degrees."""

    i0: np.ndarray
    i45: np.ndarray
    i90: np.ndarray

    def __post_init__(self):
        for name, img in (("i0", self.i0), ("i45", self.i45), ("i90", self.i90)):
            _check_radiance(name, img)
        if not (self.i0.shape == self.i45.shape == self.i90.shape):
            raise InputError(
                f"capture dimensions differ: {self.i0.shape}, "
                f"{self.i45.shape}, {self.i90.shape}"
            )

    @property
    def shape(self):
        return self.i0.shape


@dataclass(frozen=True)
class StokesImage:
    """Per-pixel, per-channel linear Stokes components."""

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        for name, img in (("s0", self.s0), ("s1", self.s1), ("s2", self.s2)):
            if img.ndim != 3 or img.shape[2] != 3:
                raise InputError(f"{name}: expected (H, W, 3) array, got {img.shape}")
            if not np.all(np.isfinite(img)):
                raise InputError(f"{name}: non-finite values")
        if not (self.s0.shape == self.s1.shape == self.s2.shape):
            raise InputError("stokes component dimensions differ")
        if np.any(self.s0 < 0):
            raise InputError("s0 must be non-negative")

    @property
    def shape(self):
        return self.s0.shape


@dataclass(frozen=True)
class NormalizedStokesMap:
    """Unit-length (u1, u2) per pixel where the polarized signal is reliable."""

    u1: np.ndarray
    u2: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (self.u1.shape == self.u2.shape == self.valid.shape):
            raise InputError("normalized stokes map dimensions differ")
        if self.u1.ndim != 2:
            raise InputError(f"expected (H, W) maps, got {self.u1.shape}")

    @property
    def shape(self):
        return self.u1.shape


class DerivedInputs(NamedTuple):
    full: np.ndarray
    i135: np.ndarray
    clamped_count: int


class DopAolp(NamedTuple):
    dop: np.ndarray
    aolp: np.ndarray
    valid: np.ndarray


def compute_stokes(c: CaptureSet) -> StokesImage:
    """Recover (s0, s1, s2) from the three polarizer-filtered captures."""
    s0 = c.i0 + c.i90
    s1 = c.i0 - c.i90
    s2 = 2.0 * c.i45 - s0
    return StokesImage(s0, s1, s2)


def filter_image(s: StokesImage, phi_deg: float) -> np.ndarray:
    """Radiance seen through an ideal linear polarizer at ``phi_deg`` degrees.

    Tiny negative results (> -1e-9) are rounding noise and clamped to zero;
    anything below that means the Stokes image violates dop <= 1.
    """
    phi = np.deg2rad(phi_deg)
    out = 0.5 * (s.s0 + s.s1 * np.cos(2.0 * phi) + s.s2 * np.sin(2.0 * phi))
    lowest = out.min() if out.size else 0.0
    if lowest < -1e-9:
        raise UnphysicalStokesError(
            f"filtered radiance reached {lowest:.3e} at phi={phi_deg} deg; "
            "input Stokes image exceeds full polarization"
        )
    return np.maximum(out, 0.0)


def derive_inputs(c: CaptureSet) -> DerivedInputs:
    """Full (unpolarized-equivalent) image and virtual 135-degree capture.

    full = i0 + i90 and i135 = full - i45. On noisy real data i135 can dip
    below zero; such pixels are clamped and counted rather than dropped.
    """
    full = c.i0 + c.i90
    i135 = full - c.i45
    negative = i135 < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        i135 = np.where(negative, 0.0, i135)
    return DerivedInputs(full, i135, clamped)


def normalize_stokes(s: StokesImage, epsilon: float | None = None) -> NormalizedStokesMap:
    """Scale channel-averaged (s1, s2) to unit length per pixel.

    The result encodes the polarization direction only, which is the
    shape cue: it fixes the surface-normal azimuth up to a pi ambiguity.
    Pixels whose polarized signal length is below ``epsilon`` are flagged
    invalid and set to (0, 0). The default threshold adapts to exposure:
    DEFAULT_EPSILON_RATIO times the image mean of s0.
    """
    if epsilon is None:
        mean_s0 = float(s.s0.mean())
        epsilon = DEFAULT_EPSILON_RATIO * mean_s0 if mean_s0 > 0 else DEFAULT_EPSILON_RATIO
    s1 = s.s1.mean(axis=2)
    s2 = s.s2.mean(axis=2)
    length = np.hypot(s1, s2)
    valid = length > epsilon
    safe = np.where(valid, length, 1.0)
    u1 = np.where(valid, s1 / safe, 0.0)
    u2 = np.where(valid, s2 / safe, 0.0)
    return NormalizedStokesMap(u1, u2, valid)


def dop_aolp(s: StokesImage) -> DopAolp:
    """Degree and angle of linear polarization from channel-averaged Stokes.

    dop = |(s1, s2)| / s0 in [0, 1]; aolp = 0.5 * atan2(s2, s1) in [0, pi).
    Pixels with s0 == 0 yield dop = aolp = 0 and are flagged invalid.
    """
    s0 = s.s0.mean(axis=2)
    s1 = s.s1.mean(axis=2)
    s2 = s.s2.mean(axis=2)
    valid = s0 > 0
    dop = np.where(valid, np.hypot(s1, s2) / np.where(valid, s0, 1.0), 0.0)
    aolp = 0.5 * np.arctan2(s2, s1)
    aolp = np.where(aolp < 0, aolp + np.pi, aolp)
    aolp = np.where(valid, aolp, 0.0)
    return DopAolp(dop, aolp, valid)


def add_stokes_noise(m: NormalizedStokesMap, sigma: float, seed: int) -> NormalizedStokesMap:
    """Perturb (u1, u2) with Gaussian noise and re-normalize.

    Mimics acquisition noise on the direction cue. Deterministic for a given
    seed; the validity mask is untouched. sigma == 0 returns the input as is.
    """
    if sigma < 0:
        raise InputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return m
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(2,) + m.shape)
    u1 = m.u1 + noise[0]
    u2 = m.u2 + noise[1]
    length = np.hypot(u1, u2)
    safe = np.maximum(length, 1e-12)
    u1 = np.where(m.valid, u1 / safe, 0.0)
    u2 = np.where(m.valid, u2 / safe, 0.0)
    return NormalizedStokesMap(u1, u2, m.valid.copy())


def visualize_stokes(m: NormalizedStokesMap) -> np.ndarray:
    """8-bit RGB rendering of the direction cue.

    R is constant 0.5, G and B carry (u1 + 1) / 2 and (u2 + 1) / 2.
    Quantization truncates, so the R channel is exactly 127. Invalid
    pixels are black.
    """
    h, w = m.shape
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    rgb[..., 0] = 0.5
    rgb[..., 1] = (m.u1 + 1.0) / 2.0
    rgb[..., 2] = (m.u2 + 1.0) / 2.0
    rgb[~m.valid] = 0.0
    return (np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
