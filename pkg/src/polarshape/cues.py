"""Reflectance cue extraction from the polarizer response.

Three polarizer angles determine the per-pixel sinusoid
I(phi) = (s0 + s1*cos(2*phi) + s2*sin(2*phi)) / 2 exactly, so the minimum,
maximum and phase come out in closed form instead of an iterative fit.
The normalized minimum color is the diffuse-color cue: the specular lobe is
suppressed at the polarizer angle that minimizes transmission, leaving a
chroma estimate of the diffuse albedo.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .stokes import StokesImage


class SinusoidFit(NamedTuple):
    """Per-pixel, per-channel extrema and phase of the polarizer response."""

    i_min: np.ndarray
    i_max: np.ndarray
    phase: np.ndarray


@dataclass(frozen=True)
class DiffuseColorMap:
    """Chromaticity of the fitted reflectance minima, max channel == 1."""

    color: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise InputError(f"color: expected (H, W, 3), got {self.color.shape}")
        if self.valid.shape != self.color.shape[:2]:
            raise InputError("valid mask does not match color dimensions")

    @property
    def shape(self):
        return self.valid.shape


def fit_sinusoid(s: StokesImage) -> SinusoidFit:
    """Closed-form per-channel extrema of the polarizer response.

    With L = |(s1, s2)| the response has i_max = (s0 + L) / 2 at phase
    0.5 * atan2(s2, s1) and i_min = (s0 - L) / 2 a quarter turn away.
    Unpolarized pixels degenerate to i_min == i_max == s0 / 2 at phase 0.
    """
    length = np.hypot(s.s1, s.s2)
    i_max = 0.5 * (s.s0 + length)
    i_min = 0.5 * (s.s0 - length)
    phase = 0.5 * np.arctan2(s.s2, s.s1)
    phase = np.where(phase < 0, phase + np.pi, phase)
    # dop <= 1 guarantees i_min >= 0 up to rounding
    i_min = np.maximum(i_min, 0.0)
    return SinusoidFit(i_min, i_max, phase)


def diffuse_color(
    s: StokesImage,
    epsilon: float | None = None,
    saturated: np.ndarray | None = None,
) -> DiffuseColorMap:
    """Normalized diffuse color from the per-channel reflectance minima.

    Each pixel's fitted minimum RGB is divided by its maximum channel, so
    valid pixels satisfy max(color) == 1. Pixels whose maximum channel is at
    or below ``epsilon`` carry no reliable chroma and are marked invalid, as
    are any flagged in the optional ``saturated`` mask (clipped highlights
    lose their color).
    """
    fit = fit_sinusoid(s)
    if epsilon is None:
        mean_s0 = float(s.s0.mean())
        epsilon = 1e-4 * mean_s0 if mean_s0 > 0 else 1e-4
    peak = fit.i_min.max(axis=2)
    valid = peak > epsilon
    if saturated is not None:
        if saturated.shape != valid.shape:
            raise InputError("saturated mask does not match image dimensions")
        valid &= ~saturated
    safe = np.where(valid, peak, 1.0)[..., None]
    color = np.where(valid[..., None], fit.i_min / safe, 0.0)
    return DiffuseColorMap(np.clip(color, 0.0, 1.0), valid)
