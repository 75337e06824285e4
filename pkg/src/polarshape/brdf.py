"""Reflectance model: dielectric Fresnel terms, diffuse polarization degree,
and a Cook-Torrance microfacet BRDF (GGX distribution, height-correlated
Smith shadowing) with a Lambertian diffuse lobe.

All functions broadcast over leading array dimensions; angles are radians.
Directions point away from the surface. ``eval_brdf`` returns radiance
factors, i.e. BRDF values already multiplied by the incident cosine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InputError

DEFAULT_IOR = 1.5
ALPHA_MIN = 0.01


class FresnelCoefficients(NamedTuple):
    r_s: np.ndarray
    r_p: np.ndarray


@dataclass(frozen=True)
class MaterialSample:
    """Per-pixel (or single-point) dielectric material parameters.

    Albedos are RGB arrays of shape (..., 3), roughness is (...,), the
    normal is a unit (..., 3) vector field. ``ior`` is a scalar shared by
    the whole sample; dielectrics only.
    """

    diffuse_albedo: np.ndarray
    specular_albedo: np.ndarray
    roughness: np.ndarray
    normal: np.ndarray
    ior: float = DEFAULT_IOR

    def __post_init__(self):
        if self.ior <= 1.0:
            raise InputError(f"ior must exceed 1, got {self.ior}")
        if np.any(np.asarray(self.roughness) < ALPHA_MIN - 1e-9):
            raise InputError(f"roughness below floor {ALPHA_MIN}")


def fresnel(theta: np.ndarray, n: float = DEFAULT_IOR) -> FresnelCoefficients:
    """Dielectric power reflectances for s- and p-polarized light.

    ``theta`` is the incidence angle from air into a medium of index ``n``;
    valid on [0, pi/2). r_p vanishes at the Brewster angle atan(n).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta >= np.pi / 2):
        raise InputError("incidence angle must lie in [0, pi/2)")
    if n <= 1.0:
        raise InputError(f"ior must exceed 1, got {n}")
    cos_i = np.cos(theta)
    sin_t = np.sin(theta) / n
    cos_t = np.sqrt(np.maximum(1.0 - sin_t * sin_t, 0.0))
    r_s = ((cos_i - n * cos_t) / (cos_i + n * cos_t)) ** 2
    r_p = ((n * cos_i - cos_t) / (n * cos_i + cos_t)) ** 2
    return FresnelCoefficients(r_s, r_p)


def fresnel_unpolarized(cos_theta: np.ndarray, n: float = DEFAULT_IOR) -> np.ndarray:
    """(r_s + r_p) / 2 written directly in terms of cos(theta).

    Same physics as :func:`fresnel` but safe for vectorized shading where
    cos(theta) is already at hand; clamps cos into (0, 1].
    """
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), 1e-9, 1.0)
    s2 = (1.0 - c * c) / (n * n)
    ct = np.sqrt(np.maximum(1.0 - s2, 0.0))
    r_s = ((c - n * ct) / (c + n * ct)) ** 2
    r_p = ((n * c - ct) / (n * c + ct)) ** 2
    return 0.5 * (r_s + r_p)


def diffuse_dop(theta: np.ndarray, n: float = DEFAULT_IOR) -> np.ndarray:
    """Degree of linear polarization of diffusely exitant light.

    Transmission-Fresnel model for light leaving a dielectric at exitance
    angle ``theta``:

        rho = ((n - 1/n)^2 sin^2 t) /
              (2 + 2 n^2 - (n + 1/n)^2 sin^2 t + 4 cos t sqrt(n^2 - sin^2 t))

    Zero at normal exitance, strictly increasing, always below 1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    sin2 = np.sin(theta) ** 2
    num = (n - 1.0 / n) ** 2 * sin2
    den = (
        2.0
        + 2.0 * n * n
        - (n + 1.0 / n) ** 2 * sin2
        + 4.0 * np.cos(theta) * np.sqrt(n * n - sin2)
    )
    return num / den


def diffuse_dop_cos(cos_theta: np.ndarray, n: float = DEFAULT_IOR) -> np.ndarray:
    """:func:`diffuse_dop` parameterized by cos(theta) for shading loops."""
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), 0.0, 1.0)
    sin2 = 1.0 - c * c
    num = (n - 1.0 / n) ** 2 * sin2
    den = 2.0 + 2.0 * n * n - (n + 1.0 / n) ** 2 * sin2 + 4.0 * c * np.sqrt(n * n - sin2)
    return num / den


def ggx_distribution(cos_nh: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """GGX normal distribution D for half-vector cosine ``cos_nh``."""
    c2 = cos_nh * cos_nh
    t = c2 * (alpha * alpha - 1.0) + 1.0
    return (alpha * alpha) / (np.pi * t * t)


def smith_visibility(cos_nl: np.ndarray, cos_nv: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Height-correlated Smith visibility V = G / (4 (n.l) (n.v)) for GGX."""
    a2 = alpha * alpha
    gl = cos_nv * np.sqrt(cos_nl * cos_nl * (1.0 - a2) + a2)
    gv = cos_nl * np.sqrt(cos_nv * cos_nv * (1.0 - a2) + a2)
    return 0.5 / np.maximum(gl + gv, 1e-12)


def eval_brdf(
    m: MaterialSample, light_dir: np.ndarray, view_dir: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Diffuse and specular radiance factors for unit incident radiance.

    diffuse = rho_d / pi * (n.l) and specular = rho_s * D * V * F * (n.l)
    with the unpolarized Fresnel term evaluated at the half-vector angle.
    Directions below the horizon contribute zero.
    """
    n = m.normal
    l = np.asarray(light_dir, dtype=np.float64)
    v = np.asarray(view_dir, dtype=np.float64)
    cos_nl = np.sum(n * l, axis=-1)
    cos_nv = np.sum(n * v, axis=-1)
    lit = (cos_nl > 0) & (cos_nv > 0)
    cos_nl_c = np.clip(cos_nl, 1e-9, 1.0)
    cos_nv_c = np.clip(cos_nv, 1e-9, 1.0)

    h = l + v
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    cos_nh = np.clip(np.sum(n * h, axis=-1), 0.0, 1.0)
    cos_vh = np.clip(np.sum(v * h, axis=-1), 1e-9, 1.0)

    alpha = np.maximum(np.asarray(m.roughness, dtype=np.float64), ALPHA_MIN)
    d_term = ggx_distribution(cos_nh, alpha)
    v_term = smith_visibility(cos_nl_c, cos_nv_c, alpha)
    f_term = fresnel_unpolarized(cos_vh, m.ior)

    gate = np.where(lit, 1.0, 0.0)
    diffuse = m.diffuse_albedo / np.pi * (cos_nl_c * gate)[..., None]
    specular = m.specular_albedo * (d_term * v_term * f_term * cos_nl_c * gate)[..., None]
    return diffuse, specular
