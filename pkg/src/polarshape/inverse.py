"""Inverse rendering: recover the five output maps from a polarized capture.

The forward model re-renders the four polarizer-filtered images from the
current maps under the collocated flash (light == view == half vector, so the
Fresnel term is the normal-incidence constant). The loss is the mean absolute
difference per angle; its gradients with respect to diffuse, specular,
roughness and a 2-parameter stereographic normal encoding are closed-form
chain rules below, with subgradient 0 at the absolute-value kinks.

Depth is not optimized: single-view flash shading constrains it too weakly,
so positions are taken from a supplied depth map (or a flat fallback) and
depth is produced afterwards by integrating the recovered normals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.ndimage
import scipy.sparse
import scipy.sparse.linalg

from . import brdf
from .brdf import ALPHA_MIN
from .cues import DiffuseColorMap, fit_sinusoid
from .errors import FitDivergenceError, InputError
from .render import CAPTURE_ANGLES, Camera, FlashLight, positions_from_depth
from .stokes import CaptureSet, NormalizedStokesMap, compute_stokes, derive_inputs

MODE_FULL = "full"
MODE_NO_POL_LOSS = "no-polarized-loss"
MODE_NO_POL_INPUT = "no-polarization"
FIT_MODES = (MODE_FULL, MODE_NO_POL_LOSS, MODE_NO_POL_INPUT)


@dataclass(frozen=True)
class SvbrdfMaps:
    """The five recovered maps: reflectance, normals and depth."""

    diffuse: np.ndarray  # (H, W, 3) in [0, 1]
    specular: np.ndarray  # (H, W, 3) in [0, 1]
    roughness: np.ndarray  # (H, W) in [ALPHA_MIN, 1]
    normal: np.ndarray  # (H, W, 3) unit on the object mask
    depth: np.ndarray  # (H, W) scene units, 0 off-mask

    def __post_init__(self):
        hw = self.roughness.shape
        if self.diffuse.shape != hw + (3,) or self.specular.shape != hw + (3,):
            raise InputError("albedo maps must be (H, W, 3) matching roughness")
        if self.normal.shape != hw + (3,) or self.depth.shape != hw:
            raise InputError("normal/depth maps do not match roughness dimensions")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    polarized_render_term: float
    l1_map_term: float
    per_angle: tuple


class LossGradients(NamedTuple):
    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray
    normal_params: np.ndarray  # (H, W, 2) stereographic


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 800
    lr: float = 0.02
    lr_decay: float = 0.97  # multiplied in every `decay_every` iterations
    decay_every: int = 20
    # dielectric specular albedo is approximately known (~0.04), so it moves
    # slowly and roughness absorbs the specular signal instead
    lr_scale_specular: float = 0.05
    lr_scale_roughness: float = 2.0
    smoothness_weight: float = 1e-3
    huber_delta_ratio: float = 0.05  # smoothing width as a share of mean radiance
    seed: int = 0
    mode: str = MODE_FULL
    tolerance: float = 0.0  # stop early when loss falls below
    divergence_patience: int = 50
    init_tilt_deg: float = 30.0
    assumed_distance: float = 2.0  # flat-depth fallback when no depth given
    flash_intensity: tuple = (1.0, 1.0, 1.0)
    map_loss_weight: float = 1.0
    render_loss_weight: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise InputError("iteration budget must be >= 1")
        if self.mode not in FIT_MODES:
            raise InputError(f"unknown fit mode {self.mode!r}")
        if min(self.smoothness_weight, self.map_loss_weight, self.render_loss_weight) < 0:
            raise InputError("loss weights must be >= 0")


@dataclass
class FitReport:
    mode: str
    iterations_run: int
    loss_curve: list = field(default_factory=list)
    final_loss: float = float("nan")
    seconds: float = 0.0


# -- normal encoding ---------------------------------------------------------


def normal_to_params(normal: np.ndarray) -> np.ndarray:
    """Stereographic encoding (from the south pole): q = (nx, ny) / (1 + nz)."""
    denom = np.maximum(1.0 + normal[..., 2], 1e-6)
    return np.stack([normal[..., 0] / denom, normal[..., 1] / denom], axis=-1)


def params_to_normal(q: np.ndarray) -> np.ndarray:
    w = 1.0 + np.sum(q * q, axis=-1)
    return np.stack(
        [2.0 * q[..., 0] / w, 2.0 * q[..., 1] / w, (2.0 - w) / w], axis=-1
    )


# maximum |q| so decoded nz stays >= 0.05 (matches the integration floor)
_Q_MAX = float(np.sqrt((2.0 / 1.05) - 1.0))


# -- differentiable forward model ---------------------------------------------


class _Forward(NamedTuple):
    """Intermediates of the collocated polarized shading, masked pixels only."""

    images: np.ndarray  # (n_angles, N, 3) filtered radiance
    c: np.ndarray
    lit: np.ndarray
    l_d: np.ndarray
    s_spec: np.ndarray  # specular shape factor S (N,)
    t: np.ndarray
    u: np.ndarray
    dop: np.ndarray
    dir_cos: np.ndarray  # cos 2(psi + 90deg)
    dir_sin: np.ndarray
    n: np.ndarray
    w: np.ndarray  # stereographic denominator
    k: np.ndarray  # per-pixel RGB irradiance scale (N, 3)
    v: np.ndarray


def _forward_polarized(
    q: np.ndarray,
    diffuse: np.ndarray,
    specular: np.ndarray,
    roughness: np.ndarray,
    v: np.ndarray,
    k: np.ndarray,
    angles: np.ndarray,
    ior: float,
) -> _Forward:
    """Filtered images at ``angles`` for masked-pixel parameter arrays.

    Mirrors render.shade_polarized specialized to light == view; kept in one
    routine so the analytic gradients differentiate exactly what the loss
    evaluates.
    """
    w = 1.0 + np.sum(q * q, axis=-1)
    n = np.stack([2.0 * q[..., 0] / w, 2.0 * q[..., 1] / w, (2.0 - w) / w], axis=-1)

    c_raw = np.sum(n * v, axis=-1)
    lit = c_raw > 0
    c = np.clip(c_raw, 1e-9, 1.0)
    gate = np.where(lit, 1.0, 0.0)

    alpha = np.clip(roughness, ALPHA_MIN, 1.0)
    t = c * c * (alpha * alpha - 1.0) + 1.0
    u = np.sqrt(c * c + alpha * alpha * (1.0 - c * c))
    s_spec = 0.25 * alpha * alpha / (np.pi * t * t * u)
    f0 = ((ior - 1.0) / (ior + 1.0)) ** 2

    l_d = diffuse * (c * gate)[..., None] * k / np.pi
    l_s = specular * (f0 * s_spec * gate)[..., None] * k

    dop = brdf.diffuse_dop_cos(c, ior) * gate

    e = n - np.sum(n * v, axis=-1, keepdims=True) * v
    ex, ey = e[..., 0], e[..., 1]
    r2 = ex * ex + ey * ey
    safe_r2 = np.maximum(r2, 1e-24)
    dir_cos = np.where(r2 > 1e-24, -(ex * ex - ey * ey) / safe_r2, 0.0)
    dir_sin = np.where(r2 > 1e-24, -(2.0 * ex * ey) / safe_r2, 0.0)

    s0 = l_d + l_s
    s1 = l_d * (dop * dir_cos)[..., None]
    s2 = l_d * (dop * dir_sin)[..., None]

    two_phi = 2.0 * np.deg2rad(angles)
    images = 0.5 * (
        s0[None]
        + s1[None] * np.cos(two_phi)[:, None, None]
        + s2[None] * np.sin(two_phi)[:, None, None]
    )
    return _Forward(images, c, lit, l_d, s_spec, t, u, dop, dir_cos, dir_sin, n, w, k, v)


def _observed_stack(observed: CaptureSet, i135: np.ndarray | None, mask: np.ndarray):
    if i135 is None:
        i135 = derive_inputs(observed).i135
    return np.stack(
        [observed.i0[mask], observed.i45[mask], observed.i90[mask], i135[mask]], axis=0
    )


def _pixel_inputs(pred: SvbrdfMaps, flash: FlashLight, camera: Camera, mask: np.ndarray):
    pos = positions_from_depth(pred.depth, camera)[mask]
    dist = np.maximum(np.linalg.norm(pos, axis=-1), 1e-12)
    v = -pos / dist[..., None]
    k = np.asarray(flash.intensity, dtype=np.float64) / (dist * dist)[..., None]
    return v, k


def polarized_render_loss(
    pred: SvbrdfMaps,
    observed: CaptureSet,
    flash: FlashLight,
    mask: np.ndarray,
    i135: np.ndarray | None = None,
    camera: Camera | None = None,
    gt_maps: SvbrdfMaps | None = None,
    map_weight: float = 1.0,
    render_weight: float = 1.0,
    angles=CAPTURE_ANGLES,
    ior: float = brdf.DEFAULT_IOR,
) -> LossBreakdown:
    """Mean absolute difference between re-rendered and observed filtered images.

    Re-renders each polarizer angle from ``pred`` (positions from its depth
    map), compares on ``mask`` and averages over angles. When ``gt_maps`` is
    supplied an L1 map term over the five maps is added (training-data case).
    """
    if not mask.any():
        raise InputError("empty mask")
    camera = camera or Camera(width=mask.shape[1], height=mask.shape[0])
    v, k = _pixel_inputs(pred, flash, camera, mask)
    q = normal_to_params(pred.normal[mask])
    fwd = _forward_polarized(
        q, pred.diffuse[mask], pred.specular[mask], pred.roughness[mask],
        v, k, np.asarray(angles, dtype=np.float64), ior,
    )
    obs = _observed_stack(observed, i135, mask)
    per_angle = tuple(float(np.mean(np.abs(fwd.images[a] - obs[a]))) for a in range(len(obs)))
    render_term = float(np.mean(per_angle))

    map_term = 0.0
    if gt_maps is not None:
        map_term = _map_l1(pred, gt_maps, mask)
    total = render_weight * render_term + (map_weight * map_term if gt_maps is not None else 0.0)
    return LossBreakdown(total, render_term, map_term, per_angle)


def _map_l1(pred: SvbrdfMaps, gt: SvbrdfMaps, mask: np.ndarray) -> float:
    terms = [
        np.abs(pred.diffuse[mask] - gt.diffuse[mask]).mean(),
        np.abs(pred.specular[mask] - gt.specular[mask]).mean(),
        np.abs(pred.roughness[mask] - gt.roughness[mask]).mean(),
        np.abs(pred.normal[mask] - gt.normal[mask]).mean(),
        np.abs(pred.depth[mask] - gt.depth[mask]).mean(),
    ]
    return float(np.mean(terms))


def loss_gradients(
    pred: SvbrdfMaps,
    observed: CaptureSet,
    flash: FlashLight,
    mask: np.ndarray,
    i135: np.ndarray | None = None,
    camera: Camera | None = None,
    angles=CAPTURE_ANGLES,
    ior: float = brdf.DEFAULT_IOR,
) -> LossGradients:
    """Analytic gradients of the polarized render term of the loss.

    Returns dense (H, W, ...) arrays, zero off-mask. Depth is treated as
    fixed. At |residual| == 0 the subgradient is 0.
    """
    if not mask.any():
        raise InputError("empty mask")
    camera = camera or Camera(width=mask.shape[1], height=mask.shape[0])
    v, k = _pixel_inputs(pred, flash, camera, mask)
    q = normal_to_params(pred.normal[mask])
    angles = np.asarray(angles, dtype=np.float64)
    f = _forward_polarized(
        q, pred.diffuse[mask], pred.specular[mask], pred.roughness[mask],
        v, k, angles, ior,
    )
    obs = _observed_stack(observed, i135, mask)
    n_angles, n_px, _ = f.images.shape
    resid = np.sign(f.images - obs) / (n_angles * n_px * 3)
    g = _backward_polarized(
        f, resid, q, pred.diffuse[mask], pred.specular[mask],
        np.clip(pred.roughness[mask], ALPHA_MIN, 1.0), angles, ior,
    )
    out = LossGradients(
        diffuse=np.zeros_like(pred.diffuse),
        specular=np.zeros_like(pred.specular),
        roughness=np.zeros_like(pred.roughness),
        normal_params=np.zeros(pred.roughness.shape + (2,)),
    )
    out.diffuse[mask] = g["diffuse"]
    out.specular[mask] = g["specular"]
    out.roughness[mask] = g["roughness"]
    out.normal_params[mask] = g["q"]
    return out


def _backward_polarized(f: _Forward, resid, q, diffuse, specular, alpha, angles, ior):
    """Chain rule from ``resid`` = dLoss/dI (per angle, pixel, channel)."""
    two_phi = 2.0 * np.deg2rad(angles)

    ds0 = 0.5 * resid.sum(axis=0)
    ds1 = 0.5 * (resid * np.cos(two_phi)[:, None, None]).sum(axis=0)
    ds2 = 0.5 * (resid * np.sin(two_phi)[:, None, None]).sum(axis=0)

    gate = np.where(f.lit, 1.0, 0.0)
    f0 = ((ior - 1.0) / (ior + 1.0)) ** 2
    c, t, u, s_spec = f.c, f.t, f.u, f.s_spec

    pol_c = f.dop * f.dir_cos
    pol_s = f.dop * f.dir_sin
    d_ld = ds0 + ds1 * pol_c[..., None] + ds2 * pol_s[..., None]
    d_ls = ds0
    d_dop = np.sum(f.l_d * (ds1 * f.dir_cos[..., None] + ds2 * f.dir_sin[..., None]), axis=-1)
    d_dircos = np.sum(f.l_d * ds1, axis=-1) * f.dop
    d_dirsin = np.sum(f.l_d * ds2, axis=-1) * f.dop

    # direct parameter paths
    g_diffuse = d_ld * (c * gate)[..., None] * f.k / np.pi
    g_specular = d_ls * (f0 * s_spec * gate)[..., None] * f.k

    # roughness through the specular shape factor S
    dt_da = 2.0 * alpha * c * c
    du_da = alpha * (1.0 - c * c) / u
    ds_da = (
        0.5 * alpha / (np.pi * t * t * u)
        - 0.5 * alpha * alpha * dt_da / (np.pi * t ** 3 * u)
        - 0.25 * alpha * alpha * du_da / (np.pi * t * t * u * u)
    )
    g_roughness = np.sum(d_ls * specular * f.k, axis=-1) * f0 * ds_da * gate

    # cosine path: diffuse shading, specular shape, and the dop curve
    dc = np.sum(d_ld * diffuse * f.k, axis=-1) / np.pi * gate
    dt_dc = 2.0 * c * (alpha * alpha - 1.0)
    du_dc = c * (1.0 - alpha * alpha) / u
    ds_dc = (
        -0.5 * alpha * alpha * dt_dc / (np.pi * t ** 3 * u)
        - 0.25 * alpha * alpha * du_dc / (np.pi * t * t * u * u)
    )
    dc += np.sum(d_ls * specular * f.k, axis=-1) * f0 * ds_dc * gate
    dc += d_dop * _diffuse_dop_dc(c, ior) * gate

    # direction path: the doubled azimuth terms live on e = n - (n.v) v,
    # with de_i/dn_j = delta_ij - v_i v_j
    e = f.n - np.sum(f.n * f.v, axis=-1, keepdims=True) * f.v
    ex, ey = e[..., 0], e[..., 1]
    r2 = ex * ex + ey * ey
    stable = r2 > 1e-12
    r4 = np.maximum(r2 * r2, 1e-24)
    da_dex = np.where(stable, -4.0 * ex * ey * ey / r4, 0.0)
    da_dey = np.where(stable, 4.0 * ex * ex * ey / r4, 0.0)
    db_dex = np.where(stable, -2.0 * ey * (ey * ey - ex * ex) / r4, 0.0)
    db_dey = np.where(stable, -2.0 * ex * (ex * ex - ey * ey) / r4, 0.0)
    de_x = d_dircos * da_dex + d_dirsin * db_dex
    de_y = d_dircos * da_dey + d_dirsin * db_dey

    vx, vy, vz = f.v[..., 0], f.v[..., 1], f.v[..., 2]
    dn = dc[..., None] * f.v
    dn[..., 0] += de_x * (1.0 - vx * vx) - de_y * vx * vy
    dn[..., 1] += -de_x * vx * vy + de_y * (1.0 - vy * vy)
    dn[..., 2] += -de_x * vz * vx - de_y * vz * vy

    # pull back through the stereographic map
    w = f.w
    q1, q2 = q[..., 0], q[..., 1]
    j11 = 2.0 / w - 4.0 * q1 * q1 / (w * w)
    j12 = -4.0 * q1 * q2 / (w * w)
    j21 = j12
    j22 = 2.0 / w - 4.0 * q2 * q2 / (w * w)
    j31 = -4.0 * q1 / (w * w)
    j32 = -4.0 * q2 / (w * w)
    gq = np.stack(
        [
            dn[..., 0] * j11 + dn[..., 1] * j21 + dn[..., 2] * j31,
            dn[..., 0] * j12 + dn[..., 1] * j22 + dn[..., 2] * j32,
        ],
        axis=-1,
    )
    return {"diffuse": g_diffuse, "specular": g_specular, "roughness": g_roughness, "q": gq}


def _diffuse_dop_dc(c: np.ndarray, n: float) -> np.ndarray:
    """d(diffuse_dop)/d(cos theta)."""
    k1 = (n - 1.0 / n) ** 2
    k3 = (n + 1.0 / n) ** 2
    sin2 = 1.0 - c * c
    root = np.sqrt(n * n - sin2)
    num = k1 * sin2
    den = 2.0 + 2.0 * n * n - k3 * sin2 + 4.0 * c * root
    dnum = -2.0 * k1 * c
    dden = 2.0 * k3 * c + 4.0 * root + 4.0 * c * c / root
    return (dnum * den - num * dden) / (den * den)


# -- total-variation smoothness ------------------------------------------------


def tv_loss_and_grad(x: np.ndarray, mask: np.ndarray):
    """Anisotropic total variation over masked neighbor pairs.

    Returns (loss, grad) where grad matches x's shape. Channels, if present,
    are summed. Subgradient 0 at zero differences.
    """
    grad = np.zeros_like(x)
    total = 0.0
    for axis in (0, 1):
        sl_lo = [slice(None)] * x.ndim
        sl_hi = [slice(None)] * x.ndim
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        pair = mask[tuple(sl_lo[:2])] & mask[tuple(sl_hi[:2])]
        diff = x[tuple(sl_hi)] - x[tuple(sl_lo)]
        if diff.ndim > pair.ndim:
            pair = pair[..., None]
        diff = np.where(pair, diff, 0.0)
        total += np.abs(diff).sum()
        s = np.sign(diff)
        grad[tuple(sl_hi)] += s
        grad[tuple(sl_lo)] -= s
    denom = max(int(np.count_nonzero(mask)), 1) * (x.shape[-1] if x.ndim == 3 else 1)
    return total / denom, grad / denom


# -- fitting -------------------------------------------------------------------


def _init_maps(
    observed: CaptureSet,
    stokes_cue: NormalizedStokesMap | None,
    color_cue: DiffuseColorMap | None,
    depth: np.ndarray,
    mask: np.ndarray,
    camera: Camera,
    flash: FlashLight,
    cfg: FitConfig,
) -> SvbrdfMaps:
    """Cue-driven initialization of the five maps."""
    h, w = mask.shape
    s = compute_stokes(observed)
    fit = fit_sinusoid(s)

    # normals: frontal tilt, azimuth from the direction cue (pi-ambiguous,
    # resolved by pointing away from the mask centroid)
    normal = np.zeros((h, w, 3))
    normal[..., 2] = 1.0
    use_cue = cfg.mode != MODE_NO_POL_INPUT and stokes_cue is not None
    if use_cue:
        azimuth = 0.5 * np.arctan2(stokes_cue.u2, stokes_cue.u1) - np.pi / 2.0
        rows, cols = np.mgrid[0:h, 0:w]
        cy, cx = (np.mean(np.nonzero(mask)[0]), np.mean(np.nonzero(mask)[1]))
        out_x = cols - cx
        out_y = cy - rows  # array rows grow downward, camera y grows up
        flip = np.cos(azimuth) * out_x + np.sin(azimuth) * out_y < 0
        azimuth = np.where(flip, azimuth + np.pi, azimuth)
        tilt = np.deg2rad(cfg.init_tilt_deg)
        seeded = stokes_cue.valid & mask
        normal[seeded, 0] = np.sin(tilt) * np.cos(azimuth[seeded])
        normal[seeded, 1] = np.sin(tilt) * np.sin(azimuth[seeded])
        normal[seeded, 2] = np.cos(tilt)

    # diffuse: cue chroma scaled so the re-rendered minima match observation
    pos = positions_from_depth(depth, camera)
    dist2 = np.maximum(np.sum(pos * pos, axis=-1), 1e-12)
    k_lum = float(np.mean(flash.intensity))
    i_min_peak = fit.i_min.max(axis=2)
    scale = 2.0 * i_min_peak * np.pi * dist2 / k_lum
    if use_cue and color_cue is not None:
        chroma = color_cue.color
    else:
        full = derive_inputs(observed).full
        peak = np.maximum(full.max(axis=2), 1e-12)
        chroma = full / peak[..., None]
        scale = full.max(axis=2) * np.pi * dist2 / k_lum
    diffuse = np.clip(chroma * scale[..., None], 0.01, 1.0)
    diffuse[~mask] = 0.0

    specular = np.full((h, w, 3), 0.04)
    roughness = np.full((h, w), 0.5)
    return SvbrdfMaps(diffuse, specular, roughness, normal, depth.copy())


def fit_svbrdf(
    observed: CaptureSet,
    stokes_cue: NormalizedStokesMap | None,
    color_cue: DiffuseColorMap | None,
    depth: np.ndarray | None,
    cfg: FitConfig,
    camera: Camera | None = None,
    mask: np.ndarray | None = None,
) -> tuple[SvbrdfMaps, FitReport]:
    """First-order fit of the five maps to a polarized flash capture.

    Adam on the polarized rendering loss plus a total-variation smoothness
    prior on normal parameters and roughness; parameters are re-projected
    into their feasible ranges after every step. Deterministic for a fixed
    config. Aborts if the loss rises ``divergence_patience`` times in a row.
    """
    t_start = time.perf_counter()
    h, w = observed.shape[:2]
    camera = camera or Camera(width=w, height=h)
    flash = FlashLight(intensity=np.asarray(cfg.flash_intensity, dtype=np.float64))

    if mask is None:
        s0 = (observed.i0 + observed.i90).mean(axis=2)
        mask = s0 > 1e-4 * max(float(s0.mean()), 1e-12)
    if depth is None:
        depth = np.where(mask, cfg.assumed_distance, 0.0)
    else:
        depth = np.where(mask, depth, 0.0)

    init = _init_maps(observed, stokes_cue, color_cue, depth, mask, camera, flash, cfg)
    i135 = derive_inputs(observed).i135
    obs_full = derive_inputs(observed).full

    params = {
        "diffuse": init.diffuse.copy(),
        "specular": init.specular.copy(),
        "roughness": init.roughness.copy(),
        "q": normal_to_params(init.normal),
    }
    adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    polarized = cfg.mode == MODE_FULL
    angles = CAPTURE_ANGLES if polarized else (None,)

    report = FitReport(mode=cfg.mode, iterations_run=0)
    best = np.inf
    worse_streak = 0
    lr = cfg.lr

    v_pix, k_pix = _pixel_inputs(init, flash, camera, mask)
    if polarized:
        obs_stack = _observed_stack(observed, i135, mask)
        angle_arr = np.asarray(CAPTURE_ANGLES, dtype=np.float64)
    else:
        obs_stack = obs_full[mask][None]
    # optimize a Huber-smoothed variant: pure L1's constant-slope intensity
    # term blocks descent along the diffuse/specular exchange valley
    huber_delta = cfg.huber_delta_ratio * max(float(np.abs(obs_stack).mean()), 1e-12)

    for it in range(cfg.iterations):
        q = params["q"][mask]
        dif = params["diffuse"][mask]
        spe = params["specular"][mask]
        rou = params["roughness"][mask]
        if polarized:
            fwd = _forward_polarized(q, dif, spe, rou, v_pix, k_pix, angle_arr, brdf.DEFAULT_IOR)
            images = fwd.images
            err = images - obs_stack
            resid = np.clip(err / huber_delta, -1.0, 1.0) / err.size
            grads = _backward_polarized(
                fwd, resid, q, dif, spe, np.clip(rou, ALPHA_MIN, 1.0),
                angle_arr, brdf.DEFAULT_IOR,
            )
        else:
            fwd = _forward_polarized(
                q, dif, spe, rou, v_pix, k_pix, np.asarray([0.0, 90.0]), brdf.DEFAULT_IOR
            )
            # i0 + i90 == s0: the unpolarized rendering loss
            images = (fwd.images[0] + fwd.images[1])[None]
            err = images - obs_stack
            resid = np.clip(err / huber_delta, -1.0, 1.0) / err.size
            grads = _backward_unpolarized(
                fwd, resid[0], q, dif, spe, np.clip(rou, ALPHA_MIN, 1.0), brdf.DEFAULT_IOR
            )
        render_loss = float(np.mean(_huber(err, huber_delta)))

        tv_q, tv_q_grad = tv_loss_and_grad(params["q"], mask)
        tv_r, tv_r_grad = tv_loss_and_grad(params["roughness"], mask)
        loss = cfg.render_loss_weight * render_loss + cfg.smoothness_weight * (tv_q + tv_r)
        report.loss_curve.append(loss)

        best = min(best, loss)
        prev = report.loss_curve[-2] if len(report.loss_curve) > 1 else np.inf
        if loss > prev:
            worse_streak += 1
            if worse_streak >= cfg.divergence_patience:
                raise FitDivergenceError(
                    f"loss rose for {worse_streak} consecutive iterations at iter {it} "
                    f"(loss={loss:.6g}, best={best:.6g})"
                )
        else:
            worse_streak = 0
        if loss <= cfg.tolerance:
            report.iterations_run = it + 1
            break

        full_grads = {
            "diffuse": np.zeros_like(params["diffuse"]),
            "specular": np.zeros_like(params["specular"]),
            "roughness": np.zeros_like(params["roughness"]),
            "q": np.zeros_like(params["q"]),
        }
        for key, name in (("diffuse", "diffuse"), ("specular", "specular"),
                          ("roughness", "roughness"), ("q", "q")):
            full_grads[key][mask] = grads[name]
            full_grads[key] *= cfg.render_loss_weight
        full_grads["q"] += cfg.smoothness_weight * tv_q_grad
        full_grads["roughness"] += cfg.smoothness_weight * tv_r_grad

        if it > 0 and it % cfg.decay_every == 0:
            lr *= cfg.lr_decay
        tstep = it + 1
        corr = np.sqrt(1.0 - beta2 ** tstep) / (1.0 - beta1 ** tstep)
        lr_scales = {"diffuse": 1.0, "specular": cfg.lr_scale_specular,
                     "roughness": cfg.lr_scale_roughness, "q": 1.0}
        for key in params:
            g = full_grads[key]
            adam_m[key] = beta1 * adam_m[key] + (1.0 - beta1) * g
            adam_v[key] = beta2 * adam_v[key] + (1.0 - beta2) * g * g
            step = lr * lr_scales[key] * corr
            params[key] -= step * adam_m[key] / (np.sqrt(adam_v[key]) + eps)

        # re-project into feasible ranges
        np.clip(params["diffuse"], 0.0, 1.0, out=params["diffuse"])
        np.clip(params["specular"], 0.0, 1.0, out=params["specular"])
        np.clip(params["roughness"], ALPHA_MIN, 1.0, out=params["roughness"])
        qn = np.linalg.norm(params["q"], axis=-1)
        over = qn > _Q_MAX
        if over.any():
            params["q"][over] *= (_Q_MAX / qn[over])[..., None]
        report.iterations_run = it + 1

    normal = params_to_normal(params["q"])
    normal[~mask] = 0.0
    for key in ("diffuse", "specular"):
        params[key][~mask] = 0.0
    params["roughness"][~mask] = 0.0

    spacing = _pixel_spacing(depth, mask, camera)
    height = integrate_normals(normal, mask, spacing=spacing)
    out_depth = np.where(mask, -height, 0.0)

    maps = SvbrdfMaps(
        diffuse=params["diffuse"],
        specular=params["specular"],
        roughness=params["roughness"],
        normal=normal,
        depth=out_depth,
    )
    report.final_loss = report.loss_curve[-1] if report.loss_curve else float("nan")
    report.seconds = time.perf_counter() - t_start
    return maps, report


def _huber(err: np.ndarray, delta: float) -> np.ndarray:
    """Quadratic below ``delta``, L1 above, with continuous slope."""
    a = np.abs(err)
    return np.where(a < delta, 0.5 * a * a / delta, a - 0.5 * delta)


def _backward_unpolarized(f: _Forward, resid, q, diffuse, specular, alpha, ior):
    """Gradients of the unpolarized (s0-only) rendering loss from dLoss/ds0."""
    gate = np.where(f.lit, 1.0, 0.0)
    f0 = ((ior - 1.0) / (ior + 1.0)) ** 2
    c, t, u, s_spec = f.c, f.t, f.u, f.s_spec

    g_diffuse = resid * (c * gate)[..., None] * f.k / np.pi
    g_specular = resid * (f0 * s_spec * gate)[..., None] * f.k

    dt_da = 2.0 * alpha * c * c
    du_da = alpha * (1.0 - c * c) / u
    ds_da = (
        0.5 * alpha / (np.pi * t * t * u)
        - 0.5 * alpha * alpha * dt_da / (np.pi * t ** 3 * u)
        - 0.25 * alpha * alpha * du_da / (np.pi * t * t * u * u)
    )
    g_roughness = np.sum(resid * specular * f.k, axis=-1) * f0 * ds_da * gate

    dc = np.sum(resid * diffuse * f.k, axis=-1) / np.pi * gate
    dt_dc = 2.0 * c * (alpha * alpha - 1.0)
    du_dc = c * (1.0 - alpha * alpha) / u
    ds_dc = (
        -0.5 * alpha * alpha * dt_dc / (np.pi * t ** 3 * u)
        - 0.25 * alpha * alpha * du_dc / (np.pi * t * t * u * u)
    )
    dc += np.sum(resid * specular * f.k, axis=-1) * f0 * ds_dc * gate

    dn = dc[..., None] * f.v
    w = f.w
    q1, q2 = q[..., 0], q[..., 1]
    j11 = 2.0 / w - 4.0 * q1 * q1 / (w * w)
    j12 = -4.0 * q1 * q2 / (w * w)
    j22 = 2.0 / w - 4.0 * q2 * q2 / (w * w)
    j31 = -4.0 * q1 / (w * w)
    j32 = -4.0 * q2 / (w * w)
    gq = np.stack(
        [
            dn[..., 0] * j11 + dn[..., 1] * j12 + dn[..., 2] * j31,
            dn[..., 0] * j12 + dn[..., 1] * j22 + dn[..., 2] * j32,
        ],
        axis=-1,
    )
    return {"diffuse": g_diffuse, "specular": g_specular, "roughness": g_roughness, "q": gq}


def _pixel_spacing(depth: np.ndarray, mask: np.ndarray, camera: Camera) -> float:
    """Scene-unit footprint of one pixel at the object's mean depth."""
    mean_depth = float(depth[mask].mean()) if mask.any() else 1.0
    return 2.0 * mean_depth * camera.tan_half / camera.height


# -- normal integration --------------------------------------------------------


def integrate_normals(normal: np.ndarray, mask: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Least-squares surface from a normal map.

    Integrates the gradient field (-nx/nz, -ny/nz) over each connected
    component of the mask independently, with nz floored at 0.05. The result
    is the camera-space height z (larger toward the camera), zero-mean per
    component, zero off-mask.
    """
    if not mask.any():
        raise InputError("empty mask")
    nz = np.maximum(normal[..., 2], 0.05)
    gx = -normal[..., 0] / nz  # dz/dx, x right
    gy = -normal[..., 1] / nz  # dz/dy, y up

    out = np.zeros(mask.shape)
    labels, n_comp = scipy.ndimage.label(mask)
    for comp in range(1, n_comp + 1):
        comp_mask = labels == comp
        out[comp_mask] = _integrate_component(gx, gy, comp_mask, spacing)[comp_mask]
    return out


def _integrate_component(gx, gy, mask, spacing):
    h, w = mask.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(mask)
    n = len(ys)
    idx[ys, xs] = np.arange(n)

    # horizontal pairs: z[r,c+1] - z[r,c] = spacing * avg gx
    hr, hc = np.nonzero(mask[:, :-1] & mask[:, 1:])
    # vertical pairs: row+1 is -y, so z[r+1,c] - z[r,c] = -spacing * avg gy
    vr, vc = np.nonzero(mask[:-1, :] & mask[1:, :])
    nh, nv = len(hr), len(vr)

    eq_h = np.arange(nh)
    eq_v = nh + np.arange(nv)
    # gauge: softly pin the first pixel; the pin decouples from the
    # difference rows over the constant null space, so the result is an
    # exact gradient least-squares solution (shifted), re-centered below
    rows = np.concatenate([eq_h, eq_h, eq_v, eq_v, [nh + nv]])
    cols = np.concatenate(
        [idx[hr, hc + 1], idx[hr, hc], idx[vr + 1, vc], idx[vr, vc], [0]]
    )
    vals = np.concatenate([np.ones(nh), -np.ones(nh), np.ones(nv), -np.ones(nv), [1.0]])
    b = np.concatenate(
        [
            spacing * 0.5 * (gx[hr, hc] + gx[hr, hc + 1]),
            -spacing * 0.5 * (gy[vr, vc] + gy[vr + 1, vc]),
            [0.0],
        ]
    )
    a = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(nh + nv + 1, n))
    ata = (a.T @ a).tocsc()
    atb = a.T @ b
    z = scipy.sparse.linalg.spsolve(ata, atb)
    z = z - z.mean()

    out = np.zeros((h, w))
    out[ys, xs] = z
    return out
