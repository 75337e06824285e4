"""Quantitative protocol: L1 metrics on normals, depth and relit renderings.

Depth is compared after per-image median alignment (integration leaves a
free offset). The rendering metric averages a fixed number of seeded
relightings per sample; the i-th light of sample s depends only on
(seed, s, i), so evaluation order never changes results. Rendering L1 is
reported both on tonemapped values (clamp then 1/2.2 gamma, the headline
number) and in linear radiance.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .inverse import FitConfig, SvbrdfMaps, FIT_MODES
from .render import Camera, render_relit


@dataclass(frozen=True)
class EvalConfig:
    n_relights: int = 20
    seed: int = 0
    cone_half_angle_deg: float = 60.0
    distance_range: tuple = (0.8, 1.5)
    light_intensity: tuple = (1.0, 1.0, 1.0)
    method_tag: str = "fit"

    def __post_init__(self):
        if self.n_relights < 1:
            raise InputError("n_relights must be >= 1")


@dataclass
class MetricsRow:
    sample_id: str
    l1_normal: float
    l1_depth: float
    l1_render: float
    l1_render_linear: float
    method_tag: str

    def as_dict(self):
        return dict(self.__dict__)


def l1_metric(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute difference over masked pixels (and channels, if any)."""
    if pred.shape != gt.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask.shape != pred.shape[:2]:
        raise InputError("mask does not match map dimensions")
    if not mask.any():
        raise InputError("empty mask")
    return float(np.abs(pred[mask] - gt[mask]).mean())


def l1_depth_metric(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Depth L1 after removing the per-image median offset."""
    if not mask.any():
        raise InputError("empty mask")
    offset = float(np.median(pred[mask] - gt[mask]))
    return float(np.abs(pred[mask] - offset - gt[mask]).mean())


def _tonemap(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0) ** (1.0 / 2.2)


def sample_light(seed: int, sample_id: str, index: int, cfg: EvalConfig, object_distance: float):
    """The index-th relight of a sample: deterministic in (seed, id, index)."""
    key = zlib.crc32(sample_id.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence([seed, key, index]))
    half = np.deg2rad(cfg.cone_half_angle_deg)
    # uniform over the spherical cap around the view axis (+z toward camera)
    cos_t = rng.uniform(np.cos(half), 1.0)
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
    distance = rng.uniform(*cfg.distance_range) * object_distance
    # lights sit on the camera side: object is down -z
    position = np.array([0.0, 0.0, -object_distance]) + direction * distance
    return position, np.asarray(cfg.light_intensity, dtype=np.float64)


def render_metric(
    pred: SvbrdfMaps,
    gt: SvbrdfMaps,
    mask: np.ndarray,
    camera: Camera,
    sample_id: str,
    cfg: EvalConfig,
) -> tuple[float, float]:
    """Mean L1 over the seeded relights (tonemapped, linear)."""
    object_distance = float(gt.depth[mask].mean())
    tm_vals, lin_vals = [], []
    for i in range(cfg.n_relights):
        position, intensity = sample_light(cfg.seed, sample_id, i, cfg, object_distance)
        img_pred = render_relit(pred, position, intensity, camera)
        img_gt = render_relit(gt, position, intensity, camera)
        lin_vals.append(l1_metric(img_pred, img_gt, mask))
        tm_vals.append(l1_metric(_tonemap(img_pred), _tonemap(img_gt), mask))
    return float(np.mean(tm_vals)), float(np.mean(lin_vals))


def evaluate_sample(
    sample_id: str,
    pred: SvbrdfMaps,
    gt: SvbrdfMaps,
    mask: np.ndarray,
    camera: Camera,
    cfg: EvalConfig,
) -> MetricsRow:
    l1_n = l1_metric(pred.normal, gt.normal, mask)
    l1_d = l1_depth_metric(pred.depth, gt.depth, mask)
    l1_r, l1_r_lin = render_metric(pred, gt, mask, camera, sample_id, cfg)
    return MetricsRow(sample_id, l1_n, l1_d, l1_r, l1_r_lin, cfg.method_tag)


def aggregate(rows: list[MetricsRow]) -> dict:
    """Means and medians per metric; independent of row order."""
    rows = sorted(rows, key=lambda r: r.sample_id)
    if not rows:
        return {"n": 0}
    out = {"n": len(rows)}
    for name in ("l1_normal", "l1_depth", "l1_render", "l1_render_linear"):
        vals = np.asarray([getattr(r, name) for r in rows])
        out[f"{name}_mean"] = float(vals.mean())
        out[f"{name}_median"] = float(np.median(vals))
    return out


def write_metrics(rows: list[MetricsRow], summary: dict, path) -> None:
    """Delimited per-sample table plus a JSON summary sidecar."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id\tmethod\tl1_normal\tl1_depth\tl1_render\tl1_render_linear\n")
        for r in sorted(rows, key=lambda x: (x.method_tag, x.sample_id)):
            fh.write(
                f"{r.sample_id}\t{r.method_tag}\t{r.l1_normal:.6g}\t{r.l1_depth:.6g}"
                f"\t{r.l1_render:.6g}\t{r.l1_render_linear:.6g}\n"
            )
    with open(path.with_suffix(".summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)


# -- benchmark manifest ---------------------------------------------------------


def build_benchmark_manifest(
    meshes: list,
    materials: list,
    n_combinations: int = 250,
    seed: int = 0,
) -> list[dict]:
    """Combination records pairing randomly rotated meshes with materials.

    The benchmark scale draws ``n_combinations`` (mesh, material, rotation)
    triples; with more combinations than mesh-material pairs, pairs repeat
    under fresh rotations.
    """
    if not meshes or not materials:
        raise InputError("mesh and material catalogs must be non-empty")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_combinations):
        mesh = meshes[int(rng.integers(len(meshes)))]
        material = materials[int(rng.integers(len(materials)))]
        quat = _random_quat(rng)
        records.append(
            {
                "combo_id": f"combo_{i:04d}",
                "mesh": str(mesh),
                "material": str(material),
                "rotation_quat": [float(x) for x in quat],
            }
        )
    return records


def _random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# -- ablation harness -----------------------------------------------------------

ABLATION_MODES = FIT_MODES


def ablation_suite(fit_fn, sample_ids: list[str], base_cfg: FitConfig, modes=ABLATION_MODES):
    """Run the fit across ablation modes and gather metric rows per mode.

    ``fit_fn(sample_id, cfg)`` must return a MetricsRow; the full mode is
    always present as baseline.
    """
    modes = list(modes)
    if FIT_MODES[0] not in modes:
        modes.insert(0, FIT_MODES[0])
    table = []
    for mode in modes:
        cfg = FitConfig(**{**base_cfg.__dict__, "mode": mode})
        for sid in sample_ids:
            row = fit_fn(sid, cfg)
            row.method_tag = mode
            table.append(row)
    return table
