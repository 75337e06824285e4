"""Dataset synthesis and the on-disk formats.

Sample directory layout (all 16-bit PNGs, linear encoding):

    <root>/<split>/<sample_id>/
        i000.png i045.png i090.png i135.png full.png   radiance / per-image scale
        stokes_vis.png                                  8-bit direction-cue preview
        stokes_norm.png                                 (u1+1)/2, (u2+1)/2, valid
        diffuse_cue.png                                 normalized color, scale 1
        gt_diffuse.png gt_specular.png                  albedos, scale 1
        gt_roughness.png                                scalar in gray channels
        gt_normal.png                                   (n+1)/2
        gt_depth.png                                    (d-min)/(max-min), range in record

plus `manifest.ndjson` at the split root: a header record carrying the config
hash followed by one record per sample. Every byte of a dataset is a pure
function of (config, master seed).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from .cues import diffuse_color
from .errors import InputError, MissingAssetError
from .render import (
    Camera,
    FlashLight,
    RenderedCapture,
    Scene,
    TextureMaterial,
    load_obj,
    render_capture,
)
from .stokes import add_stokes_noise, normalize_stokes, visualize_stokes

PNG_COMPRESSION = [cv2.IMWRITE_PNG_COMPRESSION, 6]
RADIANCE_FILES = ("i000", "i045", "i090", "i135", "full")
GT_FILES = ("gt_diffuse", "gt_specular", "gt_roughness", "gt_normal", "gt_depth")
CUE_FILES = ("stokes_norm", "diffuse_cue")


# -- 16-bit PNG I/O ------------------------------------------------------------


def png16_write(img: np.ndarray, path, scale: float | None = None) -> float:
    """Write a linear radiance image as 16-bit PNG; returns the scale used.

    Encoded value = round(clamp(v / scale, 0, 1) * 65535). The default scale
    is the image maximum (1.0 for an all-zero image) so nothing clips.
    """
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise InputError(f"{path}: radiance must be finite and non-negative")
    if scale is None:
        peak = float(img.max()) if img.size else 0.0
        scale = peak if peak > 0 else 1.0
    enc = np.round(np.clip(img / scale, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if enc.ndim == 3:
        enc = enc[..., ::-1]  # cv2 expects BGR
    if not cv2.imwrite(str(path), enc, PNG_COMPRESSION):
        raise OSError(f"failed to write {path}")
    return float(scale)


def png16_read(path, scale: float = 1.0) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MissingAssetError(f"cannot read {path}")
    if raw.dtype != np.uint16:
        raise InputError(f"{path}: expected 16-bit PNG, got {raw.dtype}")
    img = raw.astype(np.float64) / 65535.0 * scale
    if img.ndim == 3:
        img = img[..., ::-1].copy()
    return img


def png8_write(img: np.ndarray, path) -> None:
    out = img[..., ::-1] if img.ndim == 3 else img
    if not cv2.imwrite(str(path), out, PNG_COMPRESSION):
        raise OSError(f"failed to write {path}")


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    train_meshes: tuple = ()
    train_materials: tuple = ()
    test_meshes: tuple = ()
    test_materials: tuple = ()
    rotations_per_combo: int = 1
    resolution: int = 512
    fov_deg: float = 40.0
    noise_sigma: float = 0.05
    master_seed: int = 0
    full_rotations: bool = False  # uniform over SO(3) instead of the view cone
    elevation_limit_deg: float = 45.0
    fill_fraction: float = 0.7  # bounding-sphere share of the frame
    exposure: float | None = None  # fixed scale for radiance files; None = per image

    def __post_init__(self):
        if self.rotations_per_combo < 1 or self.resolution < 8:
            raise InputError("rotations_per_combo >= 1 and resolution >= 8 required")
        train = set(self.train_meshes) & set(self.test_meshes)
        mats = set(self.train_materials) & set(self.test_materials)
        if train or mats:
            raise InputError("train/test catalogs must be disjoint")

    def to_json(self) -> str:
        payload = {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}
        return json.dumps(payload, sort_keys=True)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


class SampleRejected(Exception):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


# -- assets ----------------------------------------------------------------------


def load_material_dir(path) -> TextureMaterial:
    """Texture set directory with diffuse/specular/roughness PNGs (8 or 16 bit)."""
    path = Path(path)

    def read_map(name):
        for candidate in (path / f"{name}.png", path / f"{name}.PNG"):
            if candidate.exists():
                raw = cv2.imread(str(candidate), cv2.IMREAD_UNCHANGED)
                if raw is None:
                    raise MissingAssetError(f"cannot decode {candidate}")
                div = 65535.0 if raw.dtype == np.uint16 else 255.0
                img = raw.astype(np.float64) / div
                if img.ndim == 3:
                    img = img[..., ::-1].copy()
                return img
        raise MissingAssetError(f"{path}: missing {name}.png")

    diffuse = read_map("diffuse")
    specular = read_map("specular")
    roughness = read_map("roughness")
    if roughness.ndim == 3:
        roughness = roughness.mean(axis=2)
    if diffuse.ndim == 2:
        diffuse = np.repeat(diffuse[..., None], 3, axis=2)
    if specular.ndim == 2:
        specular = np.repeat(specular[..., None], 3, axis=2)
    return TextureMaterial(diffuse, specular, np.clip(roughness, 0.01, 1.0))


def _sample_rotation(rng: np.random.Generator, cfg: DatasetConfig) -> np.ndarray:
    if cfg.full_rotations:
        return Rotation.random(random_state=rng).as_quat()
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = rng.uniform(-1.0, 1.0) * np.deg2rad(cfg.elevation_limit_deg)
    r = Rotation.from_euler("xy", [elevation, azimuth])
    return r.as_quat()


def _frame_object(mesh, rotation, camera, fill_fraction):
    """Translation putting the rotated mesh at a distance filling the frame."""
    rot = Rotation.from_quat(rotation)
    verts = rot.apply(mesh.vertices)
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    radius = float(np.linalg.norm(verts - center, axis=1).max())
    distance = radius / (fill_fraction * camera.tan_half)
    distance = max(distance, 2.5 * radius)  # keep perspective mild and near plane safe
    return np.array([0.0, 0.0, -distance]) - center, distance


# -- sample generation -------------------------------------------------------------


def generate_sample(
    mesh_path,
    material_path,
    seed_key: tuple,
    cfg: DatasetConfig,
    out_dir,
) -> dict:
    """Render one sample and write its files; returns the manifest record.

    Fully deterministic for a given (seed_key, cfg): the rotation, UV
    augmentation, flash scaling and cue noise all derive from the record's
    own SeedSequence.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, *seed_key]))
    mesh = load_obj(mesh_path)
    material = load_material_dir(material_path)
    camera = Camera(fov_deg=cfg.fov_deg, width=cfg.resolution, height=cfg.resolution)

    rotation = _sample_rotation(rng, cfg)
    translation, distance = _frame_object(mesh, rotation, camera, cfg.fill_fraction)
    uv_scale = float(rng.uniform(0.5, 2.0))
    uv_offset = tuple(rng.uniform(0.0, 1.0, size=2))
    material = TextureMaterial(
        material.diffuse, material.specular, material.roughness,
        uv_scale=uv_scale, uv_offset=uv_offset,
    )

    # flash power: unit render, then rescale so the 99th-percentile filtered
    # pixel sits at 0.8 (keeps fixed-exposure HDR below the PNG16 ceiling)
    scene = Scene(mesh, material, rotation, translation, camera,
                  FlashLight(intensity=np.ones(3)))
    rendered = render_capture(scene)
    if not rendered.gbuffer.mask.any():
        raise SampleRejected("empty coverage after rasterization")
    stack = np.stack([rendered.captures.i0, rendered.captures.i45,
                      rendered.captures.i90, rendered.i135])
    on_mask = stack[:, rendered.gbuffer.mask, :]
    p99 = float(np.percentile(on_mask, 99.0))
    gain = 0.8 / p99 if p99 > 0 else 1.0
    rendered = _scale_capture(rendered, gain)

    noise_seed = int(rng.integers(0, 2**31 - 1))
    stokes_map = normalize_stokes(rendered.stokes)
    noisy_map = add_stokes_noise(stokes_map, cfg.noise_sigma, noise_seed)
    color_cue = diffuse_color(rendered.stokes)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scales = {}
    radiance = {
        "i000": rendered.captures.i0,
        "i045": rendered.captures.i45,
        "i090": rendered.captures.i90,
        "i135": rendered.i135,
        "full": rendered.captures.i0 + rendered.captures.i90,
    }
    for name, img in radiance.items():
        scales[name] = png16_write(img, out_dir / f"{name}.png", scale=cfg.exposure)

    png8_write(visualize_stokes(noisy_map), out_dir / "stokes_vis.png")
    cue_img = np.stack(
        [(noisy_map.u1 + 1.0) / 2.0, (noisy_map.u2 + 1.0) / 2.0,
         noisy_map.valid.astype(np.float64)], axis=-1,
    )
    scales["stokes_norm"] = png16_write(cue_img, out_dir / "stokes_norm.png", scale=1.0)
    scales["diffuse_cue"] = png16_write(color_cue.color, out_dir / "diffuse_cue.png", scale=1.0)

    scales["gt_diffuse"] = png16_write(rendered.gt_diffuse, out_dir / "gt_diffuse.png", scale=1.0)
    scales["gt_specular"] = png16_write(rendered.gt_specular, out_dir / "gt_specular.png", scale=1.0)
    rough3 = np.repeat(rendered.gt_roughness[..., None], 3, axis=2)
    scales["gt_roughness"] = png16_write(rough3, out_dir / "gt_roughness.png", scale=1.0)
    normal_enc = (rendered.gt_normal + 1.0) / 2.0
    normal_enc[~rendered.gbuffer.mask] = 0.0
    scales["gt_normal"] = png16_write(normal_enc, out_dir / "gt_normal.png", scale=1.0)

    depth = rendered.gt_depth
    mask = rendered.gbuffer.mask
    d_lo = float(depth[mask].min())
    d_hi = float(depth[mask].max())
    d_span = max(d_hi - d_lo, 1e-9)
    depth_enc = np.where(mask, (depth - d_lo) / d_span, 0.0)
    scales["gt_depth"] = png16_write(depth_enc, out_dir / "gt_depth.png", scale=1.0)

    return {
        "sample_id": out_dir.name,
        "mesh": str(mesh_path),
        "material": str(material_path),
        "rotation_quat": [float(x) for x in rotation],
        "distance": distance,
        "flash_gain": gain,
        "uv_scale": uv_scale,
        "uv_offset": [float(x) for x in uv_offset],
        "noise_sigma": cfg.noise_sigma,
        "noise_seed": noise_seed,
        "resolution": cfg.resolution,
        "fov_deg": cfg.fov_deg,
        "depth_range": [d_lo, d_hi],
        "scales": scales,
        "files": {name: f"{out_dir.name}/{name}.png"
                  for name in RADIANCE_FILES + CUE_FILES + GT_FILES + ("stokes_vis",)},
    }


def _scale_capture(r: RenderedCapture, gain: float) -> RenderedCapture:
    from .stokes import CaptureSet, StokesImage

    return RenderedCapture(
        captures=CaptureSet(r.captures.i0 * gain, r.captures.i45 * gain, r.captures.i90 * gain),
        i135=r.i135 * gain,
        stokes=StokesImage(r.stokes.s0 * gain, r.stokes.s1 * gain, r.stokes.s2 * gain),
        gbuffer=r.gbuffer,
        gt_diffuse=r.gt_diffuse,
        gt_specular=r.gt_specular,
        gt_roughness=r.gt_roughness,
        gt_normal=r.gt_normal,
        gt_depth=r.gt_depth,
    )


# -- dataset-level driver -----------------------------------------------------------


def _split_jobs(cfg: DatasetConfig, split: str):
    meshes = cfg.train_meshes if split == "train" else cfg.test_meshes
    materials = cfg.train_materials if split == "train" else cfg.test_materials
    jobs = []
    for mi, mesh in enumerate(meshes):
        for ti, mat in enumerate(materials):
            for ri in range(cfg.rotations_per_combo):
                sample_id = f"{split}_m{mi:03d}_t{ti:04d}_r{ri:03d}"
                split_tag = 0 if split == "train" else 1
                jobs.append((sample_id, mesh, mat, (split_tag, mi, ti, ri)))
    return jobs


def _run_job(args):
    sample_id, mesh, mat, seed_key, cfg, root = args
    out_dir = Path(root) / sample_id
    try:
        record = generate_sample(mesh, mat, seed_key, cfg, out_dir)
        return sample_id, record, None
    except SampleRejected as exc:
        return sample_id, None, f"rejected: {exc.reason}"
    except (MissingAssetError, InputError, OSError) as exc:
        return sample_id, None, f"failed: {exc}"


def generate_dataset(cfg: DatasetConfig, out_root, split: str = "train", workers: int = 1):
    """Generate one split and write `manifest.ndjson`.

    Resumable: samples whose record file already exists are skipped. The
    manifest is rewritten from the per-sample record files in job order at
    the end, so a resumed run produces a byte-identical manifest.
    """
    if split not in ("train", "test"):
        raise InputError(f"split must be train or test, got {split!r}")
    root = Path(out_root) / split
    root.mkdir(parents=True, exist_ok=True)

    jobs = _split_jobs(cfg, split)
    if not jobs:
        raise InputError(f"no assets configured for split {split!r}")

    skipped = []
    pending = []
    for sample_id, mesh, mat, seed_key in jobs:
        if (root / sample_id / "record.json").exists():
            skipped.append(sample_id)
        else:
            pending.append((sample_id, mesh, mat, seed_key, cfg, root))

    failures = {}
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, pending))
    else:
        results = [_run_job(job) for job in pending]
    for sample_id, record, error in results:
        if error is not None:
            failures[sample_id] = error
            continue
        with open(root / sample_id / "record.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True)

    manifest_path = root / "manifest.ndjson"
    header = {
        "kind": "dataset-manifest",
        "split": split,
        "config_hash": cfg.config_hash,
        "n_samples": 0,
        "failures": {k: failures[k] for k in sorted(failures)},
    }
    records = []
    for sample_id, _, _, _ in jobs:
        record_file = root / sample_id / "record.json"
        if record_file.exists():
            with open(record_file, "r", encoding="utf-8") as fh:
                records.append(json.load(fh))
    header["n_samples"] = len(records)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(path):
    """Returns (header, records) from an ndjson manifest."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != "dataset-manifest":
        raise InputError(f"{path}: not a dataset manifest")
    return lines[0], lines[1:]


def load_sample(manifest_path, record: dict) -> dict:
    """Decode every image referenced by a manifest record.

    Returns float arrays keyed by file stem plus a boolean "mask" recovered
    from the normal map (off-mask normals encode to exactly zero, a value no
    unit normal can produce). Depth and normals are returned decoded to
    scene units / unit vectors.
    """
    base = Path(manifest_path).parent
    out = {}
    for name, rel in record["files"].items():
        path = base / rel
        if name == "stokes_vis":
            continue
        scale = record["scales"][name]
        out[name] = png16_read(path, scale)
    mask = out["gt_normal"].sum(axis=2) > 0
    out["mask"] = mask
    out["gt_normal"] = np.where(mask[..., None], out["gt_normal"] * 2.0 - 1.0, 0.0)
    lo, hi = record["depth_range"]
    out["gt_depth"] = np.where(mask, out["gt_depth"] * (hi - lo) + lo, 0.0)
    out["gt_roughness"] = out["gt_roughness"].mean(axis=2)
    return out
