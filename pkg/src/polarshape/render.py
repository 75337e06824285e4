"""Forward simulation: OBJ meshes, z-buffer rasterization into G-buffers, and
deferred polarized shading under a flash collocated with the pinhole camera.

Camera convention: origin at the eye, x right, y up, looking down -z.
``depth`` is the positive distance along -z. Pixel row 0 is the image top,
so array row direction is -y; all unprojection code below shares this.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import brdf
from .brdf import MaterialSample, diffuse_dop_cos
from .errors import InputError, ObjParseError, SceneError
from .stokes import CaptureSet, StokesImage, filter_image

NEAR_PLANE = 1e-3


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with per-vertex normals and UVs."""

    vertices: np.ndarray  # (V, 3)
    normals: np.ndarray  # (V, 3), unit length
    uvs: np.ndarray  # (V, 2)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        if len(self.faces) < 1:
            raise InputError("mesh has no triangles")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise InputError("face index out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera at the origin viewing -z; ``fov_deg`` is vertical."""

    fov_deg: float = 40.0
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not 10.0 <= self.fov_deg <= 120.0:
            raise InputError(f"fov must lie in [10, 120] degrees, got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise InputError("camera resolution must be positive")

    @property
    def tan_half(self) -> float:
        return float(np.tan(np.deg2rad(self.fov_deg) / 2.0))

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def ray_directions(self) -> np.ndarray:
        """Unnormalized camera-space ray directions per pixel center (H, W, 3).

        Scaled so the z component is -1; multiplying by depth gives the
        camera-space position.
        """
        xs = (np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0
        ys = 1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0
        gx, gy = np.meshgrid(xs * self.tan_half * self.aspect, ys * self.tan_half)
        return np.stack([gx, gy, -np.ones_like(gx)], axis=-1)


@dataclass(frozen=True)
class FlashLight:
    """Point light collocated with the camera (inverse-square falloff)."""

    intensity: np.ndarray = field(default_factory=lambda: np.ones(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if np.any(np.asarray(self.intensity) <= 0):
            raise InputError("flash intensity must be positive")


@dataclass(frozen=True)
class GBuffer:
    position: np.ndarray  # (H, W, 3) camera space
    normal: np.ndarray  # (H, W, 3) unit on mask
    uv: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W), distance along -z, 0 off-mask
    mask: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class TextureMaterial:
    """SVBRDF texture set sampled by UV; maps are (Ht, Wt, 3) / (Ht, Wt)."""

    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray
    ior: float = brdf.DEFAULT_IOR
    uv_scale: float = 1.0
    uv_offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class Scene:
    mesh: Mesh
    material: TextureMaterial
    rotation: np.ndarray  # unit quaternion, (x, y, z, w) scipy order
    translation: np.ndarray
    camera: Camera
    flash: FlashLight


def uniform_material(
    diffuse=(0.5, 0.5, 0.5), specular=(0.04, 0.04, 0.04), roughness=0.5
) -> TextureMaterial:
    """1x1 constant texture set; handy for fixtures."""
    return TextureMaterial(
        diffuse=np.full((1, 1, 3), 0.0) + np.asarray(diffuse, dtype=np.float64),
        specular=np.full((1, 1, 3), 0.0) + np.asarray(specular, dtype=np.float64),
        roughness=np.full((1, 1), float(roughness)),
    )


# -- OBJ ---------------------------------------------------------------------


def load_obj(path) -> Mesh:
    """Load the v/vn/vt/f subset of an OBJ file.

    Faces may be triangles or convex polygons (triangulated as fans).
    Indices are 1-based or negative-relative; 0 is rejected with the line
    number. Missing normals are rebuilt from area-weighted face normals;
    missing UVs fall back to a planar projection with a warning.
    """
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    normals: list[list[float]] = []
    corners: list[tuple[int, int, int]] = []  # (v, vt, vn) indices, -1 if absent
    faces: list[tuple[int, int, int]] = []
    corner_index: dict[tuple[int, int, int], int] = {}

    def resolve(raw: str, count: int, line_no: int, what: str) -> int:
        idx = int(raw)
        if idx == 0:
            raise ObjParseError(path, line_no, f"{what} index 0 (OBJ indices are 1-based)")
        idx = idx - 1 if idx > 0 else count + idx
        if idx < 0 or idx >= count:
            raise ObjParseError(path, line_no, f"{what} index {raw} out of range")
        return idx

    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag, args = parts[0], parts[1:]
            try:
                if tag == "v":
                    positions.append([float(x) for x in args[:3]])
                elif tag == "vt":
                    texcoords.append([float(x) for x in args[:2]])
                elif tag == "vn":
                    normals.append([float(x) for x in args[:3]])
                elif tag == "f":
                    if len(args) < 3:
                        raise ObjParseError(path, line_no, "face with fewer than 3 vertices")
                    ids = []
                    for token in args:
                        fields = token.split("/")
                        vi = resolve(fields[0], len(positions), line_no, "vertex")
                        ti = (
                            resolve(fields[1], len(texcoords), line_no, "texcoord")
                            if len(fields) > 1 and fields[1]
                            else -1
                        )
                        ni = (
                            resolve(fields[2], len(normals), line_no, "normal")
                            if len(fields) > 2 and fields[2]
                            else -1
                        )
                        key = (vi, ti, ni)
                        if key not in corner_index:
                            corner_index[key] = len(corners)
                            corners.append(key)
                        ids.append(corner_index[key])
                    for k in range(1, len(ids) - 1):  # fan triangulation
                        faces.append((ids[0], ids[k], ids[k + 1]))
                # other tags (o, g, s, mtllib, usemtl, ...) are ignored
            except ObjParseError:
                raise
            except ValueError as exc:
                raise ObjParseError(path, line_no, f"malformed {tag} entry: {exc}") from exc

    if not faces:
        raise ObjParseError(path, 0, "no faces found")

    v = np.array([positions[c[0]] for c in corners], dtype=np.float64)
    f = np.array(faces, dtype=np.int64)

    has_uv = all(c[1] >= 0 for c in corners) and texcoords
    if has_uv:
        uv = np.array([texcoords[c[1]] for c in corners], dtype=np.float64)
    else:
        warnings.warn(f"{path}: no texture coordinates, synthesizing planar UVs")
        lo, hi = v.min(axis=0), v.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        uv = (v[:, :2] - lo[:2]) / span[:2]

    has_n = all(c[2] >= 0 for c in corners) and normals
    if has_n:
        n = np.array([normals[c[2]] for c in corners], dtype=np.float64)
    else:
        n = _vertex_normals(v, f)
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return Mesh(v, n, uv, f)


def _vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted face normals accumulated onto vertices."""
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    fn = np.cross(e1, e2)  # magnitude ~ 2 * area: the weighting
    out = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(out, faces[:, k], fn)
    return out


def save_obj(path, mesh: Mesh) -> None:
    """Write a mesh back out as v/vt/vn/f records."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for t in mesh.uvs:
            fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for f in mesh.faces:
            a, b, c = (int(i) + 1 for i in f)
            fh.write(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}\n")


# -- procedural fixtures -----------------------------------------------------


def make_sphere(radius: float = 1.0, n_lat: int = 32, n_lon: int = 64) -> Mesh:
    """UV sphere centered at the origin with outward normals."""
    lats = np.linspace(0.0, np.pi, n_lat + 1)
    lons = np.linspace(0.0, 2.0 * np.pi, n_lon + 1)
    lat, lon = np.meshgrid(lats, lons, indexing="ij")
    x = np.sin(lat) * np.cos(lon)
    y = np.cos(lat)
    z = np.sin(lat) * np.sin(lon)
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uv = np.stack([lon / (2.0 * np.pi), 1.0 - lat / np.pi], axis=-1).reshape(-1, 2)

    def vid(i, j):
        return i * (n_lon + 1) + j

    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            # counter-clockwise seen from outside; skip degenerate pole quads
            if i > 0:
                faces.append((a, d, b))
            if i < n_lat - 1:
                faces.append((b, d, c))
    v = pts * radius
    n = pts.copy()
    return Mesh(v, n, uv, np.asarray(faces, dtype=np.int64))


def make_plane(size: float = 1.0, n: int = 8) -> Mesh:
    """Square plane in the xy plane facing +z, subdivided n x n."""
    coords = np.linspace(-size / 2.0, size / 2.0, n + 1)
    gx, gy = np.meshgrid(coords, coords)
    v = np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)
    uv01 = (np.stack([gx, gy], axis=-1).reshape(-1, 2) / size) + 0.5
    normals = np.tile([0.0, 0.0, 1.0], (len(v), 1))
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + 1
            c = a + (n + 1)
            d = c + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return Mesh(v, normals, uv01, np.asarray(faces, dtype=np.int64))


# -- rasterization -----------------------------------------------------------


def rasterize(scene: Scene) -> GBuffer:
    """Z-buffer rasterization with perspective-correct attribute interpolation.

    Back faces (clockwise in y-up NDC) are culled; nearest fragment wins with
    a strict depth test, so the fixed triangle order makes output
    deterministic. Raises if any vertex sits behind the near plane.
    """
    cam = scene.camera
    rot = Rotation.from_quat(np.asarray(scene.rotation, dtype=np.float64))
    verts = rot.apply(scene.mesh.vertices) + np.asarray(scene.translation, dtype=np.float64)
    norms = rot.apply(scene.mesh.normals)

    w_clip = -verts[:, 2]
    if np.any(w_clip <= NEAR_PLANE):
        raise SceneError("mesh crosses the near plane; move the object farther out")

    tan_half = cam.tan_half
    ndc_x = verts[:, 0] / w_clip / (tan_half * cam.aspect)
    ndc_y = verts[:, 1] / w_clip / tan_half
    px = (ndc_x + 1.0) * 0.5 * cam.width - 0.5
    py = (1.0 - ndc_y) * 0.5 * cam.height - 0.5

    h, w = cam.height, cam.width
    depth_buf = np.full((h, w), np.inf)
    pos_buf = np.zeros((h, w, 3))
    nrm_buf = np.zeros((h, w, 3))
    uv_buf = np.zeros((h, w, 2))

    inv_w = 1.0 / w_clip
    pos_over_w = verts * inv_w[:, None]
    nrm_over_w = norms * inv_w[:, None]
    uv_over_w = scene.mesh.uvs * inv_w[:, None]

    faces = scene.mesh.faces
    tri_px = px[faces]
    tri_py = py[faces]
    # signed area in y-up NDC pixel space: flip py so CCW-from-camera is positive
    area2 = (tri_px[:, 1] - tri_px[:, 0]) * (-(tri_py[:, 2] - tri_py[:, 0])) - (
        -(tri_py[:, 1] - tri_py[:, 0])
    ) * (tri_px[:, 2] - tri_px[:, 0])

    for t in range(len(faces)):
        if area2[t] <= 1e-12:  # back-facing or degenerate
            continue
        ia, ib, ic = faces[t]
        xs = tri_px[t]
        ys = tri_py[t]
        x0 = max(int(np.ceil(xs.min())), 0)
        x1 = min(int(np.floor(xs.max())), w - 1)
        y0 = max(int(np.ceil(ys.min())), 0)
        y1 = min(int(np.floor(ys.max())), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        # barycentric via edge functions (consistent orientation with area2)
        det = area2[t]
        l0 = ((xs[1] - gx) * (-(ys[2] - gy)) - (-(ys[1] - gy)) * (xs[2] - gx)) / det
        l1 = ((xs[2] - gx) * (-(ys[0] - gy)) - (-(ys[2] - gy)) * (xs[0] - gx)) / det
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        iw = l0 * inv_w[ia] + l1 * inv_w[ib] + l2 * inv_w[ic]
        frag_depth = 1.0 / iw
        closer = inside & (frag_depth < depth_buf[y0 : y1 + 1, x0 : x1 + 1])
        if not closer.any():
            continue
        lam = (l0[closer], l1[closer], l2[closer])
        d = frag_depth[closer]
        rows, cols = np.nonzero(closer)
        rows += y0
        cols += x0
        depth_buf[rows, cols] = d
        for buf, attr in (
            (pos_buf, pos_over_w),
            (nrm_buf, nrm_over_w),
        ):
            interp = (
                lam[0][:, None] * attr[ia] + lam[1][:, None] * attr[ib] + lam[2][:, None] * attr[ic]
            )
            buf[rows, cols] = interp * d[:, None]
        interp_uv = (
            lam[0][:, None] * uv_over_w[ia]
            + lam[1][:, None] * uv_over_w[ib]
            + lam[2][:, None] * uv_over_w[ic]
        )
        uv_buf[rows, cols] = interp_uv * d[:, None]

    mask = np.isfinite(depth_buf)
    depth = np.where(mask, depth_buf, 0.0)
    length = np.linalg.norm(nrm_buf, axis=-1, keepdims=True)
    nrm_buf = np.where(mask[..., None], nrm_buf / np.maximum(length, 1e-12), 0.0)
    pos_buf[~mask] = 0.0
    uv_buf[~mask] = 0.0
    return GBuffer(pos_buf, nrm_buf, uv_buf, depth, mask)


def sample_material(material: TextureMaterial, gbuffer: GBuffer) -> MaterialSample:
    """Bilinear texture lookup at G-buffer UVs (wrap addressing)."""
    uv = gbuffer.uv * material.uv_scale + np.asarray(material.uv_offset)
    diffuse = _sample_bilinear(material.diffuse, uv)
    specular = _sample_bilinear(material.specular, uv)
    roughness = _sample_bilinear(material.roughness[..., None], uv)[..., 0]
    roughness = np.clip(roughness, brdf.ALPHA_MIN, 1.0)
    return MaterialSample(diffuse, specular, roughness, gbuffer.normal, material.ior)


def _sample_bilinear(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    th, tw = tex.shape[:2]
    u = np.mod(uv[..., 0], 1.0) * tw - 0.5
    v = np.mod(1.0 - uv[..., 1], 1.0) * th - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    x0m, x1m = x0 % tw, (x0 + 1) % tw
    y0m, y1m = y0 % th, (y0 + 1) % th
    top = tex[y0m, x0m] * (1 - fx) + tex[y0m, x1m] * fx
    bot = tex[y1m, x0m] * (1 - fx) + tex[y1m, x1m] * fx
    return top * (1 - fy) + bot * fy


# -- polarized shading -------------------------------------------------------


def shade_polarized(
    g: GBuffer,
    materials: MaterialSample,
    flash: FlashLight,
    specular_polarization: bool = False,
) -> StokesImage:
    """Deferred shading of a G-buffer into a Stokes image.

    The flash is collocated with the camera, so light and view directions
    coincide. Total radiance goes to s0. The diffuse component carries
    linear polarization with magnitude diffuse_dop(theta) and direction
    perpendicular to the plane of incidence: writing psi for the image
    azimuth of the normal orthogonalized against the view ray
    (e = n - (n.v) v, psi = atan2(e_y, e_x); equal to atan2(n_y, n_x)
    on-axis), the direction doubles to

        (s1, s2) = L_d * dop * (cos 2(psi + 90deg), sin 2(psi + 90deg)).

    The specular lobe is unpolarized by default (mirror geometry under a
    collocated flash reflects at near-zero facet incidence);
    ``specular_polarization`` enables a Fresnel-reflection term for
    limitation studies.
    """
    view = -g.position
    dist = np.linalg.norm(view, axis=-1)
    safe_dist = np.maximum(dist, 1e-12)
    v = view / safe_dist[..., None]

    diffuse_f, specular_f = brdf.eval_brdf(materials, v, v)
    falloff = np.where(g.mask, 1.0 / np.maximum(dist * dist, 1e-12), 0.0)
    intensity = np.asarray(flash.intensity, dtype=np.float64)
    l_d = diffuse_f * (falloff[..., None] * intensity)
    l_s = specular_f * (falloff[..., None] * intensity)

    cos_theta = np.clip(np.sum(g.normal * v, axis=-1), 0.0, 1.0)
    dop = diffuse_dop_cos(cos_theta, materials.ior)

    cos2, sin2 = polarization_direction(g.normal, v)

    s0 = l_d + l_s
    s1 = l_d * (dop * cos2)[..., None]
    s2 = l_d * (dop * sin2)[..., None]

    if specular_polarization:
        # reflection-Fresnel dop, oriented like the diffuse term
        rs_rp = _reflection_dop(cos_theta, materials.ior)
        s1 = s1 + l_s * (rs_rp * cos2)[..., None]
        s2 = s2 + l_s * (rs_rp * sin2)[..., None]

    off = ~g.mask
    for arr in (s0, s1, s2):
        arr[off] = 0.0
    return StokesImage(s0, s1, s2)


def polarization_direction(normal: np.ndarray, v: np.ndarray):
    """Doubled polarization direction (cos 2psi*, sin 2psi*) per pixel.

    psi* is 90 degrees past the image azimuth of e = n - (n.v) v, the
    in-plane-of-incidence transverse direction. e vanishes only where the
    normal faces the viewer exactly, where the polarization degree is zero
    anyway; such pixels return (0, 0).
    """
    c = np.sum(normal * v, axis=-1, keepdims=True)
    e = normal - c * v
    ex, ey = e[..., 0], e[..., 1]
    r2 = ex * ex + ey * ey
    safe = np.maximum(r2, 1e-24)
    cos2 = np.where(r2 > 1e-24, -(ex * ex - ey * ey) / safe, 0.0)
    sin2 = np.where(r2 > 1e-24, -(2.0 * ex * ey) / safe, 0.0)
    return cos2, sin2


def _reflection_dop(cos_theta: np.ndarray, n: float) -> np.ndarray:
    c = np.clip(cos_theta, 1e-9, 1.0)
    s2 = (1.0 - c * c) / (n * n)
    ct = np.sqrt(np.maximum(1.0 - s2, 0.0))
    r_s = ((c - n * ct) / (c + n * ct)) ** 2
    r_p = ((n * c - ct) / (n * c + ct)) ** 2
    return (r_s - r_p) / np.maximum(r_s + r_p, 1e-12)


# -- capture + relighting ----------------------------------------------------

CAPTURE_ANGLES = (0.0, 45.0, 90.0, 135.0)


@dataclass(frozen=True)
class RenderedCapture:
    captures: CaptureSet
    i135: np.ndarray
    stokes: StokesImage
    gbuffer: GBuffer
    gt_diffuse: np.ndarray
    gt_specular: np.ndarray
    gt_roughness: np.ndarray
    gt_normal: np.ndarray
    gt_depth: np.ndarray


def render_capture(scene: Scene, angles=CAPTURE_ANGLES) -> RenderedCapture:
    """Simulate a full polarized capture plus ground-truth maps."""
    g = rasterize(scene)
    materials = sample_material(scene.material, g)
    s = shade_polarized(g, materials, scene.flash)
    images = [filter_image(s, phi) for phi in angles]
    captures = CaptureSet(images[0], images[1], images[2])
    return RenderedCapture(
        captures=captures,
        i135=images[3],
        stokes=s,
        gbuffer=g,
        gt_diffuse=materials.diffuse_albedo * g.mask[..., None],
        gt_specular=materials.specular_albedo * g.mask[..., None],
        gt_roughness=materials.roughness * g.mask,
        gt_normal=g.normal,
        gt_depth=g.depth,
    )


def positions_from_depth(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Camera-space positions reconstructed from a depth map."""
    rays = camera.ray_directions()
    return rays * depth[..., None]


def render_relit(
    maps,
    light_position: np.ndarray,
    light_intensity: np.ndarray,
    camera: Camera,
) -> np.ndarray:
    """Unpolarized deferred shading of recovered maps under a point light.

    ``maps`` provides diffuse/specular/roughness/normal/depth fields (see
    inverse.SvbrdfMaps). Positions come from the stored depth, so the result
    only depends on the five maps; with the light at the origin this equals
    the s0 of the polarized shader.
    """
    mask = maps.depth > 0
    pos = positions_from_depth(maps.depth, camera)
    light_position = np.asarray(light_position, dtype=np.float64)
    to_light = light_position - pos
    dist = np.maximum(np.linalg.norm(to_light, axis=-1), 1e-12)
    l = to_light / dist[..., None]
    view = -pos
    v = view / np.maximum(np.linalg.norm(view, axis=-1, keepdims=True), 1e-12)

    m = MaterialSample(
        diffuse_albedo=maps.diffuse,
        specular_albedo=maps.specular,
        roughness=np.maximum(maps.roughness, brdf.ALPHA_MIN),
        normal=maps.normal,
    )
    diffuse_f, specular_f = brdf.eval_brdf(m, l, v)
    falloff = np.where(mask, 1.0 / (dist * dist), 0.0)
    out = (diffuse_f + specular_f) * (falloff[..., None] * np.asarray(light_intensity))
    out[~mask] = 0.0
    return out
