"""Triangle meshes, camera poses, and a z-buffered rasterizer.

The rasterizer emits per-pixel face-index, shading, and mask buffers. The
rendered image is then a gather from the per-face texture times a constant
shading weight plus a constant term, so any scalar of the image has exact
gradients with respect to texture colors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import diffcore as dc

NEUTRAL_GRAY = 0.5
SHADING_FLOOR = 0.3
DEFAULT_LIGHT = (0.35, -0.45, 0.82)
NEAR_PLANE = 0.05


class SceneError(Exception):
    pass


@dataclass
class Mesh:
    """Triangle mesh with a paintable face subset.

    edges holds (i, j, length) triples where i and j index into
    sampled_faces (texture row order) and length is the shared-edge length
    in mesh units. Boundary edges are excluded.
    """

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int
    sampled_faces: np.ndarray  # (S,) int, sorted face ids
    edges: list = field(default_factory=list)

    @property
    def n_sampled(self) -> int:
        return len(self.sampled_faces)

    def validate(self):
        if len(self.faces) == 0:
            raise SceneError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise SceneError("face references a missing vertex")
        for i, j, length in self.edges:
            if not (0 <= i < self.n_sampled and 0 <= j < self.n_sampled):
                raise SceneError("edge references a non-sampled face")
            if length <= 0:
                raise SceneError("edge with non-positive length")

    def bounding_center_radius(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        center = (lo + hi) / 2.0
        radius = float(np.linalg.norm(self.vertices - center, axis=1).max())
        return center, radius


@dataclass
class Texture:
    """Per-sampled-face RGB colors, channels in [0, 1]."""

    values: np.ndarray  # (S, 3) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 3:
            raise SceneError("texture must be (faces, 3)")

    def clamp(self) -> "Texture":
        np.clip(self.values, 0.0, 1.0, out=self.values)
        return self

    def copy(self) -> "Texture":
        return Texture(self.values.copy())


@dataclass(frozen=True)
class CameraPose:
    distance: float
    pitch: float  # degrees above the horizontal plane; 90 is overhead
    yaw: float  # degrees around the vertical axis
    fov: float = 50.0
    image_size: int = 128
    look_offset: tuple = (0.0, 0.0, 0.0)  # shifts the aim point off the mesh center

    def __post_init__(self):
        if self.distance <= 0:
            raise SceneError("camera distance must be positive")
        if self.image_size <= 0:
            raise SceneError("image size must be positive")


@dataclass
class RenderedScene:
    """A composited render plus the buffers that produced it."""

    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) uint8, 1 on any object pixel
    face_index: np.ndarray  # (H, W) int32, sampled-face row or -1
    shading: np.ndarray  # (H, W) float64 in (0, 1]
    background: np.ndarray  # (H, W, 3)
    background_id: str
    pose: CameraPose
    gt_box: tuple | None  # (x1, y1, x2, y2) pixels, None when mask empty


# ---------------------------------------------------------------------------
# mesh IO and construction


def _parse_face_token(token: str) -> int:
    return int(token.split("/")[0])


def load_mesh(path) -> Mesh:
    """Read a Wavefront OBJ subset: v and f records, triangles only."""
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise SceneError(f"{path}:{lineno}: malformed vertex")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [_parse_face_token(t) for t in parts[1:]]
                if len(idx) != 3:
                    raise SceneError(f"{path}:{lineno}: non-triangular face")
                if any(i < 1 for i in idx):
                    raise SceneError(f"{path}:{lineno}: unsupported face index")
                faces.append([i - 1 for i in idx])
    if not faces:
        raise SceneError(f"{path}: empty mesh")
    verts = np.asarray(vertices, dtype=np.float64)
    faces_arr = np.asarray(faces, dtype=np.int64)
    if faces_arr.max() >= len(verts):
        raise SceneError(f"{path}: face references a missing vertex")
    _check_manifold(faces_arr)
    sampled = np.arange(len(faces_arr))
    mesh = Mesh(verts, faces_arr, sampled, _shared_edges(verts, faces_arr, sampled))
    mesh.validate()
    return mesh


def _check_manifold(faces: np.ndarray):
    counts = {}
    for face in faces:
        for a, b in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    bad = [k for k, c in counts.items() if c > 2]
    if bad:
        raise SceneError(f"non-manifold edge shared by more than two faces: {bad[0]}")


def _shared_edges(vertices, faces, sampled) -> list:
    """Interior edges among the sampled subset as (i, j, length)."""
    pos = {int(f): i for i, f in enumerate(sampled)}
    owners = {}
    for fid in sampled:
        face = faces[fid]
        for a, b in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
            key = (min(a, b), max(a, b))
            owners.setdefault(key, []).append(int(fid))
    edges = []
    for (a, b), fs in sorted(owners.items()):
        if len(fs) == 2:
            length = float(np.linalg.norm(vertices[a] - vertices[b]))
            edges.append((pos[fs[0]], pos[fs[1]], length))
    return edges


def sample_faces(mesh: Mesh, fraction: float, seed: int) -> Mesh:
    """Designate a random paintable subset and rebuild its edge adjacency."""
    if not 0 < fraction <= 1:
        raise SceneError("sampled_face_fraction must be in (0, 1]")
    n = len(mesh.faces)
    count = max(1, int(round(fraction * n)))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    out = Mesh(mesh.vertices, mesh.faces, chosen, _shared_edges(mesh.vertices, mesh.faces, chosen))
    out.validate()
    return out


def make_vehicle_mesh() -> Mesh:
    """Procedural low-poly vehicle: a subdivided body box plus a cabin box."""
    verts: list = []
    faces: list = []

    def add_box(lo, hi, divs):
        base = len(verts)
        nx, ny, nz = divs
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        grid = {}

        def vid(i, j, k):
            key = (i, j, k)
            if key not in grid:
                t = np.array([i / nx, j / ny, k / nz])
                grid[key] = len(verts)
                verts.append(lo + t * (hi - lo))
            return grid[key]

        def quad(a, b, c, d):
            faces.append([a, b, c])
            faces.append([a, c, d])

        for i in range(nx):
            for j in range(ny):
                quad(vid(i, j, nz), vid(i + 1, j, nz), vid(i + 1, j + 1, nz), vid(i, j + 1, nz))
                quad(vid(i, j, 0), vid(i, j + 1, 0), vid(i + 1, j + 1, 0), vid(i + 1, j, 0))
        for i in range(nx):
            for k in range(nz):
                quad(vid(i, 0, k), vid(i + 1, 0, k), vid(i + 1, 0, k + 1), vid(i, 0, k + 1))
                quad(vid(i, ny, k), vid(i, ny, k + 1), vid(i + 1, ny, k + 1), vid(i + 1, ny, k))
        for j in range(ny):
            for k in range(nz):
                quad(vid(0, j, k), vid(0, j, k + 1), vid(0, j + 1, k + 1), vid(0, j + 1, k))
                quad(vid(nx, j, k), vid(nx, j + 1, k), vid(nx, j + 1, k + 1), vid(nx, j, k + 1))
        return base

    add_box((-1.2, -0.6, -0.5), (1.2, 0.6, 0.05), (6, 3, 2))
    add_box((-0.9, -0.5, 0.05), (0.15, 0.5, 0.5), (3, 3, 2))
    verts_arr = np.asarray(verts)
    faces_arr = np.asarray(faces, dtype=np.int64)
    sampled = np.arange(len(faces_arr))
    mesh = Mesh(verts_arr, faces_arr, sampled, _shared_edges(verts_arr, faces_arr, sampled))
    mesh.validate()
    return mesh


def write_obj(mesh: Mesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def resolve_mesh(spec_str, fraction: float = 0.6, seed: int = 0) -> Mesh:
    """Map a config mesh value to a Mesh: 'builtin:vehicle' or an OBJ path."""
    if spec_str == "builtin:vehicle":
        mesh = make_vehicle_mesh()
    else:
        mesh = load_mesh(spec_str)
    if fraction < 1.0:
        mesh = sample_faces(mesh, fraction, seed)
    return mesh


# ---------------------------------------------------------------------------
# camera and rasterization


def _camera_basis(pose: CameraPose, center):
    el = math.radians(pose.pitch)
    az = math.radians(pose.yaw)
    direction = np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    aim = center + np.asarray(pose.look_offset, dtype=np.float64)
    eye = aim + pose.distance * direction
    forward = -direction  # unit: from eye toward center
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        # overhead view: keep image orientation tied to yaw
        up = np.array([math.cos(az), math.sin(az), 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    return eye, right, cam_up, forward


def rasterize(mesh: Mesh, texture: Texture, pose: CameraPose, background: np.ndarray,
              light_dir=DEFAULT_LIGHT, background_id: str = "custom") -> RenderedScene:
    """Perspective z-buffer rasterization composited over a background."""
    if texture.values.shape[0] != mesh.n_sampled:
        raise SceneError(
            f"texture rows {texture.values.shape[0]} != sampled faces {mesh.n_sampled}"
        )
    size = pose.image_size
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (size, size, 3):
        raise SceneError(f"background shape {background.shape} != ({size}, {size}, 3)")
    center, radius = mesh.bounding_center_radius()
    eye = _camera_basis(pose, center)[0]
    if np.linalg.norm(eye - center) <= radius:
        raise SceneError("camera inside mesh bounding sphere")

    buffers = _raster_buffers(mesh, pose, center, light_dir)
    face_index, full_mask, shading = buffers
    image = composite_image(face_index, full_mask, shading, background, texture.values)
    gt = mask_bbox(full_mask)
    return RenderedScene(
        image=image,
        mask=full_mask,
        face_index=face_index,
        shading=shading,
        background=background,
        background_id=background_id,
        pose=pose,
        gt_box=gt,
    )


def _raster_buffers(mesh: Mesh, pose: CameraPose, center, light_dir):
    size = pose.image_size
    eye, right, cam_up, forward = _camera_basis(pose, center)
    rel = mesh.vertices - eye
    xc = rel @ right
    yc = rel @ cam_up
    zc = rel @ forward
    f = (size / 2.0) / math.tan(math.radians(pose.fov) / 2.0)
    cx = cy = size / 2.0

    light = None
    if light_dir is not None:
        light = np.asarray(light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)

    sampled_pos = np.full(len(mesh.faces), -1, dtype=np.int64)
    sampled_pos[mesh.sampled_faces] = np.arange(mesh.n_sampled)

    zbuf = np.full((size, size), np.inf)
    face_index = np.full((size, size), -1, dtype=np.int32)
    full_mask = np.zeros((size, size), dtype=np.uint8)
    shading = np.ones((size, size), dtype=np.float64)

    ys_grid, xs_grid = np.mgrid[0:size, 0:size]
    px_grid = xs_grid + 0.5
    py_grid = ys_grid + 0.5

    for fid, face in enumerate(mesh.faces):
        z3 = zc[face]
        if np.any(z3 <= NEAR_PLANE):
            continue
        px = cx + f * xc[face] / z3
        py = cy - f * yc[face] / z3
        x_lo = max(int(np.floor(px.min() - 0.5)), 0)
        x_hi = min(int(np.ceil(px.max() + 0.5)), size)
        y_lo = max(int(np.floor(py.min() - 0.5)), 0)
        y_hi = min(int(np.ceil(py.max() + 0.5)), size)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        sx = px_grid[y_lo:y_hi, x_lo:x_hi]
        sy = py_grid[y_lo:y_hi, x_lo:x_hi]
        d = (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0])
        if abs(d) < 1e-12:
            continue
        w0 = ((px[1] - sx) * (py[2] - sy) - (px[2] - sx) * (py[1] - sy)) / d
        w1 = ((px[2] - sx) * (py[0] - sy) - (px[0] - sx) * (py[2] - sy)) / d
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        inv_z = w0 / z3[0] + w1 / z3[1] + w2 / z3[2]
        depth = np.where(inv_z > 0, 1.0 / np.maximum(inv_z, 1e-12), np.inf)
        zview = zbuf[y_lo:y_hi, x_lo:x_hi]
        hit = inside & (depth < zview)
        if not hit.any():
            continue
        v0, v1, v2 = mesh.vertices[face]
        n = np.cross(v1 - v0, v2 - v0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        if light is None:
            shade = 1.0
        else:
            shade = SHADING_FLOOR + (1.0 - SHADING_FLOOR) * abs(float(n @ light) / norm)
            shade = min(max(shade, SHADING_FLOOR), 1.0)
        zview[hit] = depth[hit]
        face_index[y_lo:y_hi, x_lo:x_hi][hit] = sampled_pos[fid]
        full_mask[y_lo:y_hi, x_lo:x_hi][hit] = 1
        shading[y_lo:y_hi, x_lo:x_hi][hit] = shade
    return face_index, full_mask, shading


def mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


# ---------------------------------------------------------------------------
# compositing (numpy path for evaluation, taped path for attacks)


def composite_image(face_index, mask, shading, background, texture_values) -> np.ndarray:
    sampled_px = face_index >= 0
    colors = np.empty(face_index.shape + (3,))
    colors[:] = NEUTRAL_GRAY
    colors[sampled_px] = texture_values[face_index[sampled_px]]
    obj = shading[..., None] * colors
    m = mask[..., None].astype(np.float64)
    return m * obj + (1.0 - m) * background


def composite_tensor(scene: RenderedScene, texture: dc.Tensor) -> dc.Tensor:
    """Rebuild the scene image on the tape as a function of the texture."""
    fi = scene.face_index
    m = scene.mask.astype(np.float64)[..., None]
    sampled_px = (fi >= 0).astype(np.float64)[..., None]
    shade = scene.shading[..., None]
    idx = np.clip(fi, 0, None).astype(np.int64)[..., None] * 3 + np.arange(3)[None, None, :]
    gathered = dc.take(texture, idx)
    weight = m * sampled_px * shade
    const = m * (1.0 - sampled_px) * shade * NEUTRAL_GRAY + (1.0 - m) * scene.background
    return dc.add(dc.mul(gathered, dc.Tensor(weight)), dc.Tensor(const))


def scene_with_texture(scene: RenderedScene, texture: Texture) -> RenderedScene:
    """The same buffers re-composited with a different texture."""
    image = composite_image(scene.face_index, scene.mask, scene.shading, scene.background, texture.values)
    return RenderedScene(
        image=image,
        mask=scene.mask,
        face_index=scene.face_index,
        shading=scene.shading,
        background=scene.background,
        background_id=scene.background_id,
        pose=scene.pose,
        gt_box=scene.gt_box,
    )


# ---------------------------------------------------------------------------
# backgrounds and pose grids


def make_background(kind: str, seed: int, size: int, path=None) -> np.ndarray:
    """Deterministic background image for (kind, seed, size)."""
    if kind == "gradient":
        rng = np.random.default_rng(np.random.SeedSequence([101, seed]))
        c0 = rng.uniform(0.15, 0.85, size=3)
        c1 = rng.uniform(0.15, 0.85, size=3)
        theta = rng.uniform(0, 2 * math.pi)
        ys, xs = np.mgrid[0:size, 0:size]
        t = (xs * math.cos(theta) + ys * math.sin(theta)) / max(size - 1, 1)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        return c0[None, None, :] + t[..., None] * (c1 - c0)[None, None, :]
    if kind == "noise":
        rng = np.random.default_rng(np.random.SeedSequence([202, seed]))
        grid = rng.uniform(0.1, 0.9, size=(8, 8, 3))
        coarse = dc.Tensor(grid.transpose(2, 0, 1))
        smooth = dc.bilinear_resize(coarse, (size, size)).data
        return np.ascontiguousarray(smooth.transpose(1, 2, 0))
    if kind == "file":
        if path is None:
            raise SceneError("file background requires a path")
        return load_image(path)
    raise SceneError(f"unknown background kind: {kind}")


def pose_grid(distances, pitches, yaws, fov: float = 50.0, image_size: int = 128):
    """Cartesian pose product, distance-major then pitch then yaw."""
    if not distances or not pitches or not yaws:
        raise SceneError("pose grid requires non-empty distances, pitches, yaws")
    poses = []
    for d in distances:
        for p in pitches:
            for y in yaws:
                poses.append(CameraPose(float(d), float(p), float(y), fov, image_size))
    return poses


# ---------------------------------------------------------------------------
# image files


def save_png(image: np.ndarray, path):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise SceneError(f"unreadable image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float64) / 255.0


def save_scene_npz(scene: RenderedScene, path):
    pose = scene.pose
    np.savez_compressed(
        path,
        mask=scene.mask,
        face_index=scene.face_index,
        shading=scene.shading,
        background=scene.background,
        background_id=np.array(scene.background_id),
        pose=np.array(
            [pose.distance, pose.pitch, pose.yaw, pose.fov, pose.image_size]
            + list(pose.look_offset)
        ),
        gt_box=np.array(scene.gt_box if scene.gt_box else [np.nan] * 4),
    )


def load_scene_npz(path) -> RenderedScene:
    with np.load(path, allow_pickle=False) as data:
        pose_arr = data["pose"]
        offset = tuple(float(v) for v in pose_arr[5:8]) if len(pose_arr) >= 8 else (0.0, 0.0, 0.0)
        pose = CameraPose(
            float(pose_arr[0]), float(pose_arr[1]), float(pose_arr[2]),
            float(pose_arr[3]), int(pose_arr[4]), offset,
        )
        gt = data["gt_box"]
        gt_box = None if np.isnan(gt).any() else tuple(float(v) for v in gt)
        background = data["background"]
        mask = data["mask"]
        face_index = data["face_index"]
        shading = data["shading"]
        return RenderedScene(
            image=np.zeros_like(background),
            mask=mask,
            face_index=face_index,
            shading=shading,
            background=background,
            background_id=str(data["background_id"]),
            pose=pose,
            gt_box=gt_box,
        )
