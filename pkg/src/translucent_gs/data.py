"""Datasets, the analytic synthetic-scene generator, and file formats.

Manifest layout (one file per split, ``transforms_<split>.json``)::

    {"camera_angle_x": <horizontal fov, radians>,
     "frames": [{"file_path": "train/r_000.png", "transform_matrix": [[4x4]]}, ...],
     "light_intensity": [r, g, b],                       (optional)
     "bounding_sphere": {"center": [x, y, z], "radius": r} (optional)}

``transform_matrix`` is camera-to-world, row-major, with the camera looking
along -z and +y up. Internally cameras look along +z with +y down, so the
axes are flipped on load and save.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .meshing import TriangleMesh, uv_sphere
from .scene import CameraView

FLIP_YZ = np.diag([1.0, -1.0, -1.0])


class DatasetError(Exception):
    pass


@dataclass
class Dataset:
    train: List[CameraView]
    test: List[CameraView] = field(default_factory=list)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def __post_init__(self):
        if not self.train:
            raise DatasetError("dataset needs at least one training view")
        sizes = {(v.width, v.height) for v in self.train + self.test}
        if len(sizes) != 1:
            raise DatasetError(f"views have different image sizes: {sorted(sizes)}")
        if self.radius <= 0:
            raise DatasetError("bounding radius must be positive")
        self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def views(self) -> List[CameraView]:
        return self.train + self.test


# --------------------------------------------------------------------------
# manifest I/O
# --------------------------------------------------------------------------


def pose_to_view(transform_matrix, fov_x: float, width: int, height: int, **kw) -> CameraView:
    M = np.asarray(transform_matrix, dtype=np.float64)
    if M.shape != (4, 4):
        raise DatasetError("transform_matrix must be 4x4")
    if abs(np.linalg.det(M[:3, :3])) < 1e-9:
        raise DatasetError("camera pose is not invertible")
    fx = width / (2.0 * math.tan(fov_x / 2.0))
    K = np.array([[fx, 0.0, width / 2.0], [0.0, fx, height / 2.0], [0.0, 0.0, 1.0]])
    R = M[:3, :3] @ FLIP_YZ
    return CameraView(K, R, M[:3, 3], width, height, **kw)


def view_to_pose(view: CameraView) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = view.rotation @ FLIP_YZ
    M[:3, 3] = view.translation
    return M


def load_image(path: Path) -> np.ndarray:
    """8-bit RGB(A) image composited onto black, as float64 in [0, 1]."""
    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return rgba[..., :3] * rgba[..., 3:4]


def save_image(path: Path, rgb: np.ndarray, alpha: Optional[np.ndarray] = None) -> None:
    rgb8 = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    a = np.full(rgb.shape[:2], 255, np.uint8) if alpha is None else np.round(np.clip(alpha, 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.dstack([rgb8, a]), "RGBA").save(path)


def _load_split(root: Path, manifest: Path) -> Tuple[List[CameraView], dict]:
    meta = json.loads(manifest.read_text())
    fov = float(meta["camera_angle_x"])
    light = meta.get("light_intensity", [1.0, 1.0, 1.0])
    views = []
    for i, fr in enumerate(meta["frames"]):
        path = root / fr["file_path"]
        if not path.suffix:
            path = path.with_suffix(".png")
        if not path.exists():
            raise DatasetError(f"missing image file: {path}")
        img = load_image(path)
        h, w = img.shape[:2]
        views.append(pose_to_view(fr["transform_matrix"], fov, w, h, ground_truth=img, light_intensity=light,
                                  name=fr["file_path"]))
    return views, meta


def load_dataset(path) -> Dataset:
    root = Path(path)
    splits = {}
    for name in ("train", "test"):
        m = root / f"transforms_{name}.json"
        if m.exists():
            splits[name] = _load_split(root, m)
    if not splits and (root / "transforms.json").exists():
        splits["train"] = _load_split(root, root / "transforms.json")
    if "train" not in splits:
        raise DatasetError(f"no camera manifest found in {root}")
    meta = splits["train"][1]
    bs = meta.get("bounding_sphere")
    views = splits["train"][0] + splits.get("test", ([], None))[0]
    if bs is not None:
        center, radius = np.asarray(bs["center"], dtype=np.float64), float(bs["radius"])
    else:
        center, radius = _visible_sphere(views)
    return Dataset(splits["train"][0], splits.get("test", ([], None))[0], center, radius)


def _visible_sphere(views: Sequence[CameraView]) -> Tuple[np.ndarray, float]:
    """Least-squares point closest to all optical axes, radius from the field of view."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for v in views:
        d = v.rotation[:, 2]
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ v.translation
    center = np.linalg.lstsq(A, b, rcond=None)[0]
    dist = np.mean([np.linalg.norm(v.translation - center) for v in views])
    v0 = views[0]
    half = math.atan(v0.width / (2 * v0.intrinsics[0, 0]))
    return center, float(dist * math.sin(half))


def save_manifest(root: Path, split: str, views: Sequence[CameraView], extra: Optional[dict] = None) -> None:
    v0 = views[0]
    meta = {"camera_angle_x": 2.0 * math.atan(v0.width / (2.0 * v0.intrinsics[0, 0])), "frames": []}
    meta.update(extra or {})
    for v in views:
        meta["frames"].append({"file_path": v.name, "transform_matrix": view_to_pose(v).tolist()})
    (Path(root) / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# --------------------------------------------------------------------------
# analytic scenes
# --------------------------------------------------------------------------


@dataclass
class AnalyticScene:
    shape: str = "sphere"  # sphere | box | superellipsoid
    center: Sequence[float] = (0.0, 0.0, 0.0)
    size: Sequence[float] = (1.0, 1.0, 1.0)  # radius (sphere uses size[0]) or half extents
    rotation: Optional[np.ndarray] = None  # object-to-world
    exponent: float = 0.5  # superellipsoid shape exponent
    base_color: Sequence[float] = (0.8, 0.7, 0.6)
    roughness: float = 0.4
    f0: float = 0.04
    gamma: float = 0.3
    albedo: Sequence[float] = (0.9, 0.55, 0.35)
    sigma_t: float = 0.6
    light_intensity: Sequence[float] = (12.0, 12.0, 12.0)

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "superellipsoid"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.sigma_t <= 0:
            raise ValueError("sigma_t must be positive")
        if not 0 <= self.roughness <= 1 or not 0 <= self.f0 <= 1:
            raise ValueError("roughness and f0 must lie in [0, 1]")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()
        self.rotation = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)

    @property
    def bounding_radius(self) -> float:
        if self.shape == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(self.size))


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def _intersect_sphere(o, d, c, r):
    oc = o - c
    a = (d * d).sum(-1)
    b = 2.0 * (oc * d).sum(-1)
    cc = (oc * oc).sum() - r * r
    disc = b * b - 4 * a * cc
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    hit &= t0 > 0
    p = o + t0[..., None] * d
    n = (p - c) / r
    return hit, t0, t1, n


def _intersect_box(o, d, c, half, Rb):
    ol = (o - c) @ Rb
    dl = d @ Rb
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        ta = (-half - ol) * inv
        tb = (half - ol) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t0 = tmin.max(-1)
    t1 = tmax.min(-1)
    hit = (t1 > t0) & (t0 > 0)
    axis = tmin.argmax(-1)
    n_local = np.zeros(d.shape)
    sgn = -np.sign(np.take_along_axis(dl, axis[..., None], -1)[..., 0])
    np.put_along_axis(n_local, axis[..., None], sgn[..., None], -1)
    return hit, t0, t1, n_local @ Rb.T


def _superellipsoid_f(pl, half, e):
    q = np.abs(pl / half) ** (2.0 / e)
    return q.sum(-1) - 1.0


def _intersect_superellipsoid(o, d, c, half, Rb, e, steps=256):
    """Ray marching + bisection for the implicit |x/a|^(2/e) + ... = 1 surface."""
    ol = (o - c) @ Rb
    dl = d @ Rb
    bound = float(np.linalg.norm(half)) * 1.01
    hit_s, tb0, tb1, _ = _intersect_sphere(ol, dl, np.zeros(3), bound)
    shape = d.shape[:-1]
    t_in = np.full(shape, np.nan)
    t_out = np.full(shape, np.nan)
    ts = np.linspace(0.0, 1.0, steps)
    span = np.where(hit_s, tb1 - tb0, 0.0)
    samples = tb0[..., None] + span[..., None] * ts
    f = _superellipsoid_f(ol + samples[..., None] * dl[..., None, :], half, e)
    inside = f < 0
    any_in = inside.any(-1) & hit_s
    first = np.argmax(inside, -1)
    last = steps - 1 - np.argmax(inside[..., ::-1], -1)

    def refine(lo, hi, entering):
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = _superellipsoid_f(ol + mid[..., None] * dl, half, e)
            go_hi = (fm < 0) if entering else (fm >= 0)
            hi = np.where(go_hi, mid, hi)
            lo = np.where(go_hi, lo, mid)
        return 0.5 * (lo + hi)

    fi = np.clip(first, 1, steps - 1)
    li = np.clip(last, 0, steps - 2)
    lo_in = np.take_along_axis(samples, (fi - 1)[..., None], -1)[..., 0]
    hi_in = np.take_along_axis(samples, fi[..., None], -1)[..., 0]
    lo_out = np.take_along_axis(samples, li[..., None], -1)[..., 0]
    hi_out = np.take_along_axis(samples, (li + 1)[..., None], -1)[..., 0]
    t_in = refine(lo_in, hi_in, True)
    t_out = refine(lo_out, hi_out, False)
    hit = any_in & (t_in > 0)
    pl = ol + t_in[..., None] * dl
    # gradient of the implicit function
    g = (2.0 / e) * np.sign(pl) * np.abs(pl / half) ** (2.0 / e - 1.0) / half
    n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-30)
    return hit, t_in, t_out, n @ Rb.T


def analytic_gbuffer(scene: AnalyticScene, view: CameraView) -> Dict[str, np.ndarray]:
    """Per-pixel hit mask, camera z-depth, camera-space normal and interior chord length."""
    rays_cam = view.pixel_rays()  # z component is 1, so the ray parameter is camera z
    d = rays_cam @ view.rotation.T
    o = view.translation
    if scene.shape == "sphere":
        hit, t0, t1, n = _intersect_sphere(o, d, scene.center, scene.size[0])
    elif scene.shape == "box":
        hit, t0, t1, n = _intersect_box(o, d, scene.center, scene.size, scene.rotation)
    else:
        hit, t0, t1, n = _intersect_superellipsoid(o, d, scene.center, scene.size, scene.rotation, scene.exponent)
    dl = np.linalg.norm(d, axis=-1)
    chord = np.where(hit, (t1 - t0) * dl, 0.0)
    n_cam = n @ view.rotation
    return {
        "mask": hit,
        "depth": np.where(hit, t0, 0.0),
        "normal": np.where(hit[..., None], n_cam, 0.0),
        "chord": chord,
        "scatter": np.where(hit[..., None], np.asarray(scene.albedo) * np.exp(-scene.sigma_t * chord)[..., None], 0.0),
    }


def shade_analytic(scene: AnalyticScene, gb: Dict[str, np.ndarray], view: CameraView) -> np.ndarray:
    """Closed-form color: specular + gamma * diffuse + (1 - F) * albedo * exp(-sigma_t * chord)."""
    rays = view.pixel_rays()
    v = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    hit = gb["mask"]
    cos = np.where(hit, (gb["normal"] * v).sum(-1), 0.0)
    front = hit & (cos > 0)
    c = np.where(front, cos, 1.0)
    F = scene.f0 + (1 - scene.f0) * (1 - np.where(front, cos, 0.0)) ** 5
    a2 = scene.roughness**4
    ndf = a2 / (np.pi * (c * c * (a2 - 1) + 1) ** 2)
    k = (scene.roughness + 1) ** 2 / 8
    geo = (c / (c * (1 - k) + k)) ** 2
    L = np.asarray(scene.light_intensity, dtype=np.float64)
    phi = np.where(hit, gb["depth"] ** 2, 1.0)
    spec = np.where(front, F * ndf * geo / (4 * c * c) / phi, 0.0)[..., None] * L
    diff = np.asarray(scene.base_color) / np.pi * (F * F / phi)[..., None] * L
    color = spec + scene.gamma * diff + (1 - F)[..., None] * gb["scatter"]
    return np.where(hit[..., None], color, 0.0)


def ground_truth_mesh(scene: AnalyticScene, resolution: int = 96) -> TriangleMesh:
    if scene.shape == "sphere":
        return uv_sphere(scene.size[0], scene.center, resolution, 2 * resolution)
    # parametric (super)ellipsoid/box surface on a cube-sphere grid, projected radially
    n = resolution
    g = np.linspace(-1, 1, n + 1)
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, w = np.meshgrid(g, g, indexing="ij")
            p = np.zeros(u.shape + (3,))
            p[..., axis] = sign
            p[..., (axis + 1) % 3] = u
            p[..., (axis + 2) % 3] = w
            base = sum(len(v) for v in verts)
            verts.append(p.reshape(-1, 3))
            idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1) + base
            a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]
            f = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
            if sign < 0:
                f = f[:, ::-1]
            faces.append(f)
    V = np.concatenate(verts)
    F = np.concatenate(faces)
    # merge the duplicated cube-edge vertices
    V, inv = np.unique(np.round(V, 12), axis=0, return_inverse=True)
    F = inv.reshape(-1)[F]
    if scene.shape == "box":
        P = V * scene.size
    else:
        dirs = V / np.linalg.norm(V, axis=1, keepdims=True)
        q = (np.abs(dirs / scene.size) ** (2.0 / scene.exponent)).sum(1)
        P = dirs * q[:, None] ** (-scene.exponent / 2.0)
    return TriangleMesh(P @ scene.rotation.T + scene.center, F)


def synthetic_cameras(scene: AnalyticScene, n_views: int, resolution: int, fov_deg: float = 40.0,
                      distance: Optional[float] = None) -> List[CameraView]:
    rb = scene.bounding_radius
    if distance is None:
        distance = 1.3 * rb / math.sin(math.radians(fov_deg) / 2.0)
    fx = resolution / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    views = []
    for i, dirn in enumerate(fibonacci_sphere(n_views)):
        eye = scene.center + distance * dirn
        views.append(CameraView.look_at(eye, scene.center, up=(0.0, 0.0, 1.0), fx=fx, width=resolution,
                                        height=resolution, light_intensity=scene.light_intensity,
                                        name=f"r_{i:03d}.png"))
    return views


def generate_synthetic(scene: AnalyticScene, n_views: int, resolution: int, seed: int = 0,
                       test_every: int = 8, fov_deg: float = 40.0):
    """Ray-trace ``n_views`` images; returns (Dataset, ground-truth mesh, analytic G-buffers by view name).

    Every ``test_every``-th view (offset ``seed % test_every``) goes to the test split.
    """
    if n_views < 1:
        raise ValueError("n_views must be at least 1")
    views = synthetic_cameras(scene, n_views, resolution, fov_deg)
    train, test, gbuffers = [], [], {}
    offset = seed % test_every if test_every else 0
    for i, v in enumerate(views):
        gb = analytic_gbuffer(scene, v)
        img = shade_analytic(scene, gb, v)
        split = "test" if test_every and n_views > 1 and i % test_every == offset else "train"
        gbuffers[f"{split}/r_{i:03d}.png"] = gb
        v = v.with_ground_truth(img)
        object.__setattr__(v, "name", f"{split}/r_{i:03d}.png")
        (test if split == "test" else train).append(v)
    ds = Dataset(train, test, scene.center.copy(), 1.3 * scene.bounding_radius)
    return ds, ground_truth_mesh(scene), gbuffers


def save_dataset(ds: Dataset, root, masks: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write images and manifests; ``masks`` maps view names to coverage masks for the alpha channel."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    extra = {
        "light_intensity": [float(x) for x in ds.train[0].light_intensity],
        "bounding_sphere": {"center": [float(x) for x in ds.center], "radius": float(ds.radius)},
    }
    for split, views in (("train", ds.train), ("test", ds.test)):
        if not views:
            continue
        for v in views:
            alpha = None if masks is None else masks[v.name].astype(np.float64)
            save_image(root / v.name, v.ground_truth, alpha)
        save_manifest(root, split, views, extra)


# --------------------------------------------------------------------------
# PLY / OBJ
# --------------------------------------------------------------------------


def _ply_header(n: int, props: Sequence[str], comments: Sequence[str] = (), faces: int = 0,
                ptype: str = "double") -> bytes:
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {n}")
    lines += [f"property {ptype} {p}" for p in props]
    if faces:
        lines += [f"element face {faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def read_ply_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    comments, props, counts, ptypes = [], {}, {}, {}
    current = None
    for line in header:
        parts = line.split()
        if parts[0] == "comment":
            comments.append(line[len("comment "):])
        elif parts[0] == "element":
            current = parts[1]
            counts[current] = int(parts[2])
            props[current] = []
        elif parts[0] == "property" and parts[1] != "list":
            props[current].append(parts[2])
            ptypes[current] = parts[1]
    return comments, props, counts, ptypes, end + len(b"end_header\n")


def write_mesh_ply(mesh: TriangleMesh, path) -> None:
    head = _ply_header(len(mesh.vertices), ["x", "y", "z"], faces=len(mesh.faces))
    verts = np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes()
    f = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    f["n"] = 3
    f["i"] = mesh.faces
    Path(path).write_bytes(head + verts + f.tobytes())


def read_mesh_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    _, props, counts, _, off = read_ply_header(data)
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    nprop = len(props["vertex"])
    vsize = nv * nprop * 8
    v = np.frombuffer(data, "<f8", count=nv * nprop, offset=off).reshape(nv, nprop)[:, :3]
    f = np.frombuffer(data, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=nf, offset=off + vsize)
    return TriangleMesh(v.copy(), f["i"].astype(np.int64))


def write_mesh_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_mesh_ply(path)
    verts, faces = [], []
    for line in path.read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(x.split("/")[0]) - 1 for x in line.split()[1:4]])
    return TriangleMesh(np.array(verts), np.array(faces))
