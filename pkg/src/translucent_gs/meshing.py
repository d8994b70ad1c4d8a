"""TSDF fusion, marching-cubes extraction and reconstruction/image metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numba
import numpy as np
from numba import prange
from scipy.spatial import cKDTree
from skimage import measure

from .scene import CameraView


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_use_counts(self) -> np.ndarray:
        """How many faces use each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_use_counts() == 2))


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]
    truncation: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def around(cls, lo, hi, resolution: int = 256, truncation_voxels: float = 5.0) -> "TsdfVolume":
        """Volume spanning the box [lo, hi] with voxel size = diagonal / resolution."""
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        vs = float(np.linalg.norm(hi - lo)) / resolution
        dims = np.maximum(np.ceil((hi - lo) / vs).astype(int) + 1, 2)
        return cls(lo, vs, tuple(dims), truncation_voxels * vs)

    def voxel_centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), -1)
        return self.origin + idx * self.voxel_size


@numba.njit(parallel=True, cache=True)
def _integrate(tsdf, weight, origin, vs, trunc, R, T, K, depth, mask):
    nx, ny, nz = tsdf.shape
    H, W = depth.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                wx = origin[0] + i * vs - T[0]
                wy = origin[1] + j * vs - T[1]
                wz = origin[2] + k * vs - T[2]
                # camera coords = R^T (p - T)
                cx = R[0, 0] * wx + R[1, 0] * wy + R[2, 0] * wz
                cy = R[0, 1] * wx + R[1, 1] * wy + R[2, 1] * wz
                cz = R[0, 2] * wx + R[1, 2] * wy + R[2, 2] * wz
                if cz <= 1e-6:
                    continue
                u = (K[0, 0] * cx + K[0, 1] * cy) / cz + K[0, 2]
                v = K[1, 1] * cy / cz + K[1, 2]
                pu = int(np.floor(u + 0.5))
                pv = int(np.floor(v + 0.5))
                if pu < 0 or pu >= W or pv < 0 or pv >= H or not mask[pv, pu]:
                    continue
                sdf = depth[pv, pu] - cz
                if sdf <= -trunc:
                    continue
                val = min(1.0, sdf / trunc)
                w0 = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w0 + val) / (w0 + 1.0)
                weight[i, j, k] = w0 + 1.0


def tsdf_integrate(volume: TsdfVolume, depth: np.ndarray, view: CameraView, mask: Optional[np.ndarray] = None):
    """Fuse one depth map (camera z, same convention as the renderer) into ``volume`` in place."""
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    mask = np.ascontiguousarray(depth > 0 if mask is None else mask, dtype=np.bool_)
    _integrate(volume.tsdf, volume.weight, volume.origin, float(volume.voxel_size), float(volume.truncation),
               np.ascontiguousarray(view.rotation), np.ascontiguousarray(view.translation),
               np.ascontiguousarray(view.intrinsics), depth, mask)
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero level set of the fused TSDF; cubes need weight > 0 on all 8 corners."""
    w = volume.weight > 0
    cube = w.copy()
    cube[:-1] &= w[1:]
    cube[:, :-1] &= cube[:, 1:].copy()
    cube[:, :, :-1] &= cube[:, :, 1:].copy()
    cube[-1], cube[:, -1], cube[:, :, -1] = False, False, False
    # skimage tests the mask at the cube's far corner
    far = np.zeros_like(cube)
    far[1:, 1:, 1:] = cube[:-1, :-1, :-1]
    vol = np.where(w, volume.tsdf, 1.0)
    if not cube.any() or vol[w].min() > 0 or vol[w].max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    try:
        verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(volume.voxel_size,) * 3,
                                                    mask=far, allow_degenerate=False)
    except (RuntimeError, ValueError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    mesh = TriangleMesh(verts + volume.origin, faces)
    keep = mesh.face_areas() > 0
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform point samples on ``mesh``."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    v = mesh.vertices[mesh.faces[face]]
    return (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """(mean NN distance a->b + mean NN distance b->a) / 2."""
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def chamfer_distance(mesh_a: TriangleMesh, mesh_b: TriangleMesh, samples: int = 100_000, seed: int = 0) -> float:
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("Chamfer distance needs two non-empty meshes")
    return chamfer_points(sample_surface(mesh_a, samples, seed), sample_surface(mesh_b, samples, seed))


def psnr(render: np.ndarray, ground_truth: np.ndarray) -> float:
    render, ground_truth = np.asarray(render, np.float64), np.asarray(ground_truth, np.float64)
    if render.shape != ground_truth.shape:
        raise ValueError(f"image shapes differ: {render.shape} vs {ground_truth.shape}")
    mse = float(np.mean((render - ground_truth) ** 2))
    return 100.0 if mse < 1e-10 else 10.0 * np.log10(1.0 / mse)


def image_metrics(render, ground_truth) -> Tuple[float, float]:
    import torch

    from .losses import ssim

    r = np.asarray(render, np.float64)
    g = np.asarray(ground_truth, np.float64)
    p = psnr(r, g)
    s = float(ssim(torch.from_numpy(r), torch.from_numpy(g)))
    return p, s


def uv_sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), n_lat: int = 64, n_lon: int = 128) -> TriangleMesh:
    """Closed latitude/longitude sphere mesh."""
    center = np.asarray(center, dtype=np.float64)
    verts = [center + [0, 0, radius]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append(center + radius * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)]))
    verts.append(center + [0, 0, -radius])
    faces = []
    bottom = len(verts) - 1
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)
    for j in range(n_lon):
        faces.append([0, ring(1, j), ring(1, j + 1)])
        faces.append([bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, c, d], [a, d, b]]
    return TriangleMesh(np.array(verts), np.array(faces))


def fuse_scene(scene, views, center, radius: float, resolution: int = 256, settings=None) -> TriangleMesh:
    """Render unbiased depth for every view, fuse into a TSDF over the bounding box, and extract."""
    import torch

    from .geometry import GeometryMaps
    from .splat import RenderSettings, render

    settings = settings or RenderSettings()
    center = np.asarray(center, dtype=np.float64)
    vol = TsdfVolume.around(center - radius, center + radius, resolution)
    with torch.no_grad():
        for v in views:
            g = render(scene, v, settings=settings, combined=False, interior=False)
            maps = GeometryMaps.from_gbuffer(g, v)
            tsdf_integrate(vol, maps.depth.double().numpy(), v, maps.mask.numpy())
    return extract_mesh(vol)
