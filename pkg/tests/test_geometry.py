import math

import numpy as np
import pytest
import torch

from oracles import ray_plane_depth
from translucent_gs.geometry import (
    GeometryMaps,
    backproject,
    depth_to_normal,
    render_geometry,
    render_normal_map,
    render_plane_distance,
    unbiased_depth,
)
from translucent_gs.scene import CameraView, GaussianKernel, GaussianScene
from translucent_gs.splat import RenderSettings

EXACT = RenderSettings(alpha_max=1.0)


def axis_view(size=16, fx=20.0):
    K = np.array([[fx, 0, size / 2.0], [0, fx, size / 2.0], [0, 0, 1]])
    return CameraView(K, np.eye(3), np.zeros(3), size, size)


def plane_kernel(center, rotation=(1.0, 0.0, 0.0, 0.0), opacity=1.0, extent=50.0):
    return GaussianKernel.with_color(center, [1, 1, 1], rotation=np.asarray(rotation, dtype=np.float64),
                                     scale=np.array([extent, extent, 1e-6]), opacity=opacity,
                                     base_color=np.full(3, 0.5), roughness=0.5)


def test_face_on_kernel_normal_and_plane_distance():
    v = axis_view()
    scene = GaussianScene.from_kernels([plane_kernel([0, 0, 2.0])])
    n, valid = render_normal_map(scene, v, EXACT)
    assert valid[8, 8]
    assert np.allclose(n[8, 8].numpy(), [0, 0, -1], atol=1e-12)
    d, _ = render_plane_distance(scene, v, EXACT)
    assert float(d[8, 8]) == pytest.approx(2.0, abs=1e-12)


def test_blended_normals_of_two_kernels():
    v = axis_view()
    h = math.sqrt(0.5)
    k1 = plane_kernel([0, 0, 2.0], opacity=0.5)
    k2 = plane_kernel([0, 0, 3.0], rotation=(math.cos(0.3), math.sin(0.3), 0, 0))
    scene = GaussianScene.from_kernels([k1, k2])
    n, _ = render_normal_map(scene, v, EXACT)
    # kernel normals in camera space (identity extrinsics), flipped toward the camera
    n1 = np.array([0, 0, -1.0])
    n2 = np.array([0, -math.sin(0.6), math.cos(0.6)])
    n2 = n2 if n2 @ (-np.array([0, 0, 3.0])) > 0 else -n2
    assert np.allclose(n[8, 8].numpy(), 0.5 * n1 + 0.5 * n2, atol=1e-9)


def test_empty_pixel_is_invalid():
    v = axis_view()
    tiny = GaussianKernel.with_color([0, 0, 2.0], [1, 1, 1], scale=np.full(3, 0.005), opacity=1.0,
                                     base_color=np.full(3, 0.5), roughness=0.5)
    g = render_geometry(GaussianScene.from_kernels([tiny]), v, EXACT)
    assert not g.mask[0, 0] and float(g.depth[0, 0]) == 0
    assert torch.all(g.normal[0, 0] == 0) and float(g.plane_distance[0, 0]) == 0


def test_fronto_parallel_depth_is_constant():
    v = axis_view()
    g = render_geometry(GaussianScene.from_kernels([plane_kernel([0.1, -0.2, 2.0])]), v, EXACT)
    assert g.mask.all()
    assert torch.allclose(g.depth, torch.full_like(g.depth, 2.0), atol=1e-12)


def test_tilted_plane_depth_matches_ray_plane_intersection():
    rng = np.random.default_rng(5)
    for _ in range(10):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(0, math.radians(50))
        q = np.concatenate([[math.cos(ang / 2)], math.sin(ang / 2) * axis])
        center = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.5, 3.0)])
        v = axis_view()
        g = render_geometry(GaussianScene.from_kernels([plane_kernel(center, q)]), v, EXACT)
        from translucent_gs.scene import quat_to_rotmat

        normal = quat_to_rotmat(torch.tensor(q))[:, 2].numpy()
        rays = v.pixel_rays()
        for py in range(v.height):
            for px in range(v.width):
                if g.mask[py, px]:
                    ref = ray_plane_depth(rays[py, px], center, normal)
                    assert abs(float(g.depth[py, px]) - ref) < 1e-6


def test_grazing_pixels_are_masked():
    maps = GeometryMaps(torch.tensor([[[1.0, 0.0, 0.0]]]), torch.tensor([[1.0]]), alpha=torch.tensor([[1.0]]))
    v = CameraView(np.array([[1.0, 0, 0.0], [0, 1.0, 0.0], [0, 0, 1]]), np.eye(3), np.zeros(3), 1, 1)
    depth, mask = unbiased_depth(maps, v)
    assert not mask[0, 0] and float(depth[0, 0]) == 0


def plane_depth_map(v, point, normal):
    rays = v.pixel_rays()
    t = (point @ normal) / (rays @ normal)
    return torch.tensor(t * rays[..., 2])


def test_depth_to_normal_fronto_parallel():
    v = axis_view()
    n, valid = depth_to_normal(torch.full((16, 16), 2.0), v)
    assert valid[:-1, :-1].all() and not valid[-1].any() and not valid[:, -1].any()
    assert torch.allclose(n[:-1, :-1], torch.tensor([0.0, 0.0, -1.0]).expand(15, 15, 3), atol=1e-12)


def test_depth_to_normal_recovers_plane_normal():
    rng = np.random.default_rng(9)
    v = axis_view()
    for _ in range(5):
        m = rng.normal(size=3)
        m[2] = -abs(m[2]) - 1.0
        m /= np.linalg.norm(m)
        d = plane_depth_map(v, np.array([0.0, 0.0, 3.0]), m)
        n, valid = depth_to_normal(d, v, d > 0)
        assert valid.sum() > 100
        assert np.allclose(n[valid].numpy(), m, atol=1e-6)


def test_backprojection_inverts_projection():
    v = axis_view()
    d = torch.full((16, 16), 2.5)
    P = backproject(d, v).numpy()
    uv = P @ v.intrinsics.T
    uv = uv[..., :2] / uv[..., 2:]
    u, w = np.meshgrid(np.arange(16), np.arange(16))
    assert np.allclose(uv[..., 0], u) and np.allclose(uv[..., 1], w)
