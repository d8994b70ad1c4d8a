import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import composite_ray, numeric_jacobian, pinhole
from translucent_gs.raster import rasterize
from translucent_gs.scene import CameraView, GaussianKernel, GaussianScene, covariance_from_rotation_scale
from translucent_gs.splat import (
    LOWPASS,
    RenderSettings,
    backward,
    fresnel_schlick,
    fresnel_weights,
    pixel_alpha,
    project,
    project_gaussian,
    render,
    render_attribute_map,
    render_combined,
    render_scatter_map,
)

from conftest import random_scene, small_view

EXACT = RenderSettings(alpha_max=1.0)


def axis_view(size=8, fx=20.0):
    # camera at the origin looking along +z, identity extrinsics
    K = np.array([[fx, 0, size / 2.0], [0, fx, size / 2.0], [0, 0, 1]])
    return CameraView(K, np.eye(3), np.zeros(3), size, size)


def test_projection_of_axis_point_is_principal_point():
    v = axis_view()
    k = GaussianKernel(position=np.array([0.0, 0.0, 3.0]), scale=np.full(3, 0.1))
    p = project_gaussian(k, v)
    assert np.allclose(p.mean2d, [v.intrinsics[0, 2], v.intrinsics[1, 2]])
    assert p.view_depth == 3.0


def test_isotropic_covariance_scales_with_focal_over_depth():
    v = axis_view(fx=30.0)
    sigma, z = 0.05, 2.0
    k = GaussianKernel(position=np.array([0.0, 0.0, z]), scale=np.full(3, sigma))
    p = project_gaussian(k, v)
    expected = (30.0 * sigma / z) ** 2
    assert np.allclose(p.cov2d - LOWPASS * np.eye(2), expected * np.eye(2), rtol=1e-12)


def test_kernel_behind_camera_is_culled():
    v = axis_view()
    assert project_gaussian(GaussianKernel(position=np.array([0.0, 0.0, -1.0])), v) is None


def test_projected_covariance_matches_numeric_jacobian(rng):
    v = CameraView.look_at([0.4, -0.3, -3.0], [0, 0, 0], fx=40.0, width=32, height=32)
    for _ in range(10):
        mu = rng.uniform(-0.5, 0.5, 3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.05, 0.3, 3)
        proj = project(torch.tensor(mu)[None], torch.tensor(q)[None], torch.tensor(s)[None], v)
        f = lambda x: pinhole(v.rotation.T @ (x - v.translation), v.intrinsics)
        J = numeric_jacobian(f, mu)  # d(pixel)/d(world), includes the rotation
        cov = covariance_from_rotation_scale(torch.tensor(q), torch.tensor(s)).numpy()
        expected = J @ cov @ J.T + LOWPASS * np.eye(2)
        assert np.allclose(proj["cov2d"][0].numpy(), expected, rtol=1e-6, atol=1e-9)
        assert np.allclose(proj["means2d"][0].numpy(), f(mu))


def test_pixel_alpha_examples():
    v = axis_view()
    k = GaussianKernel(position=np.array([0.0, 0.0, 3.0]), scale=np.full(3, 0.1))
    p = project_gaussian(k, v)
    assert pixel_alpha(p, p.mean2d, 0.8) == pytest.approx(0.8)
    sd = math.sqrt(p.cov2d[0, 0])
    assert pixel_alpha(p, p.mean2d + [sd, 0.0], 0.8) == pytest.approx(0.8 * math.exp(-0.5))
    assert pixel_alpha(p, p.mean2d + [10 * sd, 0.0], 0.8) < 1e-8


def test_fresnel_schlick_values():
    assert float(fresnel_schlick(torch.tensor(1.0), 0.04)) == 0.04
    assert float(fresnel_schlick(torch.tensor(0.0), 0.04)) == 1.0
    assert float(fresnel_schlick(torch.tensor(0.5), 0.04)) == pytest.approx(0.07, abs=1e-15)


def face_on_pair(c, s):
    flat = np.array([0.3, 0.3, 1e-3])
    surf = GaussianKernel.with_color([0.0, 0.0, 2.0], c, scale=flat, opacity=1.0,
                                     base_color=np.array([0.5, 0.5, 0.5]), roughness=0.5)
    inte = GaussianKernel.with_color([0.0, 0.0, 2.5], s, scale=np.full(3, 0.3), opacity=1.0)
    return surf, inte


def test_empty_scene_renders_background():
    scene = GaussianScene.from_kernels()
    img = render_combined(scene, axis_view(), background=(0.1, 0.2, 0.3))
    assert torch.allclose(img, torch.tensor([0.1, 0.2, 0.3]).expand(8, 8, 3))


def test_face_on_surface_kernel_gives_f0_times_color():
    c = np.array([0.9, 0.5, 0.2])
    surf, _ = face_on_pair(c, c)
    v = axis_view()
    img = render_combined(GaussianScene.from_kernels([surf]), v, settings=EXACT)
    assert np.allclose(img[4, 4].numpy(), 0.04 * c, atol=1e-12, rtol=0)


def test_face_on_surface_plus_interior():
    c, s = np.array([0.9, 0.5, 0.2]), np.array([0.1, 0.7, 0.3])
    surf, inte = face_on_pair(c, s)
    img = render_combined(GaussianScene.from_kernels([surf], [inte]), axis_view(), settings=EXACT)
    assert np.allclose(img[4, 4].numpy(), 0.04 * c + 0.96 * s, atol=1e-12, rtol=0)


def _oracle_check(scene, view, settings, which):
    g = render(scene, view, settings=settings)
    pops = scene.populations()
    parts = []
    for name in (["surface", "interior"] if which == "combined" else [which]):
        act = pops[name].activated()
        proj = project(act["means"], act["quats"], act["scales"], view)
        parts.append((name, act, proj))
    return g, parts


def test_combined_render_matches_per_ray_oracle():
    from translucent_gs.scene import sh_evaluate
    from translucent_gs.splat import view_directions

    for seed in range(5):
        scene = random_scene(seed, 3, 2)
        v = small_view()
        g = render(scene, v)
        m2, con, op, w, f, d, val = [], [], [], [], [], [], []
        for name, pop in scene.populations().items():
            act = pop.activated()
            proj = project(act["means"], act["quats"], act["scales"], v)
            m2.append(proj["means2d"]); con.append(proj["conics"]); op.append(act["opacities"])
            d.append(proj["depths"]); val.append(proj["valid"])
            f.append(sh_evaluate(act["sh"], view_directions(act["means"], v)))
            if name == "surface":
                w.append(fresnel_weights(act["means"], act["quats"], act["scales"], v))
            else:
                w.append(torch.ones(len(pop)))
        arrs = [torch.cat(x).detach().numpy() for x in (m2, con, op, w, f, d, val)]
        for py in range(v.height):
            for px in range(v.width):
                col, _, _ = composite_ray((px, py), *arrs, background=np.zeros(3))
                assert np.allclose(g.color[py, px].detach().numpy(), col, atol=1e-12, rtol=0)


ray_scene = st.integers(0, 10_000)


@settings(max_examples=100, deadline=None)
@given(ray_scene)
def test_compositing_conservation_random_rays(seed):
    rng = np.random.default_rng(seed)
    n = 5
    means2d = torch.tensor(rng.uniform(0, 4, (n, 2)))
    A = rng.normal(size=(n, 2, 2))
    cov = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(2)
    inv = np.linalg.inv(cov)
    conics = torch.tensor(np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]], 1))
    op = torch.tensor(rng.uniform(0.1, 1.0, n))
    feats = torch.tensor(rng.uniform(0, 1, (n, 3)))
    depths = torch.tensor(rng.uniform(1, 5, n))
    valid = torch.ones(n, dtype=torch.bool)
    px = tuple(rng.integers(0, 4, 2))
    for weights in (torch.tensor(rng.uniform(0.04, 1.0, n)), torch.ones(n)):
        ones = torch.ones(n, 1)
        cover, alpha = rasterize(means2d, conics, op, weights, ones, 0.0, depths, valid, 4, 4)
        T = 1 - alpha[px[1], px[0]].item()
        assert abs(cover[px[1], px[0], 0].item() + T - 1.0) < 1e-12
        col, wts, T_o = composite_ray(px, means2d.numpy(), conics.numpy(), op.numpy(), weights.numpy(),
                                      feats.numpy(), depths.numpy(), valid.numpy())
        assert abs(wts.sum() + T_o - 1.0) < 1e-12
        img, _ = rasterize(means2d, conics, op, weights, feats, 0.0, depths, valid, 4, 4)
        assert np.allclose(img[px[1], px[0]].numpy(), col, atol=1e-12, rtol=0)


def test_attribute_maps_single_and_stacked():
    v = axis_view()
    flat = np.array([0.5, 0.5, 1e-3])
    b1, b2 = np.array([0.9, 0.1, 0.1]), np.array([0.1, 0.1, 0.9])
    k1 = GaussianKernel.with_color([0, 0, 2.0], [1, 1, 1], scale=flat, opacity=1.0, base_color=b1, roughness=0.2)
    img, alpha = render_attribute_map(GaussianScene.from_kernels([k1]), v, "base_color", EXACT)
    assert np.allclose(img[4, 4].numpy(), b1, atol=1e-12)
    front = GaussianKernel.with_color([0, 0, 2.0], [1, 1, 1], scale=flat, opacity=0.5, base_color=b1, roughness=0.2)
    back = GaussianKernel.with_color([0, 0, 3.0], [1, 1, 1], scale=flat, opacity=1.0, base_color=b2, roughness=0.8)
    img, _ = render_attribute_map(GaussianScene.from_kernels([front, back]), v, "base_color", EXACT)
    assert np.allclose(img[4, 4].numpy(), 0.5 * b1 + 0.5 * b2, atol=1e-12)
    rough, _ = render_attribute_map(GaussianScene.from_kernels([front, back]), v, "roughness", EXACT)
    assert float(rough[4, 4]) == pytest.approx(0.5 * 0.2 + 0.5 * 0.8, abs=1e-12)
    tiny = GaussianKernel.with_color([0, 0, 2.0], [1, 1, 1], scale=np.full(3, 0.01), opacity=1.0,
                                     base_color=b1, roughness=0.2)
    img, alpha = render_attribute_map(GaussianScene.from_kernels([tiny]), v, "base_color", EXACT)
    assert float(alpha[0, 0]) == 0.0 and torch.all(img[0, 0] == 0)


def test_scatter_map_examples():
    v = axis_view()
    s = np.array([0.2, 0.6, 0.4])
    assert torch.all(render_scatter_map(GaussianScene.from_kernels(), v) == 0)
    inte = GaussianKernel.with_color([0, 0, 2.0], s, scale=np.full(3, 0.5), opacity=1.0)
    img = render_scatter_map(GaussianScene.from_kernels([], [inte]), v, EXACT)
    assert np.allclose(img[4, 4].numpy(), s, atol=1e-12)


def test_tile_size_does_not_change_output():
    scene = random_scene(7, 6, 4)
    v = small_view(size=24, fx=25.0)
    ref = render(scene, v, settings=RenderSettings(tile_size=16))
    for ts in (1, 4, 8, 32):
        g = render(scene, v, settings=RenderSettings(tile_size=ts))
        for key in ("color", "normal_map", "plane_distance_map", "scatter_map"):
            assert torch.equal(getattr(g, key), getattr(ref, key))


def test_backward_zero_upstream_and_occluded_kernel():
    scene = random_scene(2, 3, 2)
    v = small_view()
    for pop in scene.populations().values():
        pop.requires_grad_(True)
    g = render(scene, v)
    grads = backward(scene, g, {"color": torch.zeros_like(g.color)})
    assert all(torch.all(t == 0) for t in grads.values())
    # an opaque face-on sheet fully hides a kernel behind it
    flat = np.array([2.0, 2.0, 1e-3])
    wall = GaussianKernel.with_color([0, 0, 2.0], [1, 1, 1], scale=flat, opacity=1.0,
                                     base_color=np.ones(3), roughness=0.5)
    # low opacity keeps the hidden footprint on the center pixel, where the wall has alpha exactly 1
    hidden = GaussianKernel.with_color([0, 0, 4.0], [0.5, 0.5, 0.5], scale=np.full(3, 0.005), opacity=0.01)
    scene = GaussianScene.from_kernels([wall], [hidden])
    for pop in scene.populations().values():
        pop.requires_grad_(True)
    no_fresnel = RenderSettings(alpha_max=1.0, use_fresnel=False)
    g = render(scene, axis_view(), settings=no_fresnel, surface=False, interior=False)
    grads = backward(scene, g, {"color": torch.ones_like(g.color)})
    assert torch.all(grads[("interior", "sh")] == 0)
    assert all(torch.isfinite(t).all() for t in grads.values())
