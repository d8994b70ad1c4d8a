"""Autograd vs central differences for every differentiable map and loss (64-bit)."""

import dataclasses

import numpy as np
import pytest
import torch

from conftest import finite_difference_check, random_kernel, random_scene, small_view
from translucent_gs.geometry import GeometryMaps, depth_to_normal
from translucent_gs.losses import (
    geometric_loss,
    interior_containment_loss,
    photometric_loss,
    smoothness_loss,
)
from translucent_gs.scene import CameraView, GaussianScene
from translucent_gs.shading import render_pbr
from translucent_gs.splat import RenderSettings, render, render_attribute_map, render_combined, render_scatter_map

SEEDS = list(range(10))
TOL = 1e-4


def weights(seed, *shape):
    return torch.from_numpy(np.random.default_rng(seed + 1000).normal(size=shape))


@pytest.mark.parametrize("seed", SEEDS)
def test_render_maps_gradients(seed):
    scene = random_scene(seed)
    view = small_view()
    st = RenderSettings(tile_size=4)
    W3, W1 = weights(seed, 8, 8, 3), weights(seed + 1, 8, 8)

    def objective():
        c = render_combined(scene, view, settings=st)
        b, _ = render_attribute_map(scene, view, "base_color", st)
        r, _ = render_attribute_map(scene, view, "roughness", st)
        s = render_scatter_map(scene, view, st)
        return (c * W3).sum() + (b * W3.flip(0)).sum() + (r * W1).sum() + (s * W3.flip(1)).sum()

    assert finite_difference_check(scene, objective) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_geometry_and_pbr_gradients(seed):
    scene = random_scene(seed)
    view = small_view()
    st = RenderSettings(tile_size=4)
    W3, W1 = weights(seed, 8, 8, 3), weights(seed + 1, 8, 8)

    def objective():
        g = render(scene, view, settings=st)
        maps = GeometryMaps.from_gbuffer(g, view)
        dn, _ = depth_to_normal(maps.depth, view, maps.mask)
        c_pbr, _ = render_pbr(g, maps.depth, maps.mask, view)
        return ((maps.normal * W3).sum() + (maps.plane_distance * W1).sum() + (maps.depth * W1.T).sum()
                + (dn * W3.flip(0)).sum() + (c_pbr * W3.flip(1)).sum())

    assert finite_difference_check(scene, objective) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradients(seed):
    scene = random_scene(seed)
    view, other = small_view(), small_view(eye=(0.6, -0.1, -3.9))
    st = RenderSettings(tile_size=4)
    gt = torch.from_numpy(np.random.default_rng(seed).uniform(size=(8, 8, 3)))

    def objective():
        g = render(scene, view, settings=st)
        maps = GeometryMaps.from_gbuffer(g, view)
        gn = render(scene, other, settings=st, combined=False, interior=False)
        mn = GeometryMaps.from_gbuffer(gn, other)
        c_pbr, _ = render_pbr(g, maps.depth, maps.mask, view)
        l_c = photometric_loss(g.color, c_pbr, gt)
        # both the reference and neighbor depth carry gradients here
        _, l_n, l_mv = geometric_loss(maps.depth, maps.mask, maps.normal, view, [(mn.depth, mn.mask, other)],
                                      0.5, 0.5)
        l_in = interior_containment_loss(scene.interior.activated()["means"], maps.depth, maps.mask, view)
        l_r = smoothness_loss(g.roughness_map, gt)
        l_b = smoothness_loss(g.base_color_map, gt)
        return l_c + l_n + 3.0 * l_mv + 2.0 * l_in + 5.0 * l_r + 7.0 * l_b

    assert finite_difference_check(scene, objective) < TOL


def test_full_opacity_stop_entry_gradients():
    """A kernel reaching alpha' = 1 stops the ray; gradients must stay finite and match."""
    rng = np.random.default_rng(5)
    # the front kernel projects exactly onto pixel (4, 4) of an axis-aligned camera
    front = dataclasses.replace(random_kernel(rng), position=np.array([0.0, 0.0, 3.0]),
                                scale=np.array([0.4, 0.4, 0.4]), opacity=0.5)
    behind = [dataclasses.replace(random_kernel(rng), position=rng.uniform(-0.3, 0.3, 3) + [0, 0, 4.5])
              for _ in range(3)]
    scene = GaussianScene.from_kernels([front] + behind, [], sh_degree=1)
    scene.surface.params["opacity_logits"].data[0] = 40.0  # sigmoid rounds to exactly 1
    view = CameraView(np.array([[10.0, 0, 4], [0, 10.0, 4], [0, 0, 1]]), np.eye(3), np.zeros(3), 8, 8)
    st = RenderSettings(tile_size=4, alpha_max=1.0, use_fresnel=False)
    W3 = weights(0, 8, 8, 3)
    with torch.no_grad():
        alpha = render(scene, view, settings=st, surface=False, interior=False).combined_alpha
    assert float(alpha[4, 4]) == 1.0

    def objective():
        return (render_combined(scene, view, settings=st) * W3).sum()

    assert finite_difference_check(scene, objective) < TOL
