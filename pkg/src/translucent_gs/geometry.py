"""Normal, plane-distance and unbiased depth maps, plus normals from depth.

Camera space follows ``CameraView``: x right, y down, z forward. Kernel
normals face the camera, so their camera-space z is negative and the plane
distance is stored as the positive quantity ``-(mu_cam . n_cam)``. Depth then
comes out as ``D_plane / -(N . r)`` with the unnormalized ray ``r = K^-1 (u, v, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .scene import CameraView, GaussianScene
from .splat import GBuffer, RenderSettings, render

DEPTH_ALPHA_MIN = 0.5
GRAZING_EPS = 1e-4


@dataclass
class GeometryMaps:
    normal: torch.Tensor  # (H, W, 3) camera space, alpha-blended
    plane_distance: torch.Tensor  # (H, W)
    depth: Optional[torch.Tensor] = None  # (H, W) camera z, 0 where invalid
    mask: Optional[torch.Tensor] = None  # (H, W) bool
    alpha: Optional[torch.Tensor] = None

    @classmethod
    def from_gbuffer(cls, g: GBuffer, view: CameraView) -> "GeometryMaps":
        maps = cls(g.normal_map, g.plane_distance_map, alpha=g.surface_alpha)
        maps.depth, maps.mask = unbiased_depth(maps, view)
        return maps


def pixel_rays(view: CameraView, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(view.pixel_rays(), dtype=dtype)


def render_normal_map(scene: GaussianScene, view: CameraView, settings: Optional[RenderSettings] = None):
    g = render(scene, view, settings=settings, combined=False, interior=False)
    return g.normal_map, g.surface_alpha > 0


def render_plane_distance(scene: GaussianScene, view: CameraView, settings: Optional[RenderSettings] = None):
    g = render(scene, view, settings=settings, combined=False, interior=False)
    return g.plane_distance_map, g.surface_alpha > 0


def render_geometry(scene: GaussianScene, view: CameraView, settings: Optional[RenderSettings] = None) -> GeometryMaps:
    g = render(scene, view, settings=settings, combined=False, interior=False)
    return GeometryMaps.from_gbuffer(g, view)


def unbiased_depth(geometry: GeometryMaps, view: CameraView, alpha: Optional[torch.Tensor] = None):
    """Ray-plane depth per pixel; returns (depth, valid mask)."""
    alpha = geometry.alpha if alpha is None else alpha
    r = pixel_rays(view, geometry.normal.dtype)
    n_dot_r = (geometry.normal * r).sum(-1)
    mask = n_dot_r.abs() >= GRAZING_EPS
    if alpha is not None:
        mask = mask & (alpha >= DEPTH_ALPHA_MIN)
    denom = torch.where(mask, -n_dot_r, torch.ones_like(n_dot_r))
    depth = torch.where(mask, geometry.plane_distance / denom, torch.zeros_like(n_dot_r))
    mask = mask & (depth > 0)
    depth = torch.where(mask, depth, torch.zeros_like(depth))
    return depth, mask


def backproject(depth: torch.Tensor, view: CameraView) -> torch.Tensor:
    return depth[..., None] * pixel_rays(view, depth.dtype)


def depth_to_normal(depth: torch.Tensor, view: CameraView, mask: Optional[torch.Tensor] = None):
    """Normals from forward-difference tangents of the back-projected depth.

    Returns (normals (H, W, 3), valid mask); the last row and column are invalid.
    """
    if mask is None:
        mask = depth > 0
    P = backproject(depth, view)
    H, W = depth.shape
    n = torch.zeros(H, W, 3, dtype=depth.dtype)
    valid = torch.zeros(H, W, dtype=torch.bool)
    tx = P[:-1, 1:] - P[:-1, :-1]
    ty = P[1:, :-1] - P[:-1, :-1]
    c = torch.cross(tx, ty, dim=-1)
    norm = c.norm(dim=-1, keepdim=True)
    ok = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & (norm[..., 0] > 0)
    c = c / torch.where(norm > 0, norm, torch.ones_like(norm))
    # orient toward the camera (the camera sits at the origin)
    facing = (c * P[:-1, :-1]).sum(-1, keepdim=True)
    c = torch.where(facing > 0, -c, c)
    n = torch.cat([torch.cat([c, torch.zeros(H - 1, 1, 3, dtype=depth.dtype)], 1),
                   torch.zeros(1, W, 3, dtype=depth.dtype)], 0)
    valid[:-1, :-1] = ok
    n = torch.where(valid[..., None], n, torch.zeros_like(n))
    return n, valid
