"""Projection and the three compositing passes.

* combined: both populations, surface opacity scaled by a per-kernel Schlick
  weight, colors from each kernel's own SH set (``C_SH``);
* surface: surface kernels only, plain alpha, carrying base color, roughness,
  camera-space normal and plane distance;
* interior: interior kernels only, plain alpha, carrying the scatter color.

Gradients come from torch autograd through the per-kernel math and from the
hand-written rasterizer backward for the per-pixel part.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np
import torch

from .raster import rasterize
from .scene import (
    CameraView,
    GaussianKernel,
    GaussianScene,
    Population,
    covariance_from_rotation_scale,
    kernel_normal,
    sh_evaluate,
)

NEAR_PLANE = 0.01
LOWPASS = 0.3
CHI2_99 = 9.210340371976184  # 99% quantile of chi-square with 2 dof


@dataclass
class RenderSettings:
    tile_size: int = 16
    alpha_max: float = 0.999
    f0: float = 0.04
    use_fresnel: bool = True
    sh_degree: Optional[int] = None
    dtype: torch.dtype = torch.float64


@dataclass
class ProjectedKernel:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    is_surface: bool
    fresnel_weight: float
    source_index: int


@dataclass
class GBuffer:
    color: Optional[torch.Tensor] = None  # C_SH, (H, W, 3)
    base_color_map: Optional[torch.Tensor] = None
    roughness_map: Optional[torch.Tensor] = None  # (H, W)
    normal_map: Optional[torch.Tensor] = None  # camera space, (H, W, 3)
    plane_distance_map: Optional[torch.Tensor] = None  # (H, W)
    surface_alpha: Optional[torch.Tensor] = None
    scatter_map: Optional[torch.Tensor] = None
    interior_alpha: Optional[torch.Tensor] = None
    combined_alpha: Optional[torch.Tensor] = None
    # per-population screen-space means, kept for densification statistics
    means2d: Dict[str, torch.Tensor] = field(default_factory=dict)
    visible: Dict[str, torch.Tensor] = field(default_factory=dict)


def fresnel_schlick(cos_theta, f0=0.04):
    return f0 + (1.0 - f0) * (1.0 - cos_theta) ** 5


def camera_tensors(view: CameraView, dtype=torch.float64):
    R = torch.as_tensor(view.rotation, dtype=dtype)
    T = torch.as_tensor(view.translation, dtype=dtype)
    K = torch.as_tensor(view.intrinsics, dtype=dtype)
    return R, T, K


def project(means: torch.Tensor, quats: torch.Tensor, scales: torch.Tensor, view: CameraView):
    """Project kernels into ``view``.

    Returns camera-space centers, pixel means, 2D covariances (with the
    low-pass term), conics (a, b, c) of the inverse covariance, and a validity mask.
    """
    dt = means.dtype
    R, T, K = camera_tensors(view, dt)
    p_cam = (means - T) @ R  # rows: R^T (mu - T)
    z = p_cam[:, 2]
    valid = z > NEAR_PLANE
    zs = torch.where(valid, z, torch.ones_like(z))
    x, y = p_cam[:, 0], p_cam[:, 1]
    fx, s, cx, fy, cy = K[0, 0], K[0, 1], K[0, 2], K[1, 1], K[1, 2]
    u = fx * x / zs + s * y / zs + cx
    v = fy * y / zs + cy
    means2d = torch.stack([u, v], -1)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([fx / zs, s / zs, -(fx * x + s * y) / zs**2], -1),
            torch.stack([zero, fy / zs, -fy * y / zs**2], -1),
        ],
        -2,
    )
    cov3d = covariance_from_rotation_scale(quats, scales)
    Rw = R.T
    M = J @ Rw
    cov2d = M @ cov3d @ M.transpose(-1, -2)
    cov2d = cov2d + LOWPASS * torch.eye(2, dtype=dt)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conics = torch.stack([cov2d[:, 1, 1] / det, -0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]) / det,
                          cov2d[:, 0, 0] / det], -1)
    with torch.no_grad():
        rx = torch.sqrt(CHI2_99 * cov2d[:, 0, 0].clamp(min=0))
        ry = torch.sqrt(CHI2_99 * cov2d[:, 1, 1].clamp(min=0))
        on_frame = (u + rx >= 0) & (u - rx <= view.width - 1) & (v + ry >= 0) & (v - ry <= view.height - 1)
        valid = valid & on_frame & (det > 0)
    return {"p_cam": p_cam, "means2d": means2d, "cov2d": cov2d, "conics": conics, "depths": z, "valid": valid}


def project_gaussian(kernel: GaussianKernel, view: CameraView, is_surface: bool = True, index: int = 0,
                     f0: float = 0.04) -> Optional[ProjectedKernel]:
    """Single-kernel projection; ``None`` when the kernel is culled."""
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))[None]
    means, quats, scales = t(kernel.position), t(kernel.rotation), t(kernel.scale)
    proj = project(means, quats, scales, view)
    if not bool(proj["valid"][0]):
        return None
    fw = 1.0
    if is_surface:
        fw = float(fresnel_weights(means, quats, scales, view, f0)[0])
    return ProjectedKernel(
        mean2d=proj["means2d"][0].numpy(), cov2d=proj["cov2d"][0].numpy(),
        view_depth=float(proj["depths"][0]), is_surface=is_surface, fresnel_weight=fw, source_index=index,
    )


def pixel_alpha(proj: ProjectedKernel, pixel, opacity: float, alpha_max: float = 0.999) -> float:
    d = np.asarray(pixel, dtype=np.float64) - proj.mean2d
    power = 0.5 * d @ np.linalg.solve(proj.cov2d, d)
    return float(np.clip(opacity * np.exp(-power), 0.0, alpha_max))


def view_directions(means: torch.Tensor, view: CameraView) -> torch.Tensor:
    """Unit directions from the camera center to each kernel center."""
    campos = torch.as_tensor(view.translation, dtype=means.dtype)
    d = means - campos
    return d / d.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def fresnel_weights(means, quats, scales, view: CameraView, f0: float = 0.04) -> torch.Tensor:
    campos = torch.as_tensor(view.translation, dtype=means.dtype)
    n = kernel_normal(quats, scales, means, campos)
    omega = -view_directions(means, view)
    cos = (n * omega).sum(-1).clamp(0.0, 1.0)
    return fresnel_schlick(cos, f0)


def _population_pass_inputs(pop: Population, view: CameraView):
    act = pop.activated()
    proj = project(act["means"], act["quats"], act["scales"], view)
    return act, proj


def render(scene: GaussianScene, view: CameraView, background=(0.0, 0.0, 0.0),
           settings: Optional[RenderSettings] = None, combined: bool = True, surface: bool = True,
           interior: bool = True) -> GBuffer:
    """Run the requested compositing passes and collect their maps."""
    settings = settings or RenderSettings()
    H, W = view.height, view.width
    out = GBuffer()
    s_act, s_proj = _population_pass_inputs(scene.surface, view)
    i_act, i_proj = _population_pass_inputs(scene.interior, view)
    out.means2d = {"surface": s_proj["means2d"], "interior": i_proj["means2d"]}
    out.visible = {"surface": s_proj["valid"], "interior": i_proj["valid"]}
    dt = s_act["means"].dtype
    raster = lambda proj, op, w, f, bg: rasterize(
        proj["means2d"], proj["conics"], op, w, f, bg, proj["depths"], proj["valid"], W, H,
        settings.tile_size, settings.alpha_max)

    if combined:
        sdir = view_directions(s_act["means"], view)
        idir = view_directions(i_act["means"], view)
        c_surf = sh_evaluate(s_act["sh"], sdir, settings.sh_degree)
        c_in = sh_evaluate(i_act["sh"], idir, settings.sh_degree)
        if settings.use_fresnel:
            w_surf = fresnel_weights(s_act["means"], s_act["quats"], s_act["scales"], view, settings.f0)
        else:
            w_surf = torch.ones(len(scene.surface), dtype=dt)
        proj = {k: torch.cat([s_proj[k], i_proj[k]]) for k in ("means2d", "conics", "depths", "valid")}
        op = torch.cat([s_act["opacities"], i_act["opacities"]])
        w = torch.cat([w_surf, torch.ones(len(scene.interior), dtype=dt)])
        feats = torch.cat([c_surf, c_in])
        out.color, out.combined_alpha = raster(proj, op, w, feats, background)

    if surface:
        R, T, _ = camera_tensors(view, dt)
        campos = T
        n_world = kernel_normal(s_act["quats"], s_act["scales"], s_act["means"], campos)
        n_cam = n_world @ R
        plane_d = -(s_proj["p_cam"] * n_cam).sum(-1)
        feats = [s_act["base_color"], s_act["roughness"][:, None], n_cam, plane_d[:, None]]
        carries_scatter = "sh_scatter" in scene.surface.params
        if carries_scatter:
            # without an interior population the surface kernels hold the scatter color
            sdir = view_directions(s_act["means"], view)
            feats.append(sh_evaluate(scene.surface.params["sh_scatter"], sdir, settings.sh_degree))
        img, alpha = raster(s_proj, s_act["opacities"], torch.ones(len(scene.surface), dtype=dt),
                            torch.cat(feats, -1), 0.0)
        out.base_color_map = img[..., 0:3]
        out.roughness_map = img[..., 3]
        out.normal_map = img[..., 4:7]
        out.plane_distance_map = img[..., 7]
        out.surface_alpha = alpha
        if carries_scatter:
            out.scatter_map = img[..., 8:11]

    if interior and len(scene.interior) == 0:
        if out.scatter_map is None:
            out.scatter_map = torch.zeros(H, W, 3, dtype=dt)
        out.interior_alpha = torch.zeros(H, W, dtype=dt)
    elif interior:
        idir = view_directions(i_act["means"], view)
        c_in = sh_evaluate(i_act["sh"], idir, settings.sh_degree)
        img, alpha = raster(i_proj, i_act["opacities"], torch.ones(len(scene.interior), dtype=dt), c_in, 0.0)
        out.scatter_map = img
        out.interior_alpha = alpha
    return out


def render_combined(scene: GaussianScene, view: CameraView, background=(0.0, 0.0, 0.0),
                    settings: Optional[RenderSettings] = None) -> torch.Tensor:
    return render(scene, view, background, settings, surface=False, interior=False).color


def render_attribute_map(scene: GaussianScene, view: CameraView, attribute: str,
                         settings: Optional[RenderSettings] = None):
    """Surface-only plain-alpha map of ``base_color`` or ``roughness``; also returns surface alpha."""
    if attribute not in ("base_color", "roughness"):
        raise ValueError(f"unknown attribute {attribute!r}")
    g = render(scene, view, settings=settings, combined=False, interior=False)
    img = g.base_color_map if attribute == "base_color" else g.roughness_map
    return img, g.surface_alpha


def render_scatter_map(scene: GaussianScene, view: CameraView, settings: Optional[RenderSettings] = None):
    if "sh_scatter" in scene.surface.params and len(scene.interior) == 0:
        return render(scene, view, settings=settings, combined=False, interior=False).scatter_map
    return render(scene, view, settings=settings, combined=False, surface=False).scatter_map


GBUFFER_MAPS = ("color", "base_color_map", "roughness_map", "normal_map", "plane_distance_map", "scatter_map")


def backward(scene: GaussianScene, gbuffer: GBuffer, upstream: Dict[str, torch.Tensor]):
    """Gradients of sum(<upstream[m], gbuffer.m>) w.r.t. every raw kernel parameter.

    The scene parameters must have had ``requires_grad`` set before the forward
    pass. Returns {(population, parameter): gradient}.
    """
    outputs, grads = [], []
    for name, g in upstream.items():
        if name not in GBUFFER_MAPS:
            raise KeyError(f"unknown map {name!r}")
        m = getattr(gbuffer, name)
        if m is None or m.grad_fn is None:
            raise RuntimeError(f"forward intermediates for {name!r} are missing; render with gradients enabled")
        outputs.append(m)
        grads.append(torch.as_tensor(g, dtype=m.dtype).expand_as(m))
    leaves = [(pop, n, t) for pop, p in scene.populations().items() for n, t in p.params.items()
              if t.requires_grad]
    if not leaves:
        raise RuntimeError("scene parameters do not require gradients")
    res = torch.autograd.grad(outputs, [t for _, _, t in leaves], grads, allow_unused=True, retain_graph=True)
    return {(pop, n): (torch.zeros_like(t) if g is None else g) for (pop, n, t), g in zip(leaves, res)}
