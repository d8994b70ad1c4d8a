"""Training objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import backproject, depth_to_normal, pixel_rays
from .scene import CameraView, Hyperparameters

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _symmetric_index(n: int, pad: int) -> torch.Tensor:
    return torch.from_numpy(np.pad(np.arange(n), pad, mode="symmetric"))


def _blur(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    """Separable blur of (C, H, W) with half-sample symmetric borders."""
    pad = window.numel() // 2
    C, H, W = x.shape
    x = x[:, _symmetric_index(H, pad)][:, :, _symmetric_index(W, pad)]
    x = x[:, None]
    x = F.conv2d(x, window.view(1, 1, -1, 1))
    x = F.conv2d(x, window.view(1, 1, 1, -1))
    return x[:, 0]


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of (H, W, C) or (H, W) images in [0, 1].

    11-tap Gaussian window (sigma 1.5), statistics over every pixel with
    symmetric border extension, averaged over channels.
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    a = a.permute(2, 0, 1)
    b = b.permute(2, 0, 1)
    w = torch.as_tensor(_gaussian_window(), dtype=a.dtype)
    mu_a, mu_b = _blur(a, w), _blur(b, w)
    s_aa = _blur(a * a, w) - mu_a**2
    s_bb = _blur(b * b, w) - mu_b**2
    s_ab = _blur(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * s_ab + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return (num / den).mean()


def l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def photometric_loss(c_sh, c_pbr, ground_truth, lambda1: float = 0.2):
    """lambda1 * L1 + (1 - lambda1) * (1 - SSIM), summed over the renders given.

    ``c_pbr`` may be ``None`` (stage 1 or the no-PBR ablation).
    """
    total = lambda1 * l1(c_sh, ground_truth) + (1 - lambda1) * (1 - ssim(c_sh, ground_truth))
    if c_pbr is not None:
        total = total + lambda1 * l1(c_pbr, ground_truth) + (1 - lambda1) * (1 - ssim(c_pbr, ground_truth))
    return total


def interior_containment_loss(interior_means: torch.Tensor, depth: torch.Tensor, mask: torch.Tensor,
                              view: CameraView) -> torch.Tensor:
    """Mean over interior kernels of how far each sits in front of the surface depth.

    Kernels projecting outside the image or onto invalid depth add zero but
    still count in the mean.
    """
    n = interior_means.shape[0]
    if n == 0:
        return depth.new_zeros(())
    dt = depth.dtype
    R = torch.as_tensor(view.rotation, dtype=dt)
    T = torch.as_tensor(view.translation, dtype=dt)
    K = torch.as_tensor(view.intrinsics, dtype=dt)
    p = (interior_means.to(dt) - T) @ R
    z = p[:, 2]
    with torch.no_grad():
        zs = torch.where(z > 1e-6, z, torch.ones_like(z))
        uv = (p / zs[:, None]) @ K.T
        px = torch.round(uv[:, 0]).long()
        py = torch.round(uv[:, 1]).long()
        H, W = depth.shape
        inside = (z > 1e-6) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
        pxc, pyc = px.clamp(0, W - 1), py.clamp(0, H - 1)
        ok = inside & mask[pyc, pxc]
    d_s = depth[pyc, pxc]
    gap = d_s - z
    pen = torch.where(ok & (gap > 0), gap, torch.zeros_like(gap))
    return pen.sum() / n


def normal_consistency(depth, mask, normal, view: CameraView):
    """Mean L1 distance between depth-derived normals and rendered normals over valid pixels."""
    n_d, valid = depth_to_normal(depth, view, mask)
    valid = valid & mask
    cnt = valid.sum()
    if cnt == 0:
        return depth.new_zeros(())
    diff = (n_d - normal).abs().sum(-1)
    return torch.where(valid, diff, torch.zeros_like(diff)).sum() / cnt


def _project(points_cam_ref, view_ref: CameraView, view_n: CameraView):
    """Reference-camera points to neighbor pixel coordinates and neighbor-camera points."""
    dt = points_cam_ref.dtype
    Rr = torch.as_tensor(view_ref.rotation, dtype=dt)
    Tr = torch.as_tensor(view_ref.translation, dtype=dt)
    Rn = torch.as_tensor(view_n.rotation, dtype=dt)
    Tn = torch.as_tensor(view_n.translation, dtype=dt)
    Kn = torch.as_tensor(view_n.intrinsics, dtype=dt)
    world = points_cam_ref @ Rr.T + Tr
    cam_n = (world - Tn) @ Rn
    z = cam_n[..., 2:3]
    uv = (cam_n / torch.where(z > 1e-9, z, torch.ones_like(z))) @ Kn.T
    return uv[..., :2], cam_n


def _bilinear(img: torch.Tensor, uv: torch.Tensor):
    """Sample (H, W) at pixel coordinates uv (..., 2); returns values and an in-bounds mask."""
    H, W = img.shape
    u, v = uv[..., 0], uv[..., 1]
    inb = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    u = u.clamp(0, W - 1)
    v = v.clamp(0, H - 1)
    u0 = torch.floor(u).long().clamp(max=W - 2) if W > 1 else torch.zeros_like(u).long()
    v0 = torch.floor(v).long().clamp(max=H - 2) if H > 1 else torch.zeros_like(v).long()
    fu, fv = u - u0, v - v0
    u1, v1 = (u0 + 1).clamp(max=W - 1), (v0 + 1).clamp(max=H - 1)
    val = (img[v0, u0] * (1 - fu) * (1 - fv) + img[v0, u1] * fu * (1 - fv)
           + img[v1, u0] * (1 - fu) * fv + img[v1, u1] * fu * fv)
    return val, inb


def multiview_depth_consistency(depth_ref, mask_ref, view_ref: CameraView, depth_n, mask_n, view_n: CameraView,
                                max_reproj_error: float = 1.0):
    """Sum of |D_ref(p) - z_ref(neighbor point)| and the number of pixels passing the round-trip filter.

    The neighbor depth is sampled bilinearly at the projection of each
    reference pixel, back-projected, and moved into the reference frame.
    """
    dt = depth_ref.dtype
    P_ref = backproject(depth_ref, view_ref)
    uv_n, _ = _project(P_ref, view_ref, view_n)
    d_n, inb = _bilinear(depth_n, uv_n)
    m_n, _ = _bilinear(mask_n.to(dt), uv_n)
    # back-project the neighbor sample and bring it into the reference camera
    Kn_inv = torch.as_tensor(np.linalg.inv(view_n.intrinsics), dtype=dt)
    ones = torch.ones_like(uv_n[..., :1])
    P_n = d_n[..., None] * (torch.cat([uv_n, ones], -1) @ Kn_inv.T)
    uv_back, P_in_ref = _project(P_n, view_n, view_ref)
    H, W = depth_ref.shape
    u, v = torch.meshgrid(torch.arange(W, dtype=dt), torch.arange(H, dtype=dt), indexing="xy")
    err = ((uv_back[..., 0] - u) ** 2 + (uv_back[..., 1] - v) ** 2).sqrt()
    keep = mask_ref & inb & (m_n > 0.999) & (d_n > 0) & (err.detach() < max_reproj_error)
    diff = (depth_ref - P_in_ref[..., 2]).abs()
    return torch.where(keep, diff, torch.zeros_like(diff)).sum(), keep.sum()


def geometric_loss(depth, mask, normal, view: CameraView, neighbors: Sequence = (), lambda2: float = 0.0,
                   lambda3: float = 0.0, max_reproj_error: float = 1.0):
    """lambda2 * normal consistency + lambda3 * mean multi-view depth error.

    ``neighbors`` holds (depth, mask, view) tuples of nearby training views.
    """
    zero = depth.new_zeros(())
    term1 = lambda2 * normal_consistency(depth, mask, normal, view) if lambda2 else zero
    term2 = zero
    if lambda3 and neighbors:
        total, count = zero, 0
        for d_n, m_n, v_n in neighbors:
            s, c = multiview_depth_consistency(depth, mask, view, d_n, m_n, v_n, max_reproj_error)
            total = total + s
            count = count + int(c)
        if count:
            term2 = lambda3 * total / count
    return term1 + term2, term1, term2


def smoothness_loss(attribute: torch.Tensor, ground_truth: torch.Tensor) -> torch.Tensor:
    """Edge-aware total variation, mean over pixels.

    ||grad M||_1 sums the absolute forward differences in x and y over channels;
    the edge weight uses the channel-mean of the same quantity on the target.
    """
    if attribute.dim() == 2:
        attribute = attribute[..., None]
    if attribute.shape[:2] != ground_truth.shape[:2]:
        raise ValueError("attribute and ground-truth sizes differ")
    gm = (attribute[:-1, 1:] - attribute[:-1, :-1]).abs().sum(-1) + (attribute[1:, :-1] - attribute[:-1, :-1]).abs().sum(-1)
    g = ground_truth if ground_truth.dim() == 3 else ground_truth[..., None]
    gc = ((g[:-1, 1:] - g[:-1, :-1]).abs() + (g[1:, :-1] - g[:-1, :-1]).abs()).mean(-1)
    return (gm * torch.exp(-gc)).mean()


@dataclass
class LossReport:
    l_c: torch.Tensor
    l_surf_normal: torch.Tensor
    l_surf_multiview: torch.Tensor
    l_in: torch.Tensor
    l_sm_rough: torch.Tensor
    l_sm_base: torch.Tensor
    total: torch.Tensor
    extra: Dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> Dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in
               ("l_c", "l_surf_normal", "l_surf_multiview", "l_in", "l_sm_rough", "l_sm_base", "total")}
        out.update({k: float(v.detach()) for k, v in self.extra.items()})
        return out


def total_loss(l_c, l_surf_normal=0.0, l_surf_multiview=0.0, l_in=0.0, l_sm_rough=0.0, l_sm_base=0.0,
               hp: Optional[Hyperparameters] = None, **extra) -> LossReport:
    """L = L_c + L_surf + lambda4 L_in + lambda5 L_sm^r + lambda6 L_sm^b.

    The L_surf parts arrive already weighted by lambda2 and lambda3.
    """
    hp = hp or Hyperparameters()
    t = lambda x: x if torch.is_tensor(x) else torch.tensor(float(x), dtype=torch.float64)
    l_c, l_n, l_mv, l_in, l_r, l_b = map(t, (l_c, l_surf_normal, l_surf_multiview, l_in, l_sm_rough, l_sm_base))
    total = l_c + l_n + l_mv + hp.lambda4 * l_in + hp.lambda5 * l_r + hp.lambda6 * l_b
    for v in extra.values():
        total = total + v
    return LossReport(l_c, l_n, l_mv, l_in, l_r, l_b, total, {k: t(v) for k, v in extra.items()})
