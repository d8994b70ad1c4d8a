"""Screen-space BSDF shading under a point light co-located with the camera."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .scene import CameraView
from .splat import fresnel_schlick


@dataclass
class ShadingTerms:
    specular: torch.Tensor  # (H, W, 3)
    diffuse: torch.Tensor  # (H, W, 3)
    fresnel: torch.Tensor  # (H, W)
    attenuation: torch.Tensor  # (H, W)
    valid: torch.Tensor  # (H, W) bool


def ggx_ndf(n_dot_h, roughness):
    a2 = (roughness * roughness) ** 2
    denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def smith_g(n_dot_v, roughness):
    """Schlick-GGX masking for one direction, squared (light and view coincide)."""
    k = (roughness + 1.0) ** 2 / 8.0
    nv = torch.as_tensor(n_dot_v)
    pos = nv > 0
    nv_safe = torch.where(pos, nv, torch.ones_like(nv))
    g1 = nv_safe / (nv_safe * (1.0 - k) + k)
    return torch.where(pos, g1 * g1, torch.zeros_like(g1))


def attenuation(depth):
    """Inverse-square falloff, Phi(D) = D^2."""
    return depth * depth


def _view_cosine(normal, view: CameraView):
    rays = torch.as_tensor(view.pixel_rays(), dtype=normal.dtype)
    v = -rays / rays.norm(dim=-1, keepdim=True)
    nn = normal.norm(dim=-1, keepdim=True)
    n_hat = normal / torch.where(nn > 0, nn, torch.ones_like(nn))
    return (n_hat * v).sum(-1)


def _light(light, dtype):
    return torch.as_tensor(light, dtype=dtype).reshape(-1)[None, None, :].expand(1, 1, 3)


def shading_terms(normal, depth, valid, base_color, roughness, view: CameraView, light=None, f0: float = 0.04,
                  diffuse_fresnel_mode: str = "literal") -> ShadingTerms:
    light = view.light_intensity if light is None else light
    dt = normal.dtype
    L = _light(light, dt)
    cos = _view_cosine(normal, view)
    front = valid & (cos > 0)
    cos_c = torch.where(front, cos, torch.ones_like(cos))
    F = fresnel_schlick(torch.where(front, cos, torch.zeros_like(cos)), f0)
    phi = torch.where(valid, attenuation(depth), torch.ones_like(depth))
    rough = torch.where(front, roughness, torch.ones_like(roughness))
    spec = F * ggx_ndf(cos_c, rough) * smith_g(cos_c, rough) / (4.0 * cos_c * cos_c)
    spec = torch.where(front, spec / phi, torch.zeros_like(spec))
    fd = F * F if diffuse_fresnel_mode == "literal" else (1.0 - F) ** 2
    diff = base_color / math.pi * (fd / phi)[..., None] * L
    diff = torch.where(valid[..., None], diff, torch.zeros_like(diff))
    return ShadingTerms(spec[..., None] * L, diff, F, phi, valid)


def shade_specular(normal, depth, valid, roughness, view: CameraView, light=None, f0: float = 0.04):
    return shading_terms(normal, depth, valid, torch.zeros_like(normal), roughness, view, light, f0).specular


def shade_diffuse(normal, depth, valid, base_color, view: CameraView, light=None, f0: float = 0.04,
                  diffuse_fresnel_mode: str = "literal"):
    rough = torch.ones_like(depth)
    return shading_terms(normal, depth, valid, base_color, rough, view, light, f0, diffuse_fresnel_mode).diffuse


def compose_pbr(terms: ShadingTerms, scatter, gamma: float = 0.3, background=None):
    """C_s + gamma C_d + (1 - F) C_scatter on valid pixels, background elsewhere."""
    c = terms.specular + gamma * terms.diffuse + (1.0 - terms.fresnel)[..., None] * scatter
    bg = torch.zeros(3, dtype=c.dtype) if background is None else torch.as_tensor(background, dtype=c.dtype)
    return torch.where(terms.valid[..., None], c, bg.expand_as(c))


def render_pbr(gbuffer, depth, valid, view: CameraView, gamma: float = 0.3, f0: float = 0.04, background=None,
               diffuse_fresnel_mode: str = "literal", light=None):
    terms = shading_terms(gbuffer.normal_map, depth, valid, gbuffer.base_color_map, gbuffer.roughness_map, view,
                          light, f0, diffuse_fresnel_mode)
    return compose_pbr(terms, gbuffer.scatter_map, gamma, background), terms
