"""Kernels, cameras, scenes and the small analytic helpers the renderer builds on."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
MAX_SH_DEGREE = 2


def num_sh_bases(degree: int) -> int:
    return (degree + 1) ** 2


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def inverse_sigmoid(x):
    x = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    return torch.log(x) - torch.log1p(-x)


def activate_opacity(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits)


def activate_scale(log_scales: torch.Tensor) -> torch.Tensor:
    return torch.exp(log_scales)


def deactivate_opacity(opacity: torch.Tensor) -> torch.Tensor:
    return inverse_sigmoid(opacity)


def deactivate_scale(scale: torch.Tensor) -> torch.Tensor:
    return torch.log(scale)


# --------------------------------------------------------------------------
# analytic kernel operations
# --------------------------------------------------------------------------


def quat_to_rotmat(quats: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (w, x, y, z) quaternions; input is normalized first."""
    q = quats / quats.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def covariance_from_rotation_scale(rotation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(s)^2 R^T for batched quaternions (..., 4) and scales (..., 3)."""
    R = quat_to_rotmat(rotation)
    M = R * scale.unsqueeze(-2)
    return M @ M.transpose(-1, -2)


def shortest_axis(rotation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Rotation column of the smallest scale. Ties go to the lowest axis index."""
    R = quat_to_rotmat(rotation)
    idx = torch.argmin(scale, dim=-1)
    return torch.take_along_dim(R, idx[..., None, None].expand(R.shape[:-1] + (1,)), dim=-1)[..., 0]


def kernel_normal(rotation: torch.Tensor, scale: torch.Tensor, position: torch.Tensor,
                  view_position: torch.Tensor) -> torch.Tensor:
    """Shortest-axis normal flipped to face ``view_position``."""
    n = shortest_axis(rotation, scale)
    to_view = view_position - position
    sign = torch.where((n * to_view).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(n.dtype)
    return n * sign


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis values (..., (degree+1)^2) for unit directions (..., 3)."""
    x, y, z = dirs.unbind(-1)
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    if degree > MAX_SH_DEGREE:
        raise ValueError(f"SH degree {degree} exceeds the supported maximum {MAX_SH_DEGREE}")
    return torch.stack(out, dim=-1)


def sh_evaluate(coeffs: torch.Tensor, direction: torch.Tensor, degree: Optional[int] = None) -> torch.Tensor:
    """Evaluate SH color, clamped at zero.

    ``coeffs`` has shape (..., K, 3) with K = (degree+1)^2; ``direction`` (..., 3).
    When ``degree`` is lower than the stored one only the leading bands are used.
    """
    k = coeffs.shape[-2]
    stored = int(round(math.sqrt(k))) - 1
    if num_sh_bases(stored) != k:
        raise ValueError(f"coefficient count {k} is not a square number of bands")
    degree = stored if degree is None else min(degree, stored)
    basis = sh_basis(direction, degree)
    val = (basis.unsqueeze(-1) * coeffs[..., : num_sh_bases(degree), :]).sum(-2)
    return torch.clamp(val, min=0.0)


def rgb_to_sh_dc(rgb):
    return np.asarray(rgb, dtype=np.float64) / SH_C0


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    """One splat in activated units."""

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    opacity: float = 1.0
    sh: Optional[np.ndarray] = None  # SH_surf for surface kernels, SH_scatter for interior ones
    base_color: Optional[np.ndarray] = None
    roughness: Optional[float] = None

    @classmethod
    def with_color(cls, position, color, **kw) -> "GaussianKernel":
        sh = np.zeros((1, 3))
        sh[0] = rgb_to_sh_dc(color)
        return cls(position=np.asarray(position, dtype=np.float64), sh=sh, **kw)


SURFACE_PARAMS = ("means", "quats", "log_scales", "opacity_logits", "sh", "base_color_logits", "roughness_logits")
INTERIOR_PARAMS = ("means", "quats", "log_scales", "opacity_logits", "sh")


class Population:
    """Raw (pre-activation) parameters of one kernel population as leaf tensors."""

    def __init__(self, params: Dict[str, torch.Tensor], is_surface: bool):
        self.is_surface = is_surface
        names = SURFACE_PARAMS if is_surface else INTERIOR_PARAMS
        missing = [n for n in names if n not in params]
        if missing:
            raise ValueError(f"missing parameters {missing}")
        self.params = {n: params[n] for n in names}
        if is_surface and "sh_scatter" in params:
            # only present when surface kernels also carry the scatter color
            self.params["sh_scatter"] = params["sh_scatter"]

    @classmethod
    def empty(cls, is_surface: bool, sh_degree: int = 0, dtype=torch.float64) -> "Population":
        k = num_sh_bases(sh_degree)
        p = {
            "means": torch.zeros(0, 3, dtype=dtype),
            "quats": torch.zeros(0, 4, dtype=dtype),
            "log_scales": torch.zeros(0, 3, dtype=dtype),
            "opacity_logits": torch.zeros(0, dtype=dtype),
            "sh": torch.zeros(0, k, 3, dtype=dtype),
        }
        if is_surface:
            p["base_color_logits"] = torch.zeros(0, 3, dtype=dtype)
            p["roughness_logits"] = torch.zeros(0, dtype=dtype)
        return cls(p, is_surface)

    @classmethod
    def from_kernels(cls, kernels: Sequence[GaussianKernel], is_surface: bool, sh_degree: int = 0,
                     dtype=torch.float64) -> "Population":
        if not kernels:
            return cls.empty(is_surface, sh_degree, dtype)
        k = num_sh_bases(sh_degree)

        def t(x):
            return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)

        sh = np.zeros((len(kernels), k, 3))
        for i, kern in enumerate(kernels):
            if kern.sh is not None:
                n = min(k, kern.sh.shape[0])
                sh[i, :n] = kern.sh[:n]
        p = {
            "means": t([kern.position for kern in kernels]),
            "quats": t([kern.rotation for kern in kernels]),
            "log_scales": torch.log(t([kern.scale for kern in kernels])),
            "opacity_logits": inverse_sigmoid(t([kern.opacity for kern in kernels])),
            "sh": t(sh),
        }
        if is_surface:
            bc = [kern.base_color if kern.base_color is not None else np.full(3, 0.5) for kern in kernels]
            rough = [kern.roughness if kern.roughness is not None else 0.5 for kern in kernels]
            p["base_color_logits"] = inverse_sigmoid(t(bc))
            p["roughness_logits"] = inverse_sigmoid(t(rough))
        return cls(p, is_surface)

    def __len__(self) -> int:
        return self.params["means"].shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.params["sh"].shape[1]))) - 1

    @property
    def dtype(self):
        return self.params["means"].dtype

    def activated(self) -> Dict[str, torch.Tensor]:
        p = self.params
        out = {
            "means": p["means"],
            "quats": p["quats"] / p["quats"].norm(dim=-1, keepdim=True),
            "scales": activate_scale(p["log_scales"]),
            "opacities": activate_opacity(p["opacity_logits"]),
            "sh": p["sh"],
        }
        if self.is_surface:
            out["base_color"] = torch.sigmoid(p["base_color_logits"])
            out["roughness"] = torch.sigmoid(p["roughness_logits"])
        return out

    def kernel(self, i: int) -> GaussianKernel:
        a = {k: v.detach().cpu().numpy() for k, v in self.activated().items()}
        return GaussianKernel(
            position=a["means"][i], rotation=a["quats"][i], scale=a["scales"][i],
            opacity=float(a["opacities"][i]), sh=a["sh"][i],
            base_color=a["base_color"][i] if self.is_surface else None,
            roughness=float(a["roughness"][i]) if self.is_surface else None,
        )

    def kernels(self) -> List[GaussianKernel]:
        return [self.kernel(i) for i in range(len(self))]

    def requires_grad_(self, flag: bool = True) -> "Population":
        for n, v in self.params.items():
            self.params[n] = v.detach().requires_grad_(flag)
        return self

    def to(self, dtype) -> "Population":
        return Population({n: v.detach().to(dtype) for n, v in self.params.items()}, self.is_surface)

    def clone(self) -> "Population":
        return Population({n: v.detach().clone() for n, v in self.params.items()}, self.is_surface)

    def select(self, mask: torch.Tensor) -> "Population":
        return Population({n: v.detach()[mask] for n, v in self.params.items()}, self.is_surface)

    def concat(self, other: "Population") -> "Population":
        return Population(
            {n: torch.cat([v.detach(), other.params[n].detach()]) for n, v in self.params.items()},
            self.is_surface,
        )


@dataclass
class GaussianScene:
    """Surface and interior populations plus optimizer/densification state."""

    surface: Population
    interior: Population
    # (population, param) -> (first moment, second moment)
    moments: Dict[tuple, tuple] = field(default_factory=dict)
    grad_accum: Dict[str, torch.Tensor] = field(default_factory=dict)
    grad_count: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def from_kernels(cls, surface: Sequence[GaussianKernel] = (), interior: Sequence[GaussianKernel] = (),
                     sh_degree: int = 0, dtype=torch.float64) -> "GaussianScene":
        return cls(
            Population.from_kernels(surface, True, sh_degree, dtype),
            Population.from_kernels(interior, False, sh_degree, dtype),
        )

    def populations(self):
        return {"surface": self.surface, "interior": self.interior}

    def clone(self) -> "GaussianScene":
        return GaussianScene(
            self.surface.clone(), self.interior.clone(),
            {k: (m.clone(), v.clone()) for k, (m, v) in self.moments.items()},
            {k: v.clone() for k, v in self.grad_accum.items()},
            {k: v.clone() for k, v in self.grad_count.items()},
        )

    def reset_densify_stats(self) -> None:
        for name, pop in self.populations().items():
            dt = pop.dtype
            self.grad_accum[name] = torch.zeros(len(pop), dtype=dt)
            self.grad_count[name] = torch.zeros(len(pop), dtype=dt)


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera. Camera space is x right, y down, z forward (looking along +z).

    ``rotation``/``translation`` map camera coordinates to world coordinates.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    ground_truth: Optional[np.ndarray] = None
    light_intensity: np.ndarray = field(default_factory=lambda: np.ones(3))
    name: str = ""

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        R = np.asarray(self.rotation, dtype=np.float64)
        if K.shape != (3, 3) or abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper triangular with positive focal lengths")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "light_intensity", np.broadcast_to(
            np.asarray(self.light_intensity, dtype=np.float64), (3,)).copy())

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def world_to_camera(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation.T
        M[:3, 3] = -self.rotation.T @ self.translation
        return M

    @property
    def camera_to_world(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized camera-space rays K^-1 (u, v, 1) for every pixel, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        pix = np.stack([u, v, np.ones_like(u)], -1)
        return pix @ np.linalg.inv(self.intrinsics).T

    def with_ground_truth(self, image) -> "CameraView":
        return replace(self, ground_truth=image)

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0), *, fx: float, width: int, height: int,
                fy: Optional[float] = None, **kw) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(up, fwd)) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        K = np.array([[fx, 0.0, width / 2.0], [0.0, fy or fx, height / 2.0], [0.0, 0.0, 1.0]])
        return CameraView(K, R, eye, width, height, **kw)


@dataclass
class Hyperparameters:
    lambda1: float = 0.2  # L1 vs SSIM mix
    lambda2_start: float = 0.0025  # single-view normal consistency, ramped over stage 2
    lambda2_end: float = 0.9
    lambda3: float = 0.01  # multi-view depth consistency
    lambda4: float = 0.01  # interior containment
    lambda5: float = 0.01  # roughness smoothness
    lambda6: float = 0.01  # base-color smoothness
    gamma: float = 0.3
    f0: float = 0.04
    sh_degree: int = 2
    scatter_sh_degree: Optional[int] = None  # SH_scatter bands; None follows sh_degree
    iterations: int = 3000
    stage1_fraction: float = 0.3
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_until_fraction: float = 0.8
    split_scale_fraction: float = 0.01
    prune_opacity: float = 0.005
    max_kernels: int = 5000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_material: float = 5e-3
    diffuse_fresnel_mode: str = "literal"
    alpha_max: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.f0 <= 1.0:
            raise ValueError("f0 must lie in [0, 1]")
        if self.sh_degree > MAX_SH_DEGREE:
            raise ValueError(f"sh_degree above {MAX_SH_DEGREE} is not supported")
        if self.scatter_sh_degree is not None and not 0 <= self.scatter_sh_degree <= MAX_SH_DEGREE:
            raise ValueError(f"scatter_sh_degree must lie in [0, {MAX_SH_DEGREE}]")
        if self.diffuse_fresnel_mode not in ("literal", "transmission"):
            raise ValueError("diffuse_fresnel_mode must be 'literal' or 'transmission'")

    @property
    def scatter_degree(self) -> int:
        return self.sh_degree if self.scatter_sh_degree is None else self.scatter_sh_degree

    @property
    def stage1_iterations(self) -> int:
        return int(round(self.iterations * self.stage1_fraction))

    def lambda2_at(self, iteration: int) -> float:
        """Linear ramp across stage 2; zero during stage 1."""
        s1 = self.stage1_iterations
        if iteration < s1:
            return 0.0
        span = max(self.iterations - 1 - s1, 1)
        t = min(max((iteration - s1) / span, 0.0), 1.0)
        return self.lambda2_start + t * (self.lambda2_end - self.lambda2_start)
