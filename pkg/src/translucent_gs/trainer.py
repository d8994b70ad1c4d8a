"""Two-stage optimization of surface and interior kernels."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import GeometryMaps, unbiased_depth
from .losses import (
    geometric_loss,
    interior_containment_loss,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from .meshing import psnr
from .scene import (
    GaussianScene,
    Hyperparameters,
    Population,
    inverse_sigmoid,
    num_sh_bases,
    quat_to_rotmat,
    rgb_to_sh_dc,
)
from .shading import render_pbr
from .splat import GBuffer, RenderSettings, render

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-15


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hp: Hyperparameters = field(default_factory=Hyperparameters)
    seed: int = 0
    n_surface: int = 2000
    n_interior: int = 600
    interior_shrink: float = 0.7
    use_fresnel: bool = True
    use_pbr: bool = True
    use_interior: bool = True
    n_neighbors: int = 2
    sh_unlock_interval: int = 1000
    log_interval: int = 1
    eval_interval: int = 500
    checkpoint_interval: int = 0
    dtype: str = "float64"
    out_dir: Optional[str] = None

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def ablation(cls, name: str, **kw) -> "TrainConfig":
        """Named variants: full, no_pbr, no_fresnel, no_interior."""
        flags = {
            "full": {},
            "no_pbr": {"use_pbr": False},
            "no_fresnel": {"use_fresnel": False},
            "no_interior": {"use_interior": False, "use_fresnel": False},
        }
        if name not in flags:
            raise ValueError(f"unknown ablation {name!r}")
        return cls(**{**flags[name], **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hp = Hyperparameters(**d.pop("hp", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(hp=hp, **d)


@dataclass
class TrainState:
    iteration: int = 0
    stage: int = 1
    seed: int = 0
    steps: Dict[str, int] = field(default_factory=dict)  # Adam step count per population
    hp: Optional[Hyperparameters] = None


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def adam_update(param, grad, m, v, step: int, lr: float):
    """One bias-corrected adaptive-moment step; returns (new param, m, v)."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} does not match parameter {tuple(param.shape)}")
    m = BETA1 * m + (1 - BETA1) * grad
    v = BETA2 * v + (1 - BETA2) * grad * grad
    m_hat = m / (1 - BETA1**step)
    v_hat = v / (1 - BETA2**step)
    return param - lr * m_hat / (torch.sqrt(v_hat) + ADAM_EPS), m, v


def learning_rates(hp: Hyperparameters, iteration: int, extent: float) -> Dict[str, float]:
    t = min(max(iteration / max(hp.iterations - 1, 1), 0.0), 1.0)
    pos = math.exp((1 - t) * math.log(hp.lr_position) + t * math.log(hp.lr_position_final)) * extent
    return {
        "means": pos,
        "quats": hp.lr_rotation,
        "log_scales": hp.lr_scale,
        "opacity_logits": hp.lr_opacity,
        "sh": hp.lr_sh,
        "sh_scatter": hp.lr_sh,
        "base_color_logits": hp.lr_material,
        "roughness_logits": hp.lr_material,
    }


@torch.no_grad()
def optimizer_step(scene: GaussianScene, state: TrainState, lrs: Dict[str, float]) -> None:
    """Apply one step to every parameter that received a gradient."""
    for pname, pop in scene.populations().items():
        if len(pop) == 0:
            continue
        if not any(t.grad is not None for t in pop.params.values()):
            continue
        step = state.steps.get(pname, 0) + 1
        state.steps[pname] = step
        for name, t in pop.params.items():
            g = t.grad if t.grad is not None else torch.zeros_like(t)
            key = (pname, name)
            m, v = scene.moments.get(key, (torch.zeros_like(t), torch.zeros_like(t)))
            new, m, v = adam_update(t.detach(), g, m, v, step, lrs[name])
            if name == "quats":
                new = new / new.norm(dim=-1, keepdim=True)
            scene.moments[key] = (m, v)
            pop.params[name] = new.requires_grad_(True)


# --------------------------------------------------------------------------
# initialization and density control
# --------------------------------------------------------------------------


def _sample_ball(rng: np.random.Generator, n: int, center, radius: float) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return np.asarray(center) + d * r[:, None]


def _nn_scales(points: np.ndarray) -> np.ndarray:
    k = min(4, len(points))
    if k < 2:
        return np.full(len(points), 0.1)
    d, _ = cKDTree(points).query(points, k=k)
    return np.maximum(d[:, 1:].mean(1), 1e-7)


def make_population(points: np.ndarray, is_surface: bool, sh_degree: int, dtype=torch.float64,
                    opacity: float = 0.1, with_scatter: bool = False,
                    scatter_degree: Optional[int] = None) -> Population:
    n = len(points)
    t = lambda a: torch.as_tensor(a, dtype=dtype)

    def gray_sh(degree):
        sh = np.zeros((n, num_sh_bases(degree), 3))
        sh[:, 0] = rgb_to_sh_dc([0.5, 0.5, 0.5])
        return sh

    sh = gray_sh(sh_degree)
    scales = np.log(_nn_scales(points))[:, None].repeat(3, 1) if n else np.zeros((0, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    p = {
        "means": t(points),
        "quats": t(quats),
        "log_scales": t(scales),
        "opacity_logits": inverse_sigmoid(t(np.full(n, opacity))),
        "sh": t(sh),
    }
    if is_surface:
        p["base_color_logits"] = t(np.zeros((n, 3)))
        p["roughness_logits"] = t(np.zeros(n))
        if with_scatter:
            p["sh_scatter"] = t(gray_sh(sh_degree if scatter_degree is None else scatter_degree))
    return Population(p, is_surface)


def init_scene(center, radius: float, n_surface: int, n_interior: int = 0, seed: int = 0, sh_degree: int = 2,
               shrink: float = 0.7, dtype=torch.float64, surface_scatter: bool = False,
               scatter_degree: Optional[int] = None) -> GaussianScene:
    """Random kernels: surface ones in the bounding sphere, interior ones in the shrunk sphere."""
    if radius <= 0:
        raise ValueError("bounding sphere radius must be positive")
    if n_surface <= 0 or n_interior < 0:
        raise ValueError("kernel counts must be positive")
    rng = np.random.default_rng(seed)
    surf = make_population(_sample_ball(rng, n_surface, center, radius), True, sh_degree, dtype,
                           with_scatter=surface_scatter, scatter_degree=scatter_degree)
    sd = sh_degree if scatter_degree is None else scatter_degree
    inte = make_population(_sample_ball(rng, n_interior, center, shrink * radius), False, sd, dtype)
    scene = GaussianScene(surf, inte)
    scene.reset_densify_stats()
    return scene


def _extend_stats(scene: GaussianScene, name: str, keep: torch.Tensor, n_new: int):
    for d in (scene.grad_accum, scene.grad_count):
        old = d[name][keep] if name in d else torch.zeros(int(keep.sum()))
        d[name] = torch.cat([old, torch.zeros(n_new, dtype=old.dtype)])


@torch.no_grad()
def densify_and_prune(scene: GaussianScene, grad_threshold: float, split_scale: float, prune_opacity: float,
                      generator: Optional[torch.Generator] = None, max_kernels: Optional[int] = None) -> Dict[str, dict]:
    """Clone small / split large high-gradient kernels, then drop near-transparent ones.

    Each population is handled on its own; new kernels get zero optimizer moments.
    """
    report = {}
    total = sum(len(p) for p in scene.populations().values())
    budget = None if max_kernels is None else max(max_kernels - total, 0)
    for name, pop in scene.populations().items():
        n = len(pop)
        if n == 0:
            report[name] = {"cloned": 0, "split": 0, "pruned": 0}
            continue
        p = {k: v.detach() for k, v in pop.params.items()}
        acc = scene.grad_accum.get(name, torch.zeros(n, dtype=p["means"].dtype))
        cnt = scene.grad_count.get(name, torch.zeros(n, dtype=p["means"].dtype))
        mean_grad = torch.where(cnt > 0, acc / cnt.clamp(min=1), torch.zeros_like(acc))
        hot = mean_grad > grad_threshold
        scales = torch.exp(p["log_scales"])
        big = scales.max(-1).values > split_scale
        clone = hot & ~big
        split = hot & big
        if budget is not None:
            # keep the hottest kernels when the budget is short; splits add one net kernel, clones one
            want = int(clone.sum() + split.sum())
            if want > budget:
                order = torch.argsort(-torch.where(hot, mean_grad, torch.full_like(mean_grad, -1.0)), stable=True)
                allowed = torch.zeros(n, dtype=torch.bool)
                allowed[order[:budget]] = True
                clone &= allowed
                split &= allowed
            budget -= int(clone.sum() + split.sum())
        new_parts = []
        if clone.any():
            new_parts.append({k: v[clone].clone() for k, v in p.items()})
        if split.any():
            idx = split.nonzero()[:, 0]
            R = quat_to_rotmat(p["quats"][idx])
            s = scales[idx]
            children = []
            for _ in range(2):
                z = torch.randn(len(idx), 3, generator=generator, dtype=s.dtype)
                offs = (R @ (z * s)[..., None])[..., 0]
                child = {k: v[idx].clone() for k, v in p.items()}
                child["means"] = p["means"][idx] + offs
                child["log_scales"] = torch.log(s / 1.6)
                children.append(child)
            new_parts += children
        keep = ~split
        merged = {k: v[keep] for k, v in p.items()}
        n_new = 0
        for part in new_parts:
            merged = {k: torch.cat([merged[k], part[k]]) for k in merged}
            n_new += len(part["means"])
        opac = torch.sigmoid(merged["opacity_logits"])
        alive = opac >= prune_opacity
        final = {k: v[alive] for k, v in merged.items()}
        # optimizer moments follow the same reindexing; new kernels start at zero
        for pname in p:
            key = (name, pname)
            if key in scene.moments:
                m, v = scene.moments[key]
                zeros = torch.zeros((n_new,) + m.shape[1:], dtype=m.dtype)
                m = torch.cat([m[keep], zeros])[alive]
                v = torch.cat([v[keep], zeros])[alive]
                scene.moments[key] = (m, v)
        new_pop = Population(final, pop.is_surface)
        new_pop.requires_grad_(True)
        if name == "surface":
            scene.surface = new_pop
        else:
            scene.interior = new_pop
        _extend_stats(scene, name, keep, n_new)
        scene.grad_accum[name] = scene.grad_accum[name][alive]
        scene.grad_count[name] = scene.grad_count[name][alive]
        report[name] = {"cloned": int(clone.sum()), "split": int(split.sum()), "pruned": int((~alive).sum())}
    return report


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def nearest_views(views, k: int) -> List[List[int]]:
    pos = np.stack([v.translation for v in views])
    out = []
    for i in range(len(views)):
        d = np.linalg.norm(pos - pos[i], axis=1)
        d[i] = np.inf
        out.append([int(j) for j in np.argsort(d, kind="stable")[: min(k, len(views) - 1)]])
    return out


class Trainer:
    def __init__(self, dataset, config: Optional[TrainConfig] = None, scene: Optional[GaussianScene] = None,
                 state: Optional[TrainState] = None):
        if not dataset.train:
            raise TrainingError("empty dataset")
        self.data = dataset
        self.cfg = config or TrainConfig()
        self.hp = self.cfg.hp
        self.dtype = self.cfg.torch_dtype
        self.extent = float(dataset.radius)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.gen = torch.Generator().manual_seed(self.cfg.seed)
        if scene is None:
            scene = init_scene(dataset.center, dataset.radius, self.cfg.n_surface, 0, self.cfg.seed,
                               self.hp.sh_degree, self.cfg.interior_shrink, self.dtype,
                               surface_scatter=not self.cfg.use_interior,
                               scatter_degree=self.hp.scatter_sh_degree)
        self.scene = scene
        for pop in scene.populations().values():
            pop.requires_grad_(True)
        if not scene.grad_accum:
            scene.reset_densify_stats()
        self.state = state or TrainState(seed=self.cfg.seed, hp=self.hp)
        self.neighbors = nearest_views(dataset.train, self.cfg.n_neighbors)
        self.gt = [torch.as_tensor(v.ground_truth, dtype=self.dtype) for v in dataset.train]
        self._order: List[int] = []
        self.history: List[dict] = []

    # -- helpers -----------------------------------------------------------
    def settings(self, iteration: int) -> RenderSettings:
        deg = min(self.hp.sh_degree, iteration // max(self.cfg.sh_unlock_interval, 1))
        return RenderSettings(f0=self.hp.f0, use_fresnel=self.cfg.use_fresnel, sh_degree=deg,
                              alpha_max=self.hp.alpha_max, dtype=self.dtype)

    def next_view(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.data.train)))
        return int(self._order.pop(0))

    def spawn_interior(self) -> None:
        rng = np.random.default_rng(self.cfg.seed + 1)
        pts = _sample_ball(rng, self.cfg.n_interior, self.data.center, self.cfg.interior_shrink * self.data.radius)
        self.scene.interior = make_population(pts, False, self.hp.scatter_degree, self.dtype)
        self.scene.interior.requires_grad_(True)
        n = len(self.scene.interior)
        self.scene.grad_accum["interior"] = torch.zeros(n, dtype=self.dtype)
        self.scene.grad_count["interior"] = torch.zeros(n, dtype=self.dtype)

    # -- one iteration -----------------------------------------------------
    def compute_losses(self, idx: int, iteration: int, stage: int):
        view = self.data.train[idx]
        gt = self.gt[idx]
        st = self.settings(iteration)
        hp = self.hp
        if stage == 1:
            g = render(self.scene, view, settings=st, surface=False, interior=False)
            l_c = photometric_loss(g.color, None, gt, hp.lambda1)
            return total_loss(l_c, hp=hp), g, {}
        g = render(self.scene, view, settings=st, interior=self.cfg.use_pbr)
        maps = GeometryMaps.from_gbuffer(g, view)
        c_pbr = None
        extra = {}
        if self.cfg.use_pbr:
            c_pbr, _ = render_pbr(g, maps.depth, maps.mask, view, hp.gamma, hp.f0,
                                  diffuse_fresnel_mode=hp.diffuse_fresnel_mode)
        l_c = photometric_loss(g.color, c_pbr, gt, hp.lambda1)
        neighbors = []
        if hp.lambda3 > 0:
            with torch.no_grad():
                for j in self.neighbors[idx]:
                    vn = self.data.train[j]
                    gn = render(self.scene, vn, settings=st, combined=False, interior=False)
                    mn = GeometryMaps.from_gbuffer(gn, vn)
                    neighbors.append((mn.depth, mn.mask, vn))
        lam2 = hp.lambda2_at(iteration)
        _, l_norm, l_mv = geometric_loss(maps.depth, maps.mask, maps.normal, view, neighbors, lam2, hp.lambda3)
        l_in = torch.zeros((), dtype=self.dtype)
        if self.cfg.use_interior and len(self.scene.interior):
            l_in = interior_containment_loss(self.scene.interior.activated()["means"], maps.depth.detach(),
                                             maps.mask, view)
        l_r = l_b = torch.zeros((), dtype=self.dtype)
        if self.cfg.use_pbr:
            l_r = smoothness_loss(g.roughness_map, gt)
            l_b = smoothness_loss(g.base_color_map, gt)
        return total_loss(l_c, l_norm, l_mv, l_in, l_r, l_b, hp=hp, **extra), g, {"lambda2": lam2}

    def step(self) -> dict:
        it = self.state.iteration
        s1 = self.hp.stage1_iterations
        stage = 1 if it < s1 else 2
        if stage == 2 and self.state.stage == 1:
            self.state.stage = 2
            if self.cfg.use_interior:
                self.spawn_interior()
            if self.cfg.out_dir:
                from .checkpoint import save_checkpoint

                save_checkpoint(self.scene, self.state, Path(self.cfg.out_dir) / "stage2_start.ply", self.cfg)
        idx = self.next_view()
        report, g, info = self.compute_losses(idx, it, stage)
        if not torch.isfinite(report.total):
            self.dump_failure(report)
            raise TrainingError(f"non-finite loss at iteration {it}: {report.as_floats()}")
        for pop in self.scene.populations().values():
            for t in pop.params.values():
                t.grad = None
        for m2 in g.means2d.values():
            if m2.requires_grad:
                m2.retain_grad()
        report.total.backward()
        self.accumulate_stats(g, self.data.train[idx])
        optimizer_step(self.scene, self.state, learning_rates(self.hp, it, self.extent))
        rec = {"iteration": it, "stage": stage, "view": idx, **report.as_floats(), **info,
               "n_surface": len(self.scene.surface), "n_interior": len(self.scene.interior)}
        if stage == 1:
            for k in ("l_surf_normal", "l_surf_multiview", "l_in", "l_sm_rough", "l_sm_base"):
                rec[k] = None
        self.maybe_densify(it)
        self.state.iteration = it + 1
        return rec

    @torch.no_grad()
    def accumulate_stats(self, g: GBuffer, view) -> None:
        half = 0.5 * max(view.width, view.height)
        for name, m2 in g.means2d.items():
            if m2.grad is None or name not in self.scene.grad_accum:
                continue
            vis = g.visible[name]
            gn = m2.grad.norm(dim=-1) * half
            if len(gn) != len(self.scene.grad_accum[name]):
                continue
            self.scene.grad_accum[name] += torch.where(vis, gn, torch.zeros_like(gn))
            self.scene.grad_count[name] += vis.to(gn.dtype)

    def maybe_densify(self, it: int) -> None:
        hp = self.hp
        if hp.densify_interval <= 0 or it == 0 or (it + 1) % hp.densify_interval:
            return
        if it >= hp.densify_until_fraction * hp.iterations:
            return
        budget = hp.max_kernels
        if self.cfg.use_interior and self.state.stage == 1:
            budget -= self.cfg.n_interior  # room for the interior kernels spawned at stage 2
        densify_and_prune(self.scene, hp.densify_grad_threshold, hp.split_scale_fraction * self.extent,
                          hp.prune_opacity, self.gen, budget)
        self.scene.reset_densify_stats()

    def dump_failure(self, report) -> None:
        if self.cfg.out_dir:
            from .checkpoint import save_checkpoint

            path = Path(self.cfg.out_dir) / "diverged.ply"
            save_checkpoint(self.scene, self.state, path, self.cfg)
            log.error("non-finite loss; state dumped to %s", path)

    @torch.no_grad()
    def evaluate(self) -> Dict[str, float]:
        views = self.data.test or self.data.train[:1]
        st = self.settings(self.state.iteration)
        vals = []
        for v in views:
            img = render(self.scene, v, settings=st, surface=False, interior=False).color
            vals.append(psnr(img.clamp(0, 1).numpy(), v.ground_truth))
        return {"psnr": float(np.mean(vals))}

    def run(self, callback: Optional[Callable[[dict], None]] = None) -> GaussianScene:
        out = Path(self.cfg.out_dir) if self.cfg.out_dir else None
        log_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_fh = open(out / "metrics.log", "a")
        try:
            while self.state.iteration < self.hp.iterations:
                rec = self.step()
                it = rec["iteration"]
                last = it + 1 == self.hp.iterations
                if self.cfg.eval_interval and ((it + 1) % self.cfg.eval_interval == 0 or last):
                    rec.update(self.evaluate())
                self.history.append(rec)
                if log_fh is not None and (it % max(self.cfg.log_interval, 1) == 0 or last or "psnr" in rec):
                    log_fh.write(format_record(rec) + "\n")
                if out is not None and self.cfg.checkpoint_interval and (it + 1) % self.cfg.checkpoint_interval == 0:
                    from .checkpoint import save_checkpoint

                    save_checkpoint(self.scene, self.state, out / f"checkpoint_{it + 1:06d}.ply", self.cfg)
                if callback is not None:
                    callback(rec)
        finally:
            if log_fh is not None:
                log_fh.close()
        return self.scene


def format_record(rec: dict) -> str:
    """One plain-text log line; terms not evaluated this iteration print as '-'."""
    parts = []
    for k, v in rec.items():
        if v is None:
            parts.append(f"{k}=-")
        elif isinstance(v, float):
            parts.append(f"{k}={v:.9g}")
        else:
            parts.append(f"{k}={v}")
    return " ".join(parts)


def train(dataset, config: Optional[TrainConfig] = None, callback=None) -> Trainer:
    """Run the full schedule; returns the trainer (scene, state and history attached)."""
    trainer = Trainer(dataset, config)
    trainer.run(callback)
    return trainer
