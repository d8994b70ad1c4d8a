"""Kernel checkpoints: a binary little-endian PLY plus a JSON sidecar.

Every kernel of both populations is one PLY vertex. Stored values are the
raw (pre-activation) parameters: ``scale_*`` are log-scales, ``opacity`` is
the opacity logit, ``base_color_*`` and ``roughness`` are logits. The
``population`` column is 0 for surface and 1 for interior kernels; interior
rows carry zeros in the material columns. Optimizer moments and
densification statistics are extra ``adam_m_*``, ``adam_v_*`` and
``densify_*`` columns so a checkpoint resumes bitwise.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import _ply_header, read_ply_header
from .scene import GaussianScene, Hyperparameters, Population

MAGIC = "translucent-gs-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Corrupt or unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


def _columns(sh_bases: int, scatter: bool, scatter_bases: Optional[int] = None) -> List[Tuple[str, str, Optional[int]]]:
    """(column name, parameter, component) in file order.

    ``sh_bases`` is the widest ``sh`` of either population; narrower rows are zero padded.
    """
    scatter_bases = sh_bases if scatter_bases is None else scatter_bases
    cols = [("x", "means", 0), ("y", "means", 1), ("z", "means", 2)]
    cols += [(f"rot_{i}", "quats", i) for i in range(4)]
    cols += [(f"scale_{i}", "log_scales", i) for i in range(3)]
    cols.append(("opacity", "opacity_logits", None))
    cols += [(f"f_dc_{c}", "sh", c) for c in range(3)]
    # rest coefficients channel-major, as in the usual splat layout
    cols += [(f"f_rest_{c * (sh_bases - 1) + k - 1}", "sh", (k, c)) for c in range(3) for k in range(1, sh_bases)]
    cols += [(f"base_color_{c}", "base_color_logits", c) for c in range(3)]
    cols.append(("roughness", "roughness_logits", None))
    if scatter:
        cols += [(f"scatter_dc_{c}", "sh_scatter", c) for c in range(3)]
        cols += [(f"scatter_rest_{c * (scatter_bases - 1) + k - 1}", "sh_scatter", (k, c))
                 for c in range(3) for k in range(1, scatter_bases)]
    return cols


def _get(t: torch.Tensor, comp) -> np.ndarray:
    a = t.detach().cpu().to(torch.float64).numpy()
    if comp is None:
        return a
    if isinstance(comp, tuple):
        if comp[0] >= a.shape[1]:
            return np.zeros(len(a))
        return a[:, comp[0], comp[1]]
    if a.ndim == 3:  # sh dc
        return a[:, 0, comp]
    return a[:, comp]


def _set(store: Dict[str, np.ndarray], name: str, comp, col: np.ndarray, n: int, shape) -> None:
    arr = store.setdefault(name, np.zeros((n,) + shape))
    if comp is None:
        arr[:] = col
    elif isinstance(comp, tuple):
        arr[:, comp[0], comp[1]] = col
    elif arr.ndim == 3:
        arr[:, 0, comp] = col
    else:
        arr[:, comp] = col


def _param_shape(name: str, sh_bases: int, scatter_bases: int):
    return {"means": (3,), "quats": (4,), "log_scales": (3,), "opacity_logits": (), "sh": (sh_bases, 3),
            "sh_scatter": (scatter_bases, 3), "base_color_logits": (3,), "roughness_logits": ()}[name]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def save_checkpoint(scene: GaussianScene, state, path, config=None) -> Path:
    """Write ``path`` (PLY) and ``path.json`` (metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pop_bases = {k: int(p.params["sh"].shape[1]) for k, p in scene.populations().items()}
    sh_bases = max(pop_bases.values())
    scatter = "sh_scatter" in scene.surface.params
    scatter_bases = int(scene.surface.params["sh_scatter"].shape[1]) if scatter else sh_bases
    cols = _columns(sh_bases, scatter, scatter_bases)
    names = [c[0] for c in cols] + ["population"]
    blocks = []
    moment_names = []
    pops = scene.populations()
    # moment columns follow the parameter columns, one pair per stored column
    has_moments = bool(scene.moments)
    if has_moments:
        moment_names = [f"adam_m_{c[0]}" for c in cols] + [f"adam_v_{c[0]}" for c in cols]
    stat_names = ["densify_grad_accum", "densify_grad_count"]
    names += moment_names + stat_names
    for pid, (pname, pop) in enumerate(pops.items()):
        n = len(pop)
        block = np.zeros((n, len(names)))
        for j, (_, param, comp) in enumerate(cols):
            if param in pop.params:
                block[:, j] = _get(pop.params[param], comp)
        block[:, len(cols)] = pid
        if has_moments:
            off = len(cols) + 1
            for j, (_, param, comp) in enumerate(cols):
                mv = scene.moments.get((pname, param))
                if mv is not None and len(mv[0]) == n:
                    block[:, off + j] = _get(mv[0], comp)
                    block[:, off + len(cols) + j] = _get(mv[1], comp)
        for j, d in enumerate((scene.grad_accum, scene.grad_count)):
            v = d.get(pname)
            if v is not None and len(v) == n:
                block[:, len(names) - 2 + j] = v.detach().cpu().to(torch.float64).numpy()
        blocks.append(block)
    table = np.concatenate(blocks) if blocks else np.zeros((0, len(names)))
    body = np.ascontiguousarray(table, dtype="<f8").tobytes()
    header = _ply_header(len(table), names, comments=[f"{MAGIC} {FORMAT_VERSION}"])
    data = header + body
    path.write_bytes(data)
    hp = getattr(state, "hp", None)
    meta = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "iteration": int(getattr(state, "iteration", 0)),
        "stage": int(getattr(state, "stage", 1)),
        "seed": int(getattr(state, "seed", 0)),
        "adam_steps": dict(sorted(getattr(state, "steps", {}).items())),
        "sh_bases": int(sh_bases),
        "sh_bases_by_population": pop_bases,
        "scatter_bases": scatter_bases,
        "surface_scatter": scatter,
        "has_moments": has_moments,
        "moment_params": sorted({f"{p}/{q}" for p, q in scene.moments}),
        "counts": {k: len(v) for k, v in pops.items()},
        "dtype": str(scene.surface.dtype).replace("torch.", ""),
        "hyperparameters": _jsonable(hp.__dict__) if hp is not None else None,
        # the output location is not part of the model, so identical runs written elsewhere match
        "config": _jsonable({k: v for k, v in config.to_dict().items() if k != "out_dir"}) if config is not None else None,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Returns (scene, state, metadata)."""
    from .trainer import TrainState

    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    if not side.exists():
        raise CheckpointError(f"missing checkpoint metadata {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint metadata {side}: {e}") from None
    if meta.get("magic") != MAGIC:
        raise CheckpointError(f"{side} is not a checkpoint (bad magic)")
    version = meta.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version} (reader supports {FORMAT_VERSION})")
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
        raise CheckpointError(f"corrupt checkpoint {path}: checksum mismatch")
    try:
        comments, props, counts, _, off = read_ply_header(data)
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from None
    if f"{MAGIC} {FORMAT_VERSION}" not in comments and not any(c.startswith(MAGIC) for c in comments):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    names = props["vertex"]
    n = counts["vertex"]
    if len(data) - off != n * len(names) * 8:
        raise CheckpointError(f"corrupt checkpoint {path}: size mismatch")
    table = np.frombuffer(data, "<f8", count=n * len(names), offset=off).reshape(n, len(names))
    col = {nm: i for i, nm in enumerate(names)}
    sh_bases = int(meta["sh_bases"])
    scatter = bool(meta["surface_scatter"])
    scatter_bases = int(meta.get("scatter_bases", sh_bases))
    pop_bases = meta.get("sh_bases_by_population", {})
    cols = _columns(sh_bases, scatter, scatter_bases)
    dtype = torch.float64 if meta.get("dtype", "float64") == "float64" else torch.float32
    moment_params = {tuple(s.split("/")) for s in meta.get("moment_params", [])}
    pops, moments, accum, count = {}, {}, {}, {}
    for pid, pname in enumerate(("surface", "interior")):
        rows = table[table[:, col["population"]] == pid]
        m = len(rows)
        is_surface = pid == 0
        vals, mvals, vvals = {}, {}, {}
        for cname, param, comp in cols:
            if not is_surface and param in ("base_color_logits", "roughness_logits", "sh_scatter"):
                continue
            shape = _param_shape(param, int(pop_bases.get(pname, sh_bases)), scatter_bases)
            if isinstance(comp, tuple) and param == "sh" and comp[0] >= shape[0]:
                continue
            _set(vals, param, comp, rows[:, col[cname]], m, shape)
            if (pname, param) in moment_params:
                _set(mvals, param, comp, rows[:, col[f"adam_m_{cname}"]], m, shape)
                _set(vvals, param, comp, rows[:, col[f"adam_v_{cname}"]], m, shape)
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
        pops[pname] = Population({k: t(v) for k, v in vals.items()}, is_surface)
        for k in mvals:
            moments[(pname, k)] = (t(mvals[k]), t(vvals[k]))
        accum[pname] = t(rows[:, col["densify_grad_accum"]])
        count[pname] = t(rows[:, col["densify_grad_count"]])
    scene = GaussianScene(pops["surface"], pops["interior"], moments, accum, count)
    hp = Hyperparameters(**meta["hyperparameters"]) if meta.get("hyperparameters") else None
    state = TrainState(iteration=meta["iteration"], stage=meta["stage"], seed=meta["seed"],
                       steps={k: int(v) for k, v in meta.get("adam_steps", {}).items()}, hp=hp)
    return scene, state, meta
