"""Command-line entry points: synth, train, render, mesh, eval.

Exit codes: 0 ok, 1 usage error, 2 runtime error.

Every option can also come from one YAML (or JSON) file passed with
``--config``. Top-level keys ``seed``, ``threads`` and ``f64`` set the global
flags; a section per subcommand holds that subcommand's options by their
long names (dashes or underscores). The ``train`` section may also hold a
``trainer`` mapping of trainer settings and an ``hp`` mapping of
hyperparameters. Explicit command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("translucent_gs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_options(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="YAML/JSON file with options")
    p.add_argument("--seed", type=int, default=d(None), help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=d(None), help="compute threads (default 1)")
    p.add_argument("--f64", action="store_true", default=d(None), help="force 64-bit floats")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="translucent-gs", description="Surface reconstruction of translucent objects.")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate an analytic synthetic dataset")
    _global_options(s, suppress=True)
    s.add_argument("--shape", choices=["sphere", "box", "superellipsoid"])
    s.add_argument("--views", type=int)
    s.add_argument("--res", type=int)
    s.add_argument("--out")
    s.add_argument("--size", type=float, nargs="+", help="radius, or three half-extents")
    s.add_argument("--center", type=float, nargs=3)
    s.add_argument("--exponent", type=float)
    s.add_argument("--test-every", type=int)
    s.set_defaults(shape="sphere", views=16, res=128, out="synthetic", size=None, center=[0.0, 0.0, 0.0],
                   exponent=0.5, test_every=8)

    t = sub.add_parser("train", help="optimize kernels on a dataset")
    _global_options(t, suppress=True)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--iters", type=int)
    t.add_argument("--ablation", choices=["full", "no_pbr", "no_fresnel", "no_interior"])
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(data=None, out="run", iters=None, ablation="full", resume=None)

    r = sub.add_parser("render", help="render color and G-buffer maps from a checkpoint")
    _global_options(r, suppress=True)
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--out")
    r.add_argument("--split", choices=["train", "test", "all"])
    r.add_argument("--views", nargs="*", help="view names or indices within the split")
    r.set_defaults(checkpoint=None, data=None, out="renders", split="test", views=None)

    m = sub.add_parser("mesh", help="fuse rendered depth and extract a mesh")
    _global_options(m, suppress=True)
    m.add_argument("--checkpoint")
    m.add_argument("--data")
    m.add_argument("--out", help="output .ply; an .obj is written next to it")
    m.add_argument("--resolution", type=int)
    m.set_defaults(checkpoint=None, data=None, out="mesh.ply", resolution=256)

    e = sub.add_parser("eval", help="Chamfer distance and image metrics")
    _global_options(e, suppress=True)
    e.add_argument("--mesh")
    e.add_argument("--reference")
    e.add_argument("--samples", type=int)
    e.add_argument("--radius", type=float, help="normalize Chamfer by this radius")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--report", help="write the JSON report here as well")
    e.set_defaults(mesh=None, reference=None, samples=100_000, radius=None, checkpoint=None, data=None,
                   report=None)
    return parser


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        import yaml

        data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping")
    return data


def _apply_config(args: argparse.Namespace, argv: Sequence[str], parser) -> argparse.Namespace:
    cfg = _load_config(getattr(args, "config", None))
    section = dict(cfg.get(args.command, {}) or {})
    args.trainer_cfg = section.pop("trainer", {}) or {}
    args.hp_cfg = section.pop("hp", {}) or {}
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in section.items():
        k = key.replace("-", "_")
        if not hasattr(args, k):
            raise UsageError(f"unknown option {key!r} in config section {args.command!r}")
        if k not in explicit:
            setattr(args, k, value)
    for k, default in (("seed", 0), ("threads", 1), ("f64", False)):
        if getattr(args, k, None) is None:
            setattr(args, k, cfg.get(k, default))
    return args


def _setup_threads(n: int) -> None:
    import numba
    import torch

    n = max(int(n), 1)
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .data import AnalyticScene, generate_synthetic, save_dataset, write_mesh_obj, write_mesh_ply

    if args.views < 1 or args.res < 1:
        raise UsageError("--views and --res must be positive")
    if args.size is None:
        size = (0.5,) if args.shape == "sphere" else (0.4, 0.3, 0.35)
    else:
        size = tuple(args.size)
    scene = AnalyticScene(shape=args.shape, center=np.asarray(args.center, dtype=np.float64), size=size,
                          exponent=args.exponent)
    ds, mesh, gbuffers = generate_synthetic(scene, args.views, args.res, args.seed, args.test_every)
    out = Path(args.out)
    save_dataset(ds, out, masks={name: gb["mask"] for name, gb in gbuffers.items()})
    write_mesh_ply(mesh, out / "gt_mesh.ply")
    write_mesh_obj(mesh, out / "gt_mesh.obj")
    meta = {"shape": args.shape, "center": list(map(float, scene.center)), "size": list(map(float, scene.size)),
            "views": args.views, "resolution": args.res, "seed": args.seed}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test views to {out}")
    return EXIT_OK


def _train_config(args):
    from .scene import Hyperparameters
    from .trainer import TrainConfig

    hp_kw = dict(args.hp_cfg)
    if args.iters is not None:
        hp_kw["iterations"] = args.iters
    extra = dict(args.trainer_cfg)
    extra["seed"] = args.seed
    if args.f64:
        extra["dtype"] = "float64"
    extra["out_dir"] = str(args.out)
    try:
        return TrainConfig.ablation(args.ablation, hp=Hyperparameters(**hp_kw), **extra)
    except TypeError as e:
        raise UsageError(f"bad trainer/hp option: {e}") from None


def cmd_train(args) -> int:
    import yaml

    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_dataset
    from .trainer import Trainer

    if not args.data:
        raise UsageError("train needs --data")
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    scene = state = None
    if args.resume:
        scene, state, _ = load_checkpoint(args.resume)
    trainer = Trainer(ds, cfg, scene=scene, state=state)

    def report(rec):
        if "psnr" in rec:
            log.info("iteration %d: loss %.5f, held-out PSNR %.2f dB", rec["iteration"] + 1, rec["total"], rec["psnr"])

    trainer.run(report)
    path = save_checkpoint(trainer.scene, trainer.state, out / "checkpoint.ply", cfg)
    print(f"wrote {path} ({len(trainer.scene.surface)} surface, {len(trainer.scene.interior)} interior kernels)")
    return EXIT_OK


def _settings(args, meta):
    import torch

    from .splat import RenderSettings

    hp = meta.get("hyperparameters") or {}
    trainer = meta.get("config") or {}
    dtype = torch.float64 if args.f64 or meta.get("dtype", "float64") == "float64" else torch.float32
    return RenderSettings(f0=hp.get("f0", 0.04), alpha_max=hp.get("alpha_max", 0.999),
                          use_fresnel=trainer.get("use_fresnel", True), dtype=dtype), hp


def _select_views(ds, split: str, wanted):
    views = {"train": ds.train, "test": ds.test, "all": ds.views}[split]
    if not wanted:
        return views
    out = []
    for w in wanted:
        if w.isdigit():
            i = int(w)
            if i >= len(views):
                raise UsageError(f"view index {i} out of range ({len(views)} views)")
            out.append(views[i])
        else:
            match = [v for v in views if v.name == w or Path(v.name).stem == w]
            if not match:
                raise UsageError(f"no view named {w!r}")
            out += match
    return out


def cmd_render(args) -> int:
    import torch

    from .checkpoint import load_checkpoint
    from .data import load_dataset, save_image
    from .geometry import GeometryMaps
    from .shading import render_pbr
    from .splat import render

    if not args.checkpoint or not args.data:
        raise UsageError("render needs --checkpoint and --data")
    scene, _, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    st, hp = _settings(args, meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in _select_views(ds, args.split, args.views):
        with torch.no_grad():
            g = render(scene, v, settings=st)
            maps = GeometryMaps.from_gbuffer(g, v)
            if "sh_scatter" in scene.surface.params:
                from .splat import render_scatter_map

                g.scatter_map = render_scatter_map(scene, v, st)
            c_pbr, _ = render_pbr(g, maps.depth, maps.mask, v, hp.get("gamma", 0.3), st.f0,
                                  diffuse_fresnel_mode=hp.get("diffuse_fresnel_mode", "literal"))
        stem = Path(v.name).stem
        d = maps.depth.numpy()
        dmax = float(d[maps.mask.numpy()].max()) if maps.mask.any() else 1.0
        images = {
            "color": g.color.numpy(),
            "pbr": c_pbr.numpy(),
            "base_color": g.base_color_map.numpy(),
            "roughness": np.repeat(g.roughness_map.numpy()[..., None], 3, -1),
            "normal": (g.normal_map.numpy() * 0.5 + 0.5) * maps.mask.numpy()[..., None],
            "depth": np.repeat((d / dmax)[..., None], 3, -1),
            "scatter": g.scatter_map.numpy(),
        }
        for key, img in images.items():
            save_image(out / f"{stem}_{key}.png", np.clip(img, 0.0, 1.0))
        np.savez(out / f"{stem}_maps.npz", depth=d, mask=maps.mask.numpy(), normal=g.normal_map.numpy(),
                 plane_distance=g.plane_distance_map.numpy(), surface_alpha=g.surface_alpha.numpy(),
                 color=g.color.numpy(), pbr=c_pbr.numpy())
    print(f"wrote renders to {out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset, write_mesh_obj, write_mesh_ply
    from .meshing import fuse_scene

    if not args.checkpoint or not args.data:
        raise UsageError("mesh needs --checkpoint and --data")
    scene, _, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    st, _ = _settings(args, meta)
    mesh = fuse_scene(scene, ds.train, ds.center, ds.radius, args.resolution, st)
    if mesh.is_empty:
        raise RuntimeError("fused volume holds no surface")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mesh_ply(mesh, out)
    write_mesh_obj(mesh, out.with_suffix(".obj"))
    print(f"wrote {out} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces, "
          f"watertight={mesh.is_watertight()})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import read_mesh

    report = {}
    if args.mesh or args.reference:
        if not (args.mesh and args.reference):
            raise UsageError("eval needs both --mesh and --reference for Chamfer")
        from .meshing import chamfer_distance

        a, b = read_mesh(args.mesh), read_mesh(args.reference)
        cd = chamfer_distance(a, b, args.samples, args.seed)
        report["chamfer"] = cd
        if args.radius:
            report["chamfer_relative"] = cd / args.radius
    if args.checkpoint:
        if not args.data:
            raise UsageError("image metrics need --data")
        import torch

        from .checkpoint import load_checkpoint
        from .data import load_dataset
        from .meshing import image_metrics
        from .splat import render

        from .geometry import GeometryMaps
        from .shading import render_pbr
        from .splat import render_scatter_map

        scene, _, meta = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.data)
        st, hp = _settings(args, meta)
        views = ds.test or ds.train
        ps, ss, pp, sp = [], [], [], []
        for v in views:
            with torch.no_grad():
                g = render(scene, v, settings=st)
                maps = GeometryMaps.from_gbuffer(g, v)
                if "sh_scatter" in scene.surface.params:
                    g.scatter_map = render_scatter_map(scene, v, st)
                c_pbr, _ = render_pbr(g, maps.depth, maps.mask, v, hp.get("gamma", 0.3), st.f0,
                                      diffuse_fresnel_mode=hp.get("diffuse_fresnel_mode", "literal"))
            p, s = image_metrics(np.clip(g.color.double().numpy(), 0, 1), v.ground_truth)
            ps.append(p)
            ss.append(s)
            p, s = image_metrics(np.clip(c_pbr.double().numpy(), 0, 1), v.ground_truth)
            pp.append(p)
            sp.append(s)
        # psnr/ssim score C_SH; the *_pbr keys score the deferred-shading render
        report.update({"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "psnr_pbr": float(np.mean(pp)),
                       "ssim_pbr": float(np.mean(sp)), "views": len(views)})
        report["mean_surface_opacity"] = float(scene.surface.activated()["opacities"].mean())
    if not report:
        raise UsageError("eval needs --mesh/--reference and/or --checkpoint/--data")
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "mesh": cmd_mesh, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args, argv, parser)
        _setup_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
