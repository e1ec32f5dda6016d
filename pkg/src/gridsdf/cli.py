"""Command-line entry point: ``gridsdf <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from . import checkpoint
from .autodiff import NonFiniteLossError
from .config import ConfigError, RunConfig, defaults_help, load_config
from .logs import RunLog, curves, read_log

log = logging.getLogger("gridsdf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.run.dtype == "float64" else torch.float32


def _setup(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    torch.set_num_threads(cfg.run.threads)
    torch.manual_seed(cfg.run.seed)
    cfg.log_sources(log)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_train_prior(args) -> int:
    from .prior import field_from_settings, mesh_corpus_ingest, prior_settings, sphere_corpus, train_prior

    cfg = _setup(args)
    if args.spheres:
        lo, hi, n = args.spheres.split(":")
        corpus = sphere_corpus(np.linspace(float(lo), float(hi), int(n)), cfg.prior.samples_per_mesh, cfg.run.seed)
    else:
        paths = sorted(Path(args.corpus).glob("*.obj"))
        if not paths:
            raise FileNotFoundError(f"no .obj meshes in {args.corpus}")
        corpus = mesh_corpus_ingest(paths, cfg.prior.samples_per_mesh, cfg.run.seed)
    field = field_from_settings(cfg)
    out = Path(args.out)
    run_log = RunLog(args.log or out.with_suffix(".log.jsonl"))
    run_log.write({"kind": "config", "values": cfg.as_dict(), "sources": cfg.sources})
    train_prior(field, corpus, *prior_settings(cfg), run_log)
    meta = {"kind": "prior", "corpus": [s.scene_id for s in corpus],
            "normalization": {s.scene_id: [s.scale, list(map(float, s.offset))] for s in corpus}}
    checkpoint.save(out, field, meta=meta)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .mesh import write_obj
    from .recon import field_from_prior, field_without_prior, recon_settings, reconstruct, render_images
    from .scene import _to_u8, load_scene
    from PIL import Image

    cfg = _setup(args)
    bundle = load_scene(args.scene).subset(args.views)
    prior, _, _ = checkpoint.load(args.prior)
    prior = prior.to(_dtype(cfg))
    if args.no_prior:
        field = field_without_prior(prior, bundle.scene_id, cfg.run.seed)
    else:
        field = field_from_prior(prior, bundle.scene_id)
    rc, sched = recon_settings(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_log = RunLog(out / "log.jsonl")
    run_log.write({"kind": "config", "values": cfg.as_dict(), "sources": cfg.sources})
    res = reconstruct(bundle, field, rc, sched, run_log)
    write_obj(res.mesh, out / "mesh.obj")
    for k, img in enumerate(render_images(res.field, res.render, bundle, rc)):
        Image.fromarray(_to_u8(img)).save(out / f"render_{k:02d}.png")
    checkpoint.save(out / "field.ckpt", res.field, res.render, meta={"kind": "reconstruction"})
    _write_json(out / "report.json", res.report.record(include_timings=False))
    _write_json(out / "timings.json", res.report.timings)
    print(json.dumps(res.report.record(), sort_keys=True))
    return EXIT_OK


def cmd_synth_scene(args) -> int:
    from .scene import save_scene, synth_scene

    spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    if not isinstance(spec, dict):
        raise ConfigError([f"scene spec {args.spec} must be a mapping"])
    bundle = synth_scene(spec)
    save_scene(bundle, args.out)
    print(f"wrote {len(bundle.views)} views to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .mesh import chamfer_unidirectional, oversample, read_obj
    from .recon import EvalReport

    cfg = _setup(args)
    gt = np.load(args.gt) if args.gt.endswith(".npy") else read_obj(args.gt).vertices
    pts = oversample(read_obj(args.mesh), cfg.eval.oversample_points, cfg.eval.min_spacing, cfg.run.seed)
    rep = EvalReport(chamfer_unidirectional(gt, pts), len(gt), len(pts))
    print(json.dumps(rep.record(include_timings=False), sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_intersect, csv_rows

    cfg = _setup(args)
    i = cfg.intersect
    kw = ({"n_coarse": i.n_coarse, "n_fine": i.n_fine} if args.method == "sampled"
          else {"max_iters": i.sphere_max_iters, "surface_eps": i.sphere_eps})
    row = bench_intersect(args.scene, args.rays, args.method, args.threads or cfg.run.threads, cfg.run.seed, **kw)
    sys.stdout.write(csv_rows([row], header=not args.no_header))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    torch.set_num_threads(args.threads)
    results = run_suite(args.trials, args.seed)
    for r in results:
        print(r.line())
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e}; {'all checks pass' if all(r.passed for r in results) else 'FAILED'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_replay(args) -> int:
    cols = curves(read_log(args.log), args.kind)
    if not cols:
        print(f"no records of kind {args.kind!r}", file=sys.stderr)
        return EXIT_OK
    keys = sorted(cols)
    n = max(len(v) for v in cols.values())
    print(",".join(keys))
    for row in range(n):
        print(",".join(repr(cols[k][row]) if row < len(cols[k]) else "" for k in keys))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridsdf", description="Grid SDF surface reconstruction toolkit.",
                                     epilog=defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def configurable(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration key (the config file takes priority)")

    p = sub.add_parser("train-prior", help="train the shape prior on a mesh corpus",
                       epilog=defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="directory of .obj meshes")
    src.add_argument("--spheres", metavar="LO:HI:N", help="analytic sphere corpus with N radii in [LO, HI]")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="line-delimited training log (default: next to the checkpoint)")
    configurable(p)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("reconstruct", help="reconstruct a scene from posed images")
    p.add_argument("--scene", required=True, help="scene directory written by synth-scene")
    p.add_argument("--prior", required=True, help="prior checkpoint")
    p.add_argument("--views", type=int, choices=(1, 3, 6), default=6)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-prior", action="store_true", help="ablation: random decoder, no pretrained weights")
    configurable(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("synth-scene", help="render a synthetic scene from an analytic SDF")
    p.add_argument("--spec", required=True, help="YAML or JSON scene description")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("eval", help="unidirectional Chamfer distance from ground truth to a mesh")
    p.add_argument("--gt", required=True, help="ground-truth points (.npy) or mesh (.obj)")
    p.add_argument("--mesh", required=True, help="reconstructed mesh (.obj)")
    configurable(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-intersect", help="time an intersection method on an analytic scene")
    p.add_argument("--scene", required=True, help="analytic scene name")
    p.add_argument("--rays", type=int, default=10000)
    p.add_argument("--method", choices=("sampled", "sphere"), required=True)
    p.add_argument("--threads", type=int, default=None, help="thread count (default: run.threads)")
    p.add_argument("--no-header", action="store_true", help="omit the CSV header line")
    configurable(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replay-log", help="print the curves of a run log as CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--kind", default="epoch")
    p.set_defaults(func=cmd_replay)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .mesh import EmptySurfaceError
    from .recon import SurfaceLostError
    from .scene import SceneSpecError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, SceneSpecError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, SurfaceLostError, EmptySurfaceError, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
