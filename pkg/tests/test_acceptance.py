"""End-to-end acceptance checks at desk scale.

Each test prints one ``criterion k: PASS/FAIL`` line, repeated in the
terminal summary. The prior run is shared by criteria 3, 4 and 6 and the
reconstruction runs by criteria 3 and 6. Expect roughly half an hour on one
CPU core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from gridsdf import analytic, checkpoint
from gridsdf.bench import bench_intersect, compare_methods, random_rays
from gridsdf.cli import run as cli_run
from gridsdf.config import load_config
from gridsdf.field import corner_coordinates, interpolate
from gridsdf.gradcheck import run_suite
from gridsdf.logs import RunLog
from gridsdf.mesh import EmptySurfaceError
from gridsdf.prior import STAGE_GROUPS, field_from_settings, prior_settings, sphere_corpus, train_prior
from gridsdf.recon import field_from_prior, field_without_prior, recon_settings, reconstruct, render_images
from gridsdf.render import loss_normal
from gridsdf.scene import synth_scene

pytestmark = pytest.mark.slow

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
DT = torch.float64


@pytest.fixture(scope="module")
def desk():
    cfg = load_config(DESK)
    torch.set_num_threads(cfg.run.threads)
    return cfg


@pytest.fixture(scope="module")
def prior_run(desk):
    corpus = sphere_corpus(np.linspace(0.3, 0.6, 8), desk.prior.samples_per_mesh, desk.run.seed)
    field = field_from_settings(desk)
    t0 = time.perf_counter()
    res = train_prior(field, corpus, *prior_settings(desk), RunLog())
    return res.field, corpus, res.log, time.perf_counter() - t0


@pytest.fixture(scope="module")
def recon_runs(desk, prior_run):
    prior = prior_run[0]
    rc, sched = recon_settings(desk)
    # 64-pixel views keep four runs inside the time budget on one core
    bundle = synth_scene({"seed": desk.run.seed, "resolution": 64})
    runs = {}
    for name, views, use_prior in (("6", 6, True), ("3", 3, True), ("1", 1, True), ("6-no-prior", 6, False)):
        sub = bundle.subset(views)
        field = (field_from_prior(prior, sub.scene_id) if use_prior
                 else field_without_prior(prior, sub.scene_id, desk.run.seed))
        t0 = time.perf_counter()
        try:
            res = reconstruct(sub, field, rc, sched, RunLog())
            chamfer = res.report.chamfer
        except EmptySurfaceError:
            # no zero level set left to mesh: the reconstruction failed outright
            res, chamfer = None, math.inf
        runs[name] = {"result": res, "chamfer": chamfer, "seconds": time.perf_counter() - t0, "bundle": sub}
    return runs


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_gradient_suite(acceptance_line):
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    results = run_suite(trials=100, seed=0)
    seconds = time.perf_counter() - t0
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results) and all(r.trials >= 100 for r in results) and seconds <= 120
    worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
    acceptance_line(1, ok, f"{len(results)} checks x 100 trials, worst {worst.name} "
                           f"{worst.max_rel_error:.2e} (tol {worst.tolerance:.0e}), {seconds:.0f} s (limit 120 s)")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_interpolation_exactness(acceptance_line):
    gen = torch.Generator().manual_seed(0)
    worst_rel, corners_exact = 0.0, True
    for level in (4, 5, 6):
        corners = corner_coordinates(level)
        a = torch.randn(8, 3, generator=gen, dtype=DT)
        b = torch.randn(8, generator=gen, dtype=DT)
        grid = corners @ a.T + b
        x = torch.rand(10_000, 3, generator=gen, dtype=DT) * 2 - 1
        got, want = interpolate(grid, x), x @ a.T + b
        worst_rel = max(worst_rel, float((got - want).norm() / want.norm()))
        rnd = torch.randn(grid.shape, generator=gen, dtype=DT)
        corners_exact &= torch.equal(interpolate(rnd, corners.reshape(-1, 3)), rnd.reshape(-1, 8))
    ok = worst_rel <= 1e-12 and corners_exact
    acceptance_line(2, ok, f"affine relative error {worst_rel:.1e} (limit 1e-12), corners bit-exact: {corners_exact}")
    assert ok


# -- 3 ----------------------------------------------------------------------------


def _frozen_groups_unchanged(records, init, live_of):
    prev = init
    for rec in records:
        live = set(live_of(rec))
        for group, digest in rec["checksums"].items():
            if group not in live and digest != prev[group]:
                return False
        prev = rec["checksums"]
    return True


def test_criterion_3_schedule_conformance(acceptance_line, prior_run, recon_runs):
    log = prior_run[2]
    init = log.of_kind("init")[0]["checksums"]
    epochs = log.of_kind("epoch")
    prior_sets = all(rec["live"] == rec["updated"] == sorted(STAGE_GROUPS[rec["stage"]]) for rec in epochs)
    stage_spans = [rec["stage"] for rec in epochs]
    n = len(epochs) // 7
    spans_ok = stage_spans == ["L4"] * n + ["L5"] * 2 * n + ["L6"] * 4 * n
    prior_frozen = _frozen_groups_unchanged(epochs, init, lambda r: r["live"])

    rlog = recon_runs["6"]["result"].log
    rinit = rlog.of_kind("init")[0]["checksums"]
    repochs = rlog.of_kind("epoch")
    s1 = [r for r in repochs if r["stage"] == "S1"]
    s2 = [r for r in repochs if r["stage"] == "S2"]
    recon_sets = (len(s1) == 30 and len(s2) == 70
                  and all("decoder" not in r["updated"] and "decoder" not in r["live"] for r in s1)
                  and all("decoder" in r["updated"] for r in s2)
                  and all({"latent", "grid_l4", "grid_l5", "grid_l6"} <= set(r["updated"]) for r in s1))
    decoder_fixed = all(r["checksums"]["decoder"] == rinit["decoder"] for r in s1)
    no_eik = all(r["eikonal_weight"] == 0.0 and "eik" not in r["loss"] for r in repochs)
    ok = prior_sets and spans_ok and prior_frozen and recon_sets and decoder_fixed and no_eik
    acceptance_line(3, ok, f"prior live/updated sets {prior_sets}, stage spans {spans_ok}, frozen bytes {prior_frozen}; "
                           f"recon stage sets {recon_sets}, decoder fixed in S1 {decoder_fixed}, eikonal off {no_eik}")
    assert ok


# -- 4 ----------------------------------------------------------------------------


def _moving_average_rises(values, window=20):
    if len(values) < window + 1:
        return 0
    v = np.convolve(values, np.ones(window) / window, mode="valid")
    return int((np.diff(v) > 1e-12).sum())


def test_criterion_4_prior_desk_run(acceptance_line, prior_run):
    field, corpus, log, seconds = prior_run
    gen = np.random.default_rng(123)
    surf, eik = [], []
    for i, s in enumerate(corpus):
        r = float(np.linalg.norm(s.points[0]))
        v = gen.normal(size=(4096, 3))
        pts = torch.as_tensor(r * v / np.linalg.norm(v, axis=1, keepdims=True), dtype=field.dtype)
        with torch.no_grad():
            surf.append(float(field(pts, i).abs().mean()))
        probes = torch.as_tensor(gen.uniform(-1, 1, size=(4096, 3)), dtype=field.dtype)
        _, g, _ = field.spatial_gradient(probes, i)
        eik.append((g.norm(dim=-1) - 1).abs().detach().numpy())
    mean_surf = float(np.mean(surf))
    med_eik = float(np.median(np.concatenate(eik)))
    epochs = log.of_kind("epoch")
    rises = {st: _moving_average_rises([r["loss"]["total"] for r in epochs if r["stage"] == st])
             for st in ("L4", "L5", "L6")}
    ok = mean_surf <= 0.01 and med_eik <= 0.1 and seconds <= 15 * 60
    acceptance_line(4, ok, f"mean |d| {mean_surf:.5f} (limit 0.01), median eikonal residual {med_eik:.4f} "
                           f"(limit 0.1), {seconds:.0f} s (limit 900 s); moving-average rises per stage {rises}")
    assert ok


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_intersection_equivalence(acceptance_line):
    rays = random_rays(10_000, seed=0)
    parts, ok = [], True
    for scene in analytic.INTERSECTION_SCENES:
        agr = compare_methods(analytic.make_shape(scene), rays)
        ok &= agr.rate >= 0.995 and agr.max_dt <= 5e-3
        parts.append(f"{scene} {agr.rate:.2%} max|dt| {agr.max_dt:.1e}")
    rows = {m: bench_intersect("union", 10_000, m, repeats=1) for m in ("sampled", "sphere")}
    ratio = rows["sampled"]["rays_per_s"] / rows["sphere"]["rays_per_s"]
    acceptance_line(5, ok, "; ".join(parts) + f"; sampled/sphere throughput ratio {ratio:.2f} (reported only)")
    assert ok


# -- 6 ----------------------------------------------------------------------------


def test_criterion_6_reconstruction(acceptance_line, recon_runs):
    c = {k: v["chamfer"] for k, v in recon_runs.items()}
    total = sum(v["seconds"] for v in recon_runs.values())
    ratio = c["6-no-prior"] / c["6"]
    ok = (c["6"] <= 0.02 and c["1"] <= 0.05 and c["6"] <= c["3"] <= c["1"] and ratio >= 3 and total <= 20 * 60)
    acceptance_line(6, ok, f"chamfer 6v {c['6']:.4f} (limit 0.02), 3v {c['3']:.4f}, 1v {c['1']:.4f} (limit 0.05), "
                           f"no-prior 6v {c['6-no-prior']:.4f}, ratio {ratio:.1f} (limit 3), "
                           f"{total:.0f} s for four runs (limit 1200 s)")
    assert ok


def test_training_view_rgb_error(recon_runs, desk):
    run = recon_runs["6"]
    res, bundle = run["result"], run["bundle"]
    rc, _ = recon_settings(desk)
    errs = []
    for img, view in zip(render_images(res.field, res.render, bundle, rc), bundle.views):
        both = view.mask & (img[..., 0] > -1.0)
        errs.append(np.abs(img[both] - view.image[both]).mean())
    print(f"mean per-pixel RGB error on training views: {np.mean(errs):.4f}")
    assert np.mean(errs) <= 0.05


# -- 7 ----------------------------------------------------------------------------


def test_criterion_7_normal_loss_values(acceptance_line):
    g = torch.tensor([[1.0, 0.0, 0.0]], dtype=DT)
    n60 = torch.tensor([[0.5, math.sqrt(3) / 2, 0.0]], dtype=DT)
    vals = (float(loss_normal(g, g)), float(loss_normal(g, -g)), float(loss_normal(g, n60)))
    ok = vals == (0.0, 2.0, 0.5)
    acceptance_line(7, ok, f"aligned {vals[0]!r}, opposed {vals[1]!r}, 60 degrees {vals[2]!r}")
    assert ok


# -- 8 ----------------------------------------------------------------------------


TINY = {
    "field": {"hidden": 16, "latent_dim": 8},
    "prior": {"N": 1, "batches_per_epoch": 2, "surface_batch": 64, "offsurface_batch": 64, "samples_per_mesh": 500},
    "intersect": {"n_coarse": 32, "n_fine": 8},
    "recon": {"stage1_epochs": 2, "stage2_end": 4, "rays_per_view": 64, "render_width": 32,
              "render_q_layers": 2, "render_r_layers": 2, "lr": 1e-3},
    "eval": {"mesh_resolution": 32, "oversample_points": 5000, "min_spacing": 0.01},
}


def test_criterion_8_determinism(acceptance_line, tmp_path, capsys):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"resolution": 24, "views": 3, "gt_points": 2000, "noise_std": 0.02}))
    outputs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        codes = [
            cli_run(["synth-scene", "--spec", str(spec), "--out", str(d / "scene")]),
            cli_run(["train-prior", "--spheres", "0.3:0.6:3", "--config", str(cfg), "--out", str(d / "prior.ckpt")]),
            cli_run(["reconstruct", "--scene", str(d / "scene"), "--prior", str(d / "prior.ckpt"), "--views", "3",
                     "--out", str(d / "rec"), "--config", str(cfg)]),
        ]
        capsys.readouterr()
        codes.append(cli_run(["eval", "--gt", str(d / "scene" / "gt_points.npy"), "--mesh", str(d / "rec" / "mesh.obj"),
                              "--config", str(cfg)]))
        eval_out = capsys.readouterr().out
        codes.append(cli_run(["bench-intersect", "--scene", "torus", "--rays", "2000", "--method", "sampled"]))
        bench = capsys.readouterr().out.splitlines()
        header, row = bench[0].split(","), bench[1].split(",")
        bench_fields = {h: v for h, v in zip(header, row) if h not in ("seconds", "rays_per_s")}
        files = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
                 if p.is_file() and p.name not in ("timings.json",) and not p.name.endswith(".jsonl")}
        outputs.append((codes, files, eval_out, bench_fields))
    (c0, f0, e0, b0), (c1, f1, e1, b1) = outputs
    same = sorted(f0) == sorted(f1) and all(f0[k] == f1[k] for k in f0)
    ok = c0 == c1 == [0] * 5 and same and e0 == e1 and b0 == b1
    acceptance_line(8, ok, f"{len(f0)} output files bit-identical: {same}; eval and bench reports identical: "
                           f"{e0 == e1 and b0 == b1}")
    assert ok
