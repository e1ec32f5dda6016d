import json

import pytest
import torch
import yaml

from gridsdf import checkpoint
from gridsdf.cli import build_parser, run
from gridsdf.config import DEFAULTS
from gridsdf.field import MultiGridField, geometric_init

TINY = {
    "field": {"hidden": 8, "latent_dim": 4},
    "prior": {"N": 1, "batches_per_epoch": 1, "surface_batch": 32, "offsurface_batch": 32,
              "samples_per_mesh": 200},
    "intersect": {"n_coarse": 32, "n_fine": 8},
    "recon": {"stage1_epochs": 1, "stage2_end": 2, "rays_per_view": 32, "render_width": 16,
              "render_q_layers": 2, "render_r_layers": 2, "lr": 1e-3},
    "eval": {"mesh_resolution": 24, "oversample_points": 3000, "min_spacing": 0.01},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    spec = {"shape": [{"type": "sphere", "radius": 0.4}], "resolution": 16, "views": 6, "gt_points": 1000}
    (d / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert run(["synth-scene", "--spec", str(d / "spec.yaml"), "--out", str(d / "scene")]) == 0
    assert run(["train-prior", "--spheres", "0.3:0.5:2", "--config", str(d / "tiny.yaml"),
                "--out", str(d / "prior.ckpt")]) == 0
    return d


def test_train_prior_is_bit_identical(work):
    assert run(["train-prior", "--spheres", "0.3:0.5:2", "--config", str(work / "tiny.yaml"),
                "--out", str(work / "again.ckpt")]) == 0
    assert (work / "again.ckpt").read_bytes() == (work / "prior.ckpt").read_bytes()
    f, _, meta = checkpoint.load(work / "prior.ckpt")
    assert meta["kind"] == "prior" and len(f.scene_ids) == 2
    lines = (work / "prior.log.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["kind"] == "config"
    assert sum(json.loads(l)["kind"] == "epoch" for l in lines) == 7


def test_train_prior_on_mesh_corpus(work):
    from gridsdf.mesh import cube_mesh, icosphere, write_obj
    corpus = work / "meshes"
    corpus.mkdir()
    write_obj(icosphere(0.5, 2), corpus / "ball.obj")
    write_obj(cube_mesh(0.4), corpus / "cube.obj")
    assert run(["train-prior", "--corpus", str(corpus), "--config", str(work / "tiny.yaml"),
                "--out", str(work / "mesh_prior.ckpt")]) == 0
    _, _, meta = checkpoint.load(work / "mesh_prior.ckpt")
    assert meta["corpus"] == ["ball", "cube"]


def test_reconstruct_outputs_and_determinism(work):
    outs = []
    for name in ("r1", "r2"):
        out = work / name
        assert run(["reconstruct", "--scene", str(work / "scene"), "--prior", str(work / "prior.ckpt"),
                    "--views", "3", "--out", str(out), "--config", str(work / "tiny.yaml")]) == 0
        outs.append(out)
    a, b = outs
    for fname in ("report.json", "field.ckpt", "mesh.obj", "render_00.png"):
        assert (a / fname).read_bytes() == (b / fname).read_bytes(), fname
    report = json.loads((a / "report.json").read_text())
    assert report["views"] == 3 and report["chamfer"] >= 0
    assert sorted(p.name for p in a.glob("render_*.png")) == ["render_00.png", "render_01.png", "render_02.png"]
    timings = json.loads((a / "timings.json").read_text())
    assert set(timings) >= {"stage1", "stage2", "total"}


def test_eval_matches_report(work, capsys):
    out = work / "r1"
    if not out.exists():
        pytest.skip("reconstruction output missing")
    capsys.readouterr()
    assert run(["eval", "--gt", str(work / "scene" / "gt_points.npy"), "--mesh", str(out / "mesh.obj"),
                "--config", str(work / "tiny.yaml")]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    want = json.loads((out / "report.json").read_text())["chamfer"]
    assert rec["chamfer"] == pytest.approx(want, rel=1e-9)


def test_no_prior_ablation_without_surface(work, capsys):
    # the tiny random decoder never forms a surface, which is reported as divergence
    capsys.readouterr()
    assert run(["reconstruct", "--scene", str(work / "scene"), "--prior", str(work / "prior.ckpt"),
                "--views", "1", "--no-prior", "--out", str(work / "abl"), "--config", str(work / "tiny.yaml"),
                "--set", "recon.stage2_end=1", "--set", "recon.stage1_epochs=0"]) == 3
    assert "no zero crossing" in capsys.readouterr().err


def test_replay_log(work, capsys):
    capsys.readouterr()
    assert run(["replay-log", "--log", str(work / "prior.log.jsonl")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    header = lines[0].split(",")
    assert "loss.surf" in header and "epoch" in header
    assert len(lines) == 1 + 7
    col = header.index("epoch")
    assert [int(l.split(",")[col]) for l in lines[1:]] == list(range(7))


def test_bench_csv(capsys):
    capsys.readouterr()
    assert run(["bench-intersect", "--scene", "sphere", "--rays", "500", "--method", "sampled"]) == 0
    assert run(["bench-intersect", "--scene", "sphere", "--rays", "500", "--method", "sphere", "--no-header"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    header = lines[0].split(",")
    assert {"method", "rays_per_s", "hit_rate", "mean_abs_d"} <= set(header)
    assert lines[1].split(",")[header.index("method")] == "sampled"
    assert lines[2].split(",")[header.index("method")] == "sphere"


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "all checks pass" in out


def test_exit_codes(work, tmp_path, capsys):
    assert run(["frobnicate"]) == 2
    assert run(["eval", "--gt", "a", "--mesh", "b", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("field:\n  hiden: 3\nrecon:\n  speed: 1\n")
    assert run(["train-prior", "--spheres", "0.3:0.5:2", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "field.hiden" in err and "recon.speed" in err
    assert run(["reconstruct", "--scene", str(work / "scene"), "--prior", str(tmp_path / "missing.ckpt"),
                "--out", str(tmp_path / "o")]) == 4
    spec = tmp_path / "s.yaml"
    spec.write_text("views: 5\n")
    assert run(["synth-scene", "--spec", str(spec), "--out", str(tmp_path / "s")]) == 2


def test_divergence_exit_code(work, tmp_path):
    f = geometric_init(MultiGridField(hidden=8, latent_dim=4, dtype=torch.float64), 0.45)
    with torch.no_grad():
        f.decoder.layers[0].weight[0, 0] = float("nan")
    checkpoint.save(tmp_path / "nan.ckpt", f)
    assert run(["reconstruct", "--scene", str(work / "scene"), "--prior", str(tmp_path / "nan.ckpt"),
                "--views", "1", "--out", str(tmp_path / "o"), "--config", str(work / "tiny.yaml")]) == 3


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for sec, keys in DEFAULTS.items():
        for name, (default, origin, _) in keys.items():
            assert f"{sec}.{name} = {default!r} ({origin})" in text
