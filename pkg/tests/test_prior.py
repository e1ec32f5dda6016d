import numpy as np
import pytest
import torch

from gridsdf.autodiff import NonFiniteLossError
from gridsdf.field import MultiGridField, geometric_init
from gridsdf.logs import RunLog
from gridsdf.mesh import EmptyMeshError, Mesh, cube_mesh, icosphere, write_obj
from gridsdf.prior import (STAGE_GROUPS, PriorLossConfig, PriorTrainConfig, SurfaceSampleSet, TrainSchedule,
                           loss_eikonal, loss_embedding, loss_surface, mesh_corpus_ingest, mesh_samples,
                           normalization_for, sphere_corpus, train_prior)
from gridsdf.gradcheck import interior_points

DT = torch.float64


def small_field(seed=0):
    return geometric_init(MultiGridField(hidden=16, latent_dim=8, dtype=DT), 0.45, seed=seed)


def sphere_points(r, n=2000, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return torch.as_tensor(r * v / np.linalg.norm(v, axis=1, keepdims=True), dtype=DT)


# -- schedule -----------------------------------------------------------------


def test_stage_table():
    s = TrainSchedule(N=10)
    assert s.total_epochs == 70
    assert [s.stage(e) for e in (0, 9, 10, 29, 30, 69)] == ["L4", "L4", "L5", "L5", "L6", "L6"]
    assert s.live_groups(0) == ("grid_l4", "decoder", "latent")
    assert s.live_groups(10) == ("grid_l5",)
    assert s.live_groups(69) == ("grid_l6",)
    with pytest.raises(ValueError):
        s.stage(70)


def test_mask_ramp():
    s = TrainSchedule(N=10)
    assert s.mask_alpha(0, 6) == 0.0
    assert s.mask_alpha(2.5, 6) == 3.0
    assert s.mask_alpha(5, 6) == 6.0
    assert s.mask_alpha(40, 6) == 6.0


def test_loss_config_positive():
    with pytest.raises(ValueError):
        PriorLossConfig(lambda_emb=0.0)
    with pytest.raises(ValueError):
        PriorLossConfig(sigma2=-1.0)


# -- losses -------------------------------------------------------------------


def test_surface_loss_under_analytic_field():
    fn = lambda x, scene=None: x.norm(dim=-1) - 0.4
    assert float(loss_surface(fn, sphere_points(0.4))) == pytest.approx(0.0, abs=1e-15)
    assert float(loss_surface(fn, sphere_points(0.45))) == pytest.approx(0.05, abs=1e-12)


def test_surface_loss_of_geometric_init():
    f = geometric_init(MultiGridField(latent_dim=8, dtype=DT), 0.5)
    f.reset_latents(["a"])
    assert loss_surface(f, sphere_points(0.5), 0).item() <= 0.05


def test_surface_loss_empty():
    with pytest.raises(ValueError):
        loss_surface(small_field(), torch.zeros(0, 3, dtype=DT))


def test_eikonal_constant_field_is_one():
    f = small_field()
    with torch.no_grad():
        f.decoder.layers[-1].weight.zero_()
    loss, skipped = loss_eikonal(f, interior_points(torch.Generator().manual_seed(0), 50))
    assert loss.item() == 1.0 and skipped == 0


def test_eikonal_doubled_field():
    f = geometric_init(MultiGridField(latent_dim=8, dtype=DT), 0.5)
    pts = interior_points(torch.Generator().manual_seed(1), 200, radius=0.8)
    base, _ = loss_eikonal(f, pts)
    with torch.no_grad():
        f.decoder.layers[-1].weight.mul_(2)
        f.decoder.layers[-1].bias.mul_(2)
    doubled, _ = loss_eikonal(f, pts)
    assert base.item() <= 0.05
    assert doubled.item() == pytest.approx(1.0, abs=0.25)


def test_eikonal_skips_boundary_points():
    f = small_field()
    pts = torch.tensor([[0.1, 0.1, 0.1], [-1 + 2 / 16, 0.1, 0.1], [0.0, 0.1, 0.1]], dtype=DT)
    _, skipped = loss_eikonal(f, pts)
    assert skipped == 2


def test_embedding_loss():
    z = torch.tensor([[3.0, 4.0], [0.0, 1.0]], dtype=DT)
    g = torch.tensor([0.0, 0.0, 2.0], dtype=DT)
    assert float(loss_embedding(torch.zeros(3, dtype=DT), torch.zeros(5, 2, dtype=DT))) == 0.0
    assert float(loss_embedding(torch.tensor([1.0, 0, 0], dtype=DT), torch.zeros(5, 2, dtype=DT))) == 1.0
    assert float(loss_embedding(g, z, sigma2=2.0)) == pytest.approx((3.0 + 2.0) / 2.0)


# -- ingestion -----------------------------------------------------------------


def test_cube_ingest_on_surface(tmp_path):
    write_obj(cube_mesh(1.0), tmp_path / "cube.obj")
    (s,) = mesh_corpus_ingest([tmp_path / "cube.obj"], n_points=4000)
    half = s.scale  # unit half-extent after rescaling
    q = np.abs(s.points) - half
    dist = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
    assert np.abs(dist).max() <= 1e-9
    assert np.abs(s.points).max() <= 1.0
    assert s.scene_id == "cube"


def test_icosphere_ingest_sagitta():
    m = icosphere(0.5, 2)
    s = mesh_samples(m, "ico", 5000)
    v = m.vertices[m.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    plane = np.abs(np.einsum("ij,ij->i", n / np.linalg.norm(n, axis=1, keepdims=True), v[:, 0]))
    e = 0.5 - plane.min()
    r = np.linalg.norm(s.points, axis=1)
    assert s.scale == 1.0
    assert r.max() <= 0.5 + 1e-12 and r.min() >= 0.5 - e - 1e-12


def test_normalization_keeps_points_in_cube():
    verts = np.random.default_rng(0).normal(size=(100, 3)) * 7 + 30
    scale, offset = normalization_for(verts)
    assert np.abs((verts - offset) * scale).max() <= 0.95 + 1e-12


def test_degenerate_faces_counted_and_empty_rejected():
    m = cube_mesh(0.5)
    bad = Mesh(m.vertices, np.concatenate([m.faces, [[0, 0, 1], [2, 2, 2]]]))
    assert mesh_samples(bad, "b", 100).degenerate_faces == 2
    with pytest.raises(EmptyMeshError):
        mesh_samples(Mesh(np.zeros((0, 3)), np.zeros((0, 3))), "e", 10)


def test_sample_set_validation():
    with pytest.raises(ValueError):
        SurfaceSampleSet("x", np.array([[2.0, 0, 0]]))
    with pytest.raises(ValueError):
        SurfaceSampleSet("x", np.array([[0.5, 0, 0]]), normals=np.array([[2.0, 0, 0]]))


# -- training -------------------------------------------------------------------


TRAIN = PriorTrainConfig(lr=1e-3, batches_per_epoch=2, surface_batch=64, offsurface_batch=64)
CORPUS = sphere_corpus([0.3, 0.5], n_points=500)


def run(epochs, loss_cfg=PriorLossConfig(), seed=0, N=2):
    f = small_field(seed)
    res = train_prior(f, CORPUS, loss_cfg, TrainSchedule(N=N), TRAIN, RunLog(), epochs=epochs)
    return f, res.log


def test_schedule_exactness_in_logs():
    _, log = run(7)
    sched = TrainSchedule(N=2)
    epochs = log.of_kind("epoch")
    assert len(epochs) == 7
    for rec in epochs:
        want = sorted(STAGE_GROUPS[sched.stage(rec["epoch"])])
        assert rec["live"] == want
        assert rec["updated"] == want
        assert set(rec["loss"]) >= {"surf", "emb", "eik", "total"}
    assert epochs[0]["mask_alpha"] < epochs[1]["mask_alpha"] == 6.0
    summary = log.of_kind("summary")[0]
    assert summary["level_rms"]["grid_l4"] > 0
    assert all(np.isfinite(summary["latent_norms"]))


def test_freezing_contract_is_bytewise():
    a, _ = run(2)  # end of L4
    b, _ = run(4)  # two L5 epochs later
    assert torch.equal(a.grids[0], b.grids[0])
    assert torch.equal(a.grids[2], b.grids[2])
    assert torch.equal(a.latents, b.latents)
    for la, lb in zip(a.decoder.layers, b.decoder.layers):
        assert torch.equal(la.weight, lb.weight) and torch.equal(la.bias, lb.bias)
    assert not torch.equal(a.grids[1], b.grids[1])


def test_training_is_deterministic():
    a, la = run(3)
    b, lb = run(3)
    assert [r["loss"] for r in la.of_kind("epoch")] == [r["loss"] for r in lb.of_kind("epoch")]
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_stronger_embedding_weight_shrinks_latents():
    base, _ = run(2, PriorLossConfig(lambda_emb=0.1))
    strong, _ = run(2, PriorLossConfig(lambda_emb=1.0))
    nb = base.latents.detach().norm(dim=-1)
    ns = strong.latents.detach().norm(dim=-1)
    assert torch.isfinite(nb).all() and torch.isfinite(ns).all()
    assert float(ns.mean()) < float(nb.mean())


def test_non_finite_loss_names_epoch_and_scene():
    f = small_field()
    with torch.no_grad():
        f.decoder.layers[0].weight[0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        train_prior(f, CORPUS, PriorLossConfig(), TrainSchedule(N=2), TRAIN, RunLog(), epochs=1)
    assert "epoch 0" in str(err.value) and "sphere_0" in str(err.value)


def test_empty_corpus():
    with pytest.raises(ValueError):
        train_prior(small_field(), [], epochs=1)
