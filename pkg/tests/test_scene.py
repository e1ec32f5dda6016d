import math

import numpy as np
import pytest
import torch

from gridsdf.scene import (DEFAULT_SPEC, SceneSpecError, load_scene, rig_cameras, save_scene, shape_from_spec,
                           synth_scene)

SPHERE_SPEC = {"scene_id": "s", "shape": [{"type": "sphere", "radius": 0.5}], "views": 6, "resolution": 24,
               "gt_points": 500}


@pytest.fixture(scope="module")
def sphere_scene():
    return synth_scene(SPHERE_SPEC)


def test_rig_geometry():
    cams = rig_cameras(6, 2.5, 36.0, 32)
    eyes = np.array([c.position for c in cams])
    assert np.allclose(np.linalg.norm(eyes, axis=1), 2.5)
    assert np.allclose(eyes[0], [0, 0, 2.5])
    assert np.allclose(eyes[3], [2.5, 0, 0])
    assert np.allclose(eyes[4], [-2.5, 0, 0])
    assert eyes[5][1] < 0
    for c in cams:
        # optical axis passes through the origin
        fwd = -c.rotation[:, 2]
        assert np.allclose(np.cross(fwd, -c.position / 2.5), 0, atol=1e-12)
    assert [tuple(c.position) for c in rig_cameras(3, 2.5, 36.0, 32)] == [tuple(e) for e in eyes[:3]]


def test_mask_matches_analytic_ray_sphere_test(sphere_scene):
    for v in sphere_scene.views:
        cam = v.camera
        px = cam.pixel_centers()
        d = np.stack([(px[:, 0] - cam.cx) / cam.fx, -(px[:, 1] - cam.cy) / cam.fy, -np.ones(len(px))], 1)
        d = d @ cam.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = cam.position
        b = d @ o
        disc = b * b - (o @ o - 0.25)
        want = (disc > 0) & (-b - np.sqrt(np.maximum(disc, 0)) > 0)
        assert np.array_equal(v.mask.reshape(-1), want)


def test_shading_and_normals_at_centre(sphere_scene):
    v = sphere_scene.views[0]
    h, w = v.mask.shape
    i, j = h // 2, w // 2
    assert v.mask[i, j]
    n = v.normals[i, j]
    assert np.linalg.norm(n) == pytest.approx(1.0)
    # front camera frame equals world frame, normal faces the camera
    assert n[2] > 0.99
    light = np.array(DEFAULT_SPEC["light_dir"]) / np.linalg.norm(DEFAULT_SPEC["light_dir"])
    shade = 0.25 + 0.75 * max(0.0, float(n @ light))
    want = 2 * np.array(DEFAULT_SPEC["albedo"]) * shade - 1
    assert np.allclose(v.image[i, j], want, atol=1e-12)
    assert np.all(v.image[~v.mask] == -1.0)
    assert np.all(v.normals[~v.mask] == 0.0)


def test_camera_frame_normals_face_camera(sphere_scene):
    for v in sphere_scene.views:
        n = v.normals[v.mask]
        # camera looks down -z, so visible normals have positive z in camera frame
        assert (n[:, 2] > -1e-9).all()


def test_gt_points_on_surface(sphere_scene):
    assert np.allclose(np.linalg.norm(sphere_scene.gt_points, axis=1), 0.5, atol=1e-6)
    assert np.allclose(np.einsum("ij,ij->i", sphere_scene.gt_points, sphere_scene.gt_normals), 0.5, atol=1e-6)


def test_subset_takes_first_views(sphere_scene):
    sub = sphere_scene.subset(3)
    assert len(sub.views) == 3
    assert all(a is b for a, b in zip(sub.views, sphere_scene.views[:3]))
    with pytest.raises(SceneSpecError):
        sphere_scene.subset(4)
    with pytest.raises(SceneSpecError):
        sub.subset(6)


def test_round_trip(tmp_path, sphere_scene):
    save_scene(sphere_scene, tmp_path / "sc")
    back = load_scene(tmp_path / "sc")
    assert back.scene_id == "s"
    for a, b in zip(sphere_scene.views, back.views):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.normals, b.normals)
        assert np.abs(a.image - b.image).max() <= 1.0 / 255 + 1e-12
        assert np.array_equal(a.camera.rotation, b.camera.rotation)
        assert np.array_equal(a.camera.position, b.camera.position)
    assert np.array_equal(back.gt_points, sphere_scene.gt_points)


def test_synthesis_is_deterministic():
    spec = {**SPHERE_SPEC, "noise_std": 0.05, "views": 1}
    a, b = synth_scene(spec), synth_scene(spec)
    assert np.array_equal(a.views[0].image, b.views[0].image)
    assert np.array_equal(a.gt_points, b.gt_points)


def test_union_of_primitives():
    s = shape_from_spec([{"type": "sphere", "radius": 0.3, "center": [-0.4, 0, 0]},
                         {"type": "box", "half_extents": [0.2, 0.2, 0.2], "center": [0.4, 0, 0]}])
    x = torch.tensor([[-0.4, 0.0, 0.0], [0.4, 0.0, 0.0], [0.0, 0.9, 0.0]], dtype=torch.float64)
    d = s(x)
    assert float(d[0]) == pytest.approx(-0.3) and float(d[1]) == pytest.approx(-0.2)
    assert float(d[2]) > 0


def test_bad_specs():
    with pytest.raises(SceneSpecError):
        synth_scene({"colour": 1})
    with pytest.raises(SceneSpecError):
        synth_scene({"shape": "teapot"})
    with pytest.raises(SceneSpecError):
        synth_scene({"shape": [{"type": "sphere", "radius": 0.3, "size": 2}]})
    with pytest.raises(SceneSpecError):
        synth_scene({"views": 4})
    with pytest.raises(SceneSpecError):
        synth_scene({"distance": 1.0})


def test_default_scene_fills_the_frame():
    b = synth_scene({"resolution": 32, "views": 1, "gt_points": 0})
    frac = b.views[0].mask.mean()
    assert 0.1 < frac < 0.9
    assert b.gt_points is None
    assert math.isclose(b.spec["distance"], 2.5)
