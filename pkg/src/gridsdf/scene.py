"""Synthetic posed-image scenes rendered from analytic SDFs, and their on-disk form.

Directory layout of a saved scene::

    scene.json            cameras, shape description, shading constants
    view_00_rgb.png       8-bit RGB, value v maps to 2 * v / 255 - 1
    view_00_mask.png      8-bit, 255 = foreground
    view_00_normal.npy    (H, W, 3) float64 camera-frame unit normals, 0 off-mask
    gt_points.npy         (N, 3) points on the analytic surface
    gt_normals.npy        (N, 3) matching unit normals
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from . import analytic
from .render import Camera, generate_rays, intersect_sphere_trace

# (yaw, pitch) in degrees; subsets by view count take the first k entries
RIG = ((0.0, 0.0), (45.0, 0.0), (-45.0, 0.0), (90.0, 0.0), (-90.0, 0.0), (0.0, -25.0))
VIEW_SETS = {1: (0,), 3: (0, 1, 2), 6: (0, 1, 2, 3, 4, 5)}


class SceneSpecError(ValueError):
    pass


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) in [-1, 1]
    mask: np.ndarray  # (H, W) bool
    normals: np.ndarray  # (H, W, 3) camera frame
    camera: Camera


@dataclass
class SceneBundle:
    scene_id: str
    views: List[View]
    gt_points: Optional[np.ndarray] = None
    gt_normals: Optional[np.ndarray] = None
    spec: Dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in enumerate(self.views):
            h, w = v.camera.height, v.camera.width
            if v.image.shape != (h, w, 3) or v.mask.shape != (h, w) or v.normals.shape != (h, w, 3):
                raise SceneSpecError(f"view {k}: image, mask and normal map must be aligned {h}x{w} arrays")

    def subset(self, n_views: int) -> "SceneBundle":
        """The first ``n_views`` views of the rig (1, 3 or 6)."""
        if n_views not in VIEW_SETS or max(VIEW_SETS[n_views]) >= len(self.views):
            raise SceneSpecError(f"cannot take {n_views} views from a {len(self.views)}-view scene")
        return SceneBundle(self.scene_id, [self.views[k] for k in VIEW_SETS[n_views]],
                           self.gt_points, self.gt_normals, self.spec)


# --------------------------------------------------------------------------
# shape descriptions


_PRIMITIVES = {
    "sphere": (analytic.Sphere, ("radius", "center")),
    "ellipsoid": (analytic.Ellipsoid, ("radii", "center")),
    "box": (analytic.Box, ("half_extents", "center", "rounding")),
    "torus": (analytic.Torus, ("major", "minor", "center")),
}


def shape_from_spec(desc) -> analytic.Shape:
    """A shape from a named preset or a list of primitives joined by union.

    ``desc`` is either a preset name (see ``analytic.SHAPES``) or a list of
    dicts such as ``{"type": "sphere", "radius": 0.4, "center": [0, 0, 0]}``.
    """
    if isinstance(desc, str):
        try:
            return analytic.make_shape(desc)
        except ValueError as exc:
            raise SceneSpecError(str(exc)) from None
    if not isinstance(desc, list) or not desc:
        raise SceneSpecError("shape must be a preset name or a nonempty list of primitives")
    parts = []
    for k, p in enumerate(desc):
        if not isinstance(p, dict) or p.get("type") not in _PRIMITIVES:
            raise SceneSpecError(f"primitive {k}: type must be one of {sorted(_PRIMITIVES)}")
        cls, allowed = _PRIMITIVES[p["type"]]
        extra = set(p) - set(allowed) - {"type"}
        if extra:
            raise SceneSpecError(f"primitive {k}: unknown keys {sorted(extra)}")
        parts.append(cls(**{a: p[a] for a in allowed if a in p}))
    return parts[0] if len(parts) == 1 else analytic.Union(parts)


# --------------------------------------------------------------------------
# synthesis


DEFAULT_SPEC = {
    "scene_id": "blob_head",
    "shape": "blob_head",
    "views": 6,
    "resolution": 128,
    "distance": 2.5,
    "fov_deg": 36.0,
    "albedo": [0.8, 0.6, 0.5],
    "ambient": 0.25,
    "light_dir": [0.3, 0.5, 1.0],
    "noise_std": 0.0,
    "gt_points": 20000,
    "seed": 0,
}


def rig_cameras(n_views: int, distance: float, fov_deg: float, resolution: int) -> List[Camera]:
    if n_views not in VIEW_SETS:
        raise SceneSpecError(f"views must be one of {sorted(VIEW_SETS)}")
    cams = []
    for k in VIEW_SETS[n_views]:
        yaw, pitch = (math.radians(a) for a in RIG[k])
        eye = distance * np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)])
        cams.append(Camera.look_at(eye, fov_deg=fov_deg, width=resolution, height=resolution))
    return cams


def _shade(normals: np.ndarray, albedo: np.ndarray, ambient: float, light: np.ndarray) -> np.ndarray:
    lam = np.clip(normals @ light, 0.0, None)
    return albedo * (ambient + (1.0 - ambient) * lam)[..., None]


def render_view(shape: analytic.Shape, cam: Camera, albedo, ambient: float, light_dir) -> View:
    rays = generate_rays(cam, cam.pixel_centers())
    t = shape.ray_intersect(rays.origins, rays.dirs)
    if t is None:
        res = intersect_sphere_trace(shape, rays, max_iters=1024, surface_eps=1e-9)
        t = torch.where(res.hit, res.t, torch.full_like(res.t, math.inf))
    hit = torch.isfinite(t)
    h, w = cam.height, cam.width
    normals_world = np.zeros((h * w, 3))
    if bool(hit.any()):
        x = rays.at(torch.where(hit, t, torch.zeros_like(t)))[hit]
        normals_world[hit.numpy()] = shape.normal(x).numpy()
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    rgb = _shade(normals_world, np.asarray(albedo, dtype=np.float64), ambient, light)
    mask = hit.numpy()
    image = np.where(mask[:, None], 2.0 * rgb - 1.0, -1.0)
    normals_cam = normals_world @ cam.rotation  # rows: R^T n
    normals_cam[~mask] = 0.0
    return View(image.reshape(h, w, 3), mask.reshape(h, w), normals_cam.reshape(h, w, 3), cam)


def synth_scene(spec: Optional[Dict] = None) -> SceneBundle:
    """Render the scene described by ``spec`` (missing keys take ``DEFAULT_SPEC`` values)."""
    spec = dict(spec or {})
    unknown = set(spec) - set(DEFAULT_SPEC)
    if unknown:
        raise SceneSpecError(f"unknown scene spec keys: {sorted(unknown)}")
    full = {**DEFAULT_SPEC, **spec}
    if int(full["resolution"]) < 2:
        raise SceneSpecError("resolution must be at least 2")
    if not 0.0 <= float(full["ambient"]) <= 1.0:
        raise SceneSpecError("ambient must lie in [0, 1]")
    if float(full["distance"]) <= math.sqrt(3.0):
        raise SceneSpecError("cameras must sit outside the unit cube")
    shape = shape_from_spec(full["shape"])
    cams = rig_cameras(int(full["views"]), float(full["distance"]), float(full["fov_deg"]), int(full["resolution"]))
    views = [render_view(shape, c, full["albedo"], float(full["ambient"]), full["light_dir"]) for c in cams]
    if full["noise_std"] > 0:
        rng = np.random.default_rng(full["seed"])
        for v in views:
            v.image = np.clip(v.image + rng.normal(0.0, full["noise_std"], v.image.shape), -1.0, 1.0)
    gt_pts, gt_nrm = (None, None)
    if full["gt_points"]:
        gt_pts, gt_nrm = analytic.sample_surface(shape, int(full["gt_points"]), seed=int(full["seed"]))
    return SceneBundle(str(full["scene_id"]), views, gt_pts, gt_nrm, full)


# --------------------------------------------------------------------------
# persistence


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_scene(bundle: SceneBundle, out: Union[str, Path]) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"scene_id": bundle.scene_id, "spec": bundle.spec,
            "cameras": [v.camera.to_dict() for v in bundle.views]}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for k, v in enumerate(bundle.views):
        Image.fromarray(_to_u8(v.image)).save(out / f"view_{k:02d}_rgb.png")
        Image.fromarray(v.mask.astype(np.uint8) * 255).save(out / f"view_{k:02d}_mask.png")
        np.save(out / f"view_{k:02d}_normal.npy", v.normals)
    if bundle.gt_points is not None:
        np.save(out / "gt_points.npy", bundle.gt_points)
        np.save(out / "gt_normals.npy", bundle.gt_normals)


def load_scene(path: Union[str, Path]) -> SceneBundle:
    path = Path(path)
    meta = json.loads((path / "scene.json").read_text())
    views = []
    for k, cd in enumerate(meta["cameras"]):
        rgb = np.asarray(Image.open(path / f"view_{k:02d}_rgb.png").convert("RGB"), dtype=np.float64)
        mask = np.asarray(Image.open(path / f"view_{k:02d}_mask.png").convert("L")) > 127
        normals = np.load(path / f"view_{k:02d}_normal.npy")
        views.append(View(rgb / 127.5 - 1.0, mask, normals, Camera.from_dict(cd)))
    gt = path / "gt_points.npy"
    gt_pts = np.load(gt) if gt.exists() else None
    gt_n = np.load(path / "gt_normals.npy") if (path / "gt_normals.npy").exists() else None
    return SceneBundle(meta["scene_id"], views, gt_pts, gt_n, meta.get("spec", {}))
