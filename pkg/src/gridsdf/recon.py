"""Per-scene reconstruction from posed images, masks and normal maps."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from .autodiff import Adam, NonFiniteLossError, ParameterRegistry, backward
from .field import MultiGridField, random_init
from .logs import RunLog
from .mesh import Mesh, chamfer_unidirectional, extract_mesh, oversample
from .render import (Camera, RenderNets, generate_rays, implicit_hit, intersect_sampled, loss_mask,
                     loss_normal, loss_rgb)
from .scene import SceneBundle

log = logging.getLogger(__name__)


class SurfaceLostError(RuntimeError):
    """An epoch in which no ray hit the surface after earlier epochs did."""


@dataclass
class ReconSchedule:
    stage1_epochs: int = 30
    stage2_end: int = 100

    def __post_init__(self):
        if not 0 <= self.stage1_epochs <= self.stage2_end:
            raise ValueError("need 0 <= stage1_epochs <= stage2_end")

    # the eikonal term is disabled during reconstruction
    eikonal_weight = 0.0

    def stage(self, epoch: int) -> str:
        return "S1" if epoch < self.stage1_epochs else "S2"

    def live_groups(self, epoch: int) -> Tuple[str, ...]:
        groups = ("grid_l4", "grid_l5", "grid_l6", "latent", "render_Q", "render_R")
        return groups if epoch < self.stage1_epochs else groups + ("decoder",)


@dataclass
class ReconConfig:
    rays_per_view: int = 2048
    n_coarse: int = 64
    n_fine: int = 32
    w_rgb: float = 1.0
    w_mask: float = 100.0
    w_normal: float = 1.0
    mask_alpha: float = 50.0
    normalize_normals: bool = True
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: Optional[int] = None
    mask_dilation: int = 4
    grazing_threshold: float = 1e-4
    render_width: int = 512
    render_q_layers: int = 8
    render_r_layers: int = 4
    mesh_resolution: int = 256
    oversample_points: int = 1_000_000
    min_spacing: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.rays_per_view < 1:
            raise ValueError("rays_per_view must be positive")
        if min(self.w_rgb, self.w_mask, self.w_normal) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class EvalReport:
    chamfer: float
    gt_points: int
    recon_points: int
    region: str = "full surface"
    views: int = 0
    epochs: int = 0
    final_loss: Dict[str, float] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def record(self, include_timings: bool = True) -> Dict:
        out = asdict(self)
        if not include_timings:
            out.pop("timings")
        return out


@dataclass
class ReconResult:
    field: MultiGridField
    render: RenderNets
    mesh: Optional[Mesh]
    report: Optional[EvalReport]
    log: RunLog


def recon_settings(cfg) -> Tuple[ReconConfig, ReconSchedule]:
    """Reconstruction settings from a resolved run configuration."""
    r, i, e = cfg.recon, cfg.intersect, cfg.eval
    rc = ReconConfig(rays_per_view=r.rays_per_view, n_coarse=i.n_coarse, n_fine=i.n_fine, w_rgb=r.w_rgb,
                     w_mask=r.w_mask, w_normal=r.w_normal, mask_alpha=r.mask_alpha,
                     normalize_normals=r.normalize_normals, lr=r.lr, lr_decay=r.lr_decay,
                     lr_decay_every=r.lr_decay_every, mask_dilation=r.mask_dilation,
                     grazing_threshold=r.grazing_threshold, render_width=r.render_width,
                     render_q_layers=r.render_q_layers, render_r_layers=r.render_r_layers,
                     mesh_resolution=e.mesh_resolution, oversample_points=e.oversample_points,
                     min_spacing=e.min_spacing, seed=cfg.run.seed)
    return rc, ReconSchedule(r.stage1_epochs, r.stage2_end)


# --------------------------------------------------------------------------
# initialisation


def field_from_prior(prior: MultiGridField, scene_id: str) -> MultiGridField:
    """Copy of the prior with a single fresh zero latent and an unmasked encoder."""
    f = copy.deepcopy(prior)
    f.reset_latents([scene_id])
    f.encoder.set_mask_alpha(f.encoder.num_frequencies)
    return f


def field_without_prior(like: MultiGridField, scene_id: str, seed: int = 0) -> MultiGridField:
    """Same architecture as ``like`` with a randomly initialised decoder and zero grids."""
    f = field_from_prior(like, scene_id)
    return random_init(f, seed)


def make_render_nets(field: MultiGridField, cfg: ReconConfig) -> RenderNets:
    return RenderNets(width=cfg.render_width, q_layers=cfg.render_q_layers, r_layers=cfg.render_r_layers,
                      q_skip=cfg.render_q_layers // 2, seed=cfg.seed, dtype=field.dtype)


# --------------------------------------------------------------------------
# per-view data


@dataclass
class _ViewData:
    camera: Camera
    pixels: np.ndarray  # (P, 2) candidate pixel centres inside the dilated mask
    rgb: torch.Tensor  # (P, 3)
    label: torch.Tensor  # (P,) bool
    normal: torch.Tensor  # (P, 3) world frame


def _prepare(bundle: SceneBundle, dilation: int, dtype) -> List[_ViewData]:
    out = []
    for v in bundle.views:
        region = binary_dilation(v.mask, iterations=dilation) if dilation > 0 else v.mask
        rows, cols = np.nonzero(region)
        pixels = np.stack([cols + 0.5, rows + 0.5], axis=-1)
        n_world = v.normals[rows, cols] @ v.camera.rotation.T
        out.append(_ViewData(v.camera, pixels,
                             torch.as_tensor(v.image[rows, cols], dtype=dtype),
                             torch.as_tensor(v.mask[rows, cols]),
                             torch.as_tensor(n_world, dtype=dtype)))
    return out


# --------------------------------------------------------------------------
# one optimisation step


def view_losses(field: MultiGridField, nets: RenderNets, view: _ViewData, sel: np.ndarray,
                cfg: ReconConfig) -> Tuple[Dict[str, torch.Tensor], Dict[str, int]]:
    """Loss terms for the selected candidate pixels of one view."""
    rays = generate_rays(view.camera, view.pixels[sel], dtype=field.dtype)
    label = view.label[sel]
    res = intersect_sampled(field.as_function(0), rays, cfg.n_coarse, cfg.n_fine)
    hit = res.hit & rays.valid
    on = hit & label
    counts = {"rays": len(rays), "hits": int(hit.sum()), "grazing": 0}
    terms: Dict[str, torch.Tensor] = {}

    idx = on.nonzero().squeeze(-1)
    if idx.numel():
        x0 = res.x[idx].detach().requires_grad_(True)
        v = rays.dirs[idx]
        d = field(x0, 0)
        (grad,) = torch.autograd.grad(d.sum(), x0, create_graph=True)
        denom = (grad.detach() * v).sum(-1)
        keep = denom.abs() >= cfg.grazing_threshold
        counts["grazing"] = int((~keep).sum())
        x_diff = implicit_hit(x0[keep], v[keep], d[keep], denom[keep])
        g = grad[keep]
        n = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        rgb = nets(x_diff, n, v[keep])
        terms["rgb"] = loss_rgb(rgb, view.rgb[sel][idx][keep])
        terms["normal"] = loss_normal(g, view.normal[sel][idx][keep], cfg.normalize_normals)
    off = (~on & rays.valid).nonzero().squeeze(-1)
    if off.numel():
        xm = rays.subset(off).at(res.t_min[off]).clamp(-1.0, 1.0)
        dm = field(xm, 0)
        terms["mask"] = loss_mask(dm, label[off], cfg.mask_alpha, num_rays=int(rays.valid.sum()))
    return terms, counts


def _sample(rng: np.random.Generator, view: _ViewData, n: int) -> np.ndarray:
    p = len(view.pixels)
    return rng.choice(p, size=n, replace=n > p)


# --------------------------------------------------------------------------
# driver


def reconstruct(
    bundle: SceneBundle,
    field: MultiGridField,
    cfg: ReconConfig = ReconConfig(),
    sched: ReconSchedule = ReconSchedule(),
    run_log: Optional[RunLog] = None,
    evaluate: bool = True,
    nets: Optional[RenderNets] = None,
) -> ReconResult:
    """Optimise ``field`` (already initialised for this scene) against the bundle's views."""
    run_log = run_log if run_log is not None else RunLog()
    nets = nets if nets is not None else make_render_nets(field, cfg)
    registry = ParameterRegistry.from_modules(field, nets)
    opt = Adam(registry, lr=cfg.lr, decay=cfg.lr_decay, decay_every=cfg.lr_decay_every)
    rng = np.random.default_rng(cfg.seed)
    views = _prepare(bundle, cfg.mask_dilation, field.dtype)
    weights = {"rgb": cfg.w_rgb, "mask": cfg.w_mask, "normal": cfg.w_normal}
    timings = {"stage1": 0.0, "stage2": 0.0}
    seen_hits = False
    last = {}
    run_log.write({"kind": "init", "phase": "recon", "checksums": registry.checksums()})

    for epoch in range(sched.stage2_end):
        t0 = time.perf_counter()
        stage = sched.stage(epoch)
        registry.set_live(sched.live_groups(epoch))
        opt.set_epoch(epoch)
        sums = {k: 0.0 for k in weights}
        counts = {"rays": 0, "hits": 0, "grazing": 0}
        updated = set()
        for k, view in enumerate(views):
            sel = _sample(rng, view, cfg.rays_per_view)
            terms, c = view_losses(field, nets, view, sel, cfg)
            for key in counts:
                counts[key] += c[key]
            try:
                grads = backward(terms, registry, weights, context=f"{stage} epoch {epoch} view {k}")
            except NonFiniteLossError:
                log.error("non-finite reconstruction loss at %s epoch %d view %d", stage, epoch, k)
                raise
            upd = opt.step(grads)
            updated.update(n for n, u in upd.items() if u > 0)
            for key, val in grads.terms.items():
                sums[key] += val / len(views)
        if counts["hits"] == 0 and seen_hits:
            raise SurfaceLostError(f"{stage} epoch {epoch}: no ray hit the surface")
        seen_hits = seen_hits or counts["hits"] > 0
        timings["stage1" if stage == "S1" else "stage2"] += time.perf_counter() - t0
        last = {k: v for k, v in sums.items()}
        last["total"] = sum(weights[k] * sums[k] for k in sums)
        run_log.write({
            "kind": "epoch", "phase": "recon", "epoch": epoch, "stage": stage, "loss": last,
            "eikonal_weight": sched.eikonal_weight, "lr": opt.lr, "live": sorted(registry.live()),
            "updated": sorted(updated), "checksums": registry.checksums(), **counts,
        })
        if epoch % 10 == 0 or epoch == sched.stage2_end - 1:
            log.info("recon epoch %d [%s] rgb=%.4f mask=%.5f normal=%.4f hits=%d/%d", epoch, stage,
                     sums["rgb"], sums["mask"], sums["normal"], counts["hits"], counts["rays"])

    mesh, report = None, None
    if evaluate:
        mesh, report = evaluate_field(field, bundle, cfg)
        report.views = len(bundle.views)
        report.epochs = sched.stage2_end
        report.final_loss = last
        report.timings.update(timings)
        report.timings["total"] = sum(report.timings.values())
        run_log.write({"kind": "report", "phase": "recon", **report.record(include_timings=False)})
    return ReconResult(field, nets, mesh, report, run_log)


def evaluate_field(field: MultiGridField, bundle: SceneBundle, cfg: ReconConfig) -> Tuple[Mesh, EvalReport]:
    t0 = time.perf_counter()
    mesh = extract_mesh(field.as_function(0), cfg.mesh_resolution, dtype=field.dtype)
    t1 = time.perf_counter()
    if bundle.gt_points is None:
        raise ValueError("scene has no ground-truth points to evaluate against")
    pts = oversample(mesh, cfg.oversample_points, cfg.min_spacing, cfg.seed)
    chamfer = chamfer_unidirectional(bundle.gt_points, pts)
    t2 = time.perf_counter()
    return mesh, EvalReport(chamfer, len(bundle.gt_points), len(pts),
                            timings={"extract": t1 - t0, "evaluate": t2 - t1})


@torch.no_grad()
def render_images(field: MultiGridField, nets: RenderNets, bundle: SceneBundle, cfg: ReconConfig,
                  chunk: int = 8192) -> List[np.ndarray]:
    """Full-resolution renders of every view; background pixels are -1."""
    out = []
    for v in bundle.views:
        cam = v.camera
        rays = generate_rays(cam, cam.pixel_centers(), dtype=field.dtype)
        res = intersect_sampled(field.as_function(0), rays, cfg.n_coarse, cfg.n_fine)
        img = torch.full((len(rays), 3), -1.0, dtype=field.dtype)
        idx = (res.hit & rays.valid).nonzero().squeeze(-1)
        for s in range(0, idx.numel(), chunk):
            j = idx[s:s + chunk]
            _, g, _ = field.spatial_gradient(res.x[j], 0)
            n = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            img[j] = nets(res.x[j], n, rays.dirs[j])
        out.append(img.reshape(cam.height, cam.width, 3).numpy())
    return out
