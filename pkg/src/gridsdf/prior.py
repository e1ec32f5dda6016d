"""Shape-prior training: auto-decoder over a corpus with a coarse-to-fine grid schedule.

Objective per scene i:  L_surf + lambda_emb * L_emb + lambda_eik * L_eik, with
``L_surf = mean |d(x)|`` on surface samples, ``L_eik = mean (|grad d| - 1)^2``
on off-surface samples and ``L_emb = (mean |z(x)| + |g_i|) / sigma^2``.

Schedule with base length N: epochs [0, N) train grid level 4, the decoder
and the latents; [N, 3N) only level 5; [3N, 7N) only level 6. The
positional-encoding mask opens linearly over epochs [0, N/2].
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .autodiff import Adam, NonFiniteLossError, ParameterRegistry, backward
from .field import MultiGridField, geometric_init, on_voxel_boundary
from .logs import RunLog
from .mesh import EmptyMeshError, Mesh, read_obj, sample_mesh

log = logging.getLogger(__name__)


@dataclass
class SurfaceSampleSet:
    scene_id: str
    points: np.ndarray  # (P, 3) surface points inside [-1, 1]^3
    normals: Optional[np.ndarray] = None  # (P, 3) unit normals
    scale: float = 1.0  # model = (raw - offset) * scale
    offset: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    degenerate_faces: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValueError(f"scene {self.scene_id!r}: need a nonempty (P, 3) point array")
        if np.abs(self.points).max() > 1.0:
            raise ValueError(f"scene {self.scene_id!r}: points outside [-1,1]^3")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if not np.allclose(np.linalg.norm(self.normals, axis=1), 1.0, atol=1e-6):
                raise ValueError(f"scene {self.scene_id!r}: normals are not unit length")


@dataclass
class PriorLossConfig:
    lambda_emb: float = 0.1
    lambda_eik: float = 0.1
    sigma2: float = 1.0
    normal_weight: float = 0.0  # optional normal supervision, off by default

    def __post_init__(self):
        for k in ("lambda_emb", "lambda_eik", "sigma2"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be strictly positive")


@dataclass
class PriorTrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    batches_per_epoch: int = 16
    surface_batch: int = 512
    offsurface_batch: int = 512
    offsurface_std: float = 0.05
    seed: int = 0


STAGES = ("L4", "L5", "L6")
STAGE_GROUPS = {
    "L4": ("grid_l4", "decoder", "latent"),
    "L5": ("grid_l5",),
    "L6": ("grid_l6",),
}


@dataclass
class TrainSchedule:
    """Stage table for base length N: L4 on [0, N), L5 on [N, 3N), L6 on [3N, 7N)."""

    N: int = 100

    @property
    def total_epochs(self) -> int:
        return 7 * self.N

    def stage(self, epoch: int) -> str:
        if epoch < 0 or epoch >= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside the schedule [0, {self.total_epochs})")
        if epoch < self.N:
            return "L4"
        if epoch < 3 * self.N:
            return "L5"
        return "L6"

    def live_groups(self, epoch: int) -> Tuple[str, ...]:
        return STAGE_GROUPS[self.stage(epoch)]

    def mask_alpha(self, epoch: float, num_frequencies: int) -> float:
        ramp = self.N / 2.0
        if ramp <= 0:
            return float(num_frequencies)
        return float(num_frequencies) * min(1.0, max(0.0, epoch / ramp))


# --------------------------------------------------------------------------
# losses


def loss_surface(field: MultiGridField, points: torch.Tensor, scene=None) -> torch.Tensor:
    if points.shape[0] == 0:
        raise ValueError("empty surface sample set")
    return field(points, scene).abs().mean()


def loss_eikonal(field: MultiGridField, points: torch.Tensor, scene=None) -> Tuple[torch.Tensor, int]:
    """Mean squared eikonal residual; points on voxel faces are skipped and counted."""
    skip = on_voxel_boundary(points, field.levels)
    pts = points[~skip]
    if pts.shape[0] == 0:
        return points.new_zeros(()), int(skip.sum())
    _, grad, _ = field.spatial_gradient(pts, scene, create_graph=True)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean(), int(skip.sum())


def loss_embedding(latent: torch.Tensor, z_samples: torch.Tensor, sigma2: float = 1.0) -> torch.Tensor:
    """``(mean_x |z(x)|_2 + |g|_2) / sigma^2``."""
    zn = z_samples.norm(dim=-1).mean() if z_samples.shape[0] else z_samples.new_zeros(())
    return (zn + latent.norm()) / sigma2


# --------------------------------------------------------------------------
# corpus


def normalization_for(vertices: np.ndarray, margin: float = 0.95) -> Tuple[float, np.ndarray]:
    """Per-scene transform into the cube: identity when the mesh already fits
    inside ``[-margin, margin]^3``, otherwise centre the bounding box and scale
    its largest half-extent to ``margin``."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    if lo.min() >= -margin and hi.max() <= margin:
        return 1.0, np.zeros(3)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo).max()
    return margin / half, center


def mesh_samples(mesh: Mesh, scene_id: str, n_points: int = 16384, seed: int = 0,
                 margin: float = 0.95) -> SurfaceSampleSet:
    if len(mesh.faces) == 0 or len(mesh.vertices) == 0:
        raise EmptyMeshError(f"mesh {scene_id!r} is empty")
    degenerate = int((mesh.face_areas() <= 0).sum())
    if degenerate:
        log.warning("mesh %s: skipping %d degenerate faces", scene_id, degenerate)
    scale, offset = normalization_for(mesh.vertices, margin)
    rng = np.random.default_rng(seed)
    pts, normals = sample_mesh(mesh, n_points, rng)
    pts = (pts - offset) * scale
    return SurfaceSampleSet(scene_id, pts, normals, scale, offset, degenerate)


def mesh_corpus_ingest(paths: Sequence, n_points: int = 16384, seed: int = 0) -> List[SurfaceSampleSet]:
    """Load OBJ meshes and turn each into an area-weighted surface sample set."""
    out = []
    for k, p in enumerate(sorted(Path(p) for p in paths)):
        out.append(mesh_samples(read_obj(p), p.stem, n_points, seed + k))
    if not out:
        raise ValueError("empty corpus")
    return out


def sphere_corpus(radii: Sequence[float], n_points: int = 16384, seed: int = 0) -> List[SurfaceSampleSet]:
    """Analytic spheres at the origin, sampled uniformly with exact normals."""
    rng = np.random.default_rng(seed)
    out = []
    for k, r in enumerate(radii):
        n = rng.normal(size=(n_points, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        out.append(SurfaceSampleSet(f"sphere_{k:02d}", n * r, n))
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class PriorResult:
    field: MultiGridField
    log: RunLog
    seconds: float


def _offsurface(rng: torch.Generator, surf: torch.Tensor, n: int, std: float) -> torch.Tensor:
    n_uniform = n // 2
    uni = torch.rand(n_uniform, 3, generator=rng, dtype=surf.dtype) * 2.0 - 1.0
    idx = torch.randint(0, surf.shape[0], (n - n_uniform,), generator=rng)
    pert = surf[idx] + std * torch.randn(n - n_uniform, 3, generator=rng, dtype=surf.dtype)
    # perturbed samples must stay in the field's domain
    return torch.cat([uni, pert.clamp(-1.0, 1.0)])


def level_rms(field: MultiGridField) -> Dict[str, float]:
    return {f"grid_l{l}": float(g.detach().double().pow(2).mean().sqrt()) for l, g in zip(field.levels, field.grids)}


def train_prior(
    field: MultiGridField,
    corpus: Sequence[SurfaceSampleSet],
    loss_cfg: PriorLossConfig = PriorLossConfig(),
    sched: TrainSchedule = TrainSchedule(),
    train_cfg: PriorTrainConfig = PriorTrainConfig(),
    run_log: Optional[RunLog] = None,
    epochs: Optional[int] = None,
) -> PriorResult:
    """Fit shared grids and decoder plus one latent per scene.

    ``field`` must be geometrically initialised; its latents are replaced by
    one zero latent per corpus scene. ``epochs`` truncates the schedule
    (used by tests); the default runs all 7N epochs.
    """
    if not corpus:
        raise ValueError("empty corpus")
    run_log = run_log if run_log is not None else RunLog()
    field.reset_latents([s.scene_id for s in corpus])
    registry = ParameterRegistry.from_modules(field)
    opt = Adam(registry, lr=train_cfg.lr, decay=train_cfg.lr_decay, decay_every=train_cfg.lr_decay_every)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    dtype = field.dtype
    surfaces = [torch.as_tensor(s.points, dtype=dtype) for s in corpus]
    normals = [None if s.normals is None else torch.as_tensor(s.normals, dtype=dtype) for s in corpus]
    n_epochs = sched.total_epochs if epochs is None else min(epochs, sched.total_epochs)
    B = train_cfg.batches_per_epoch
    nf = field.encoder.num_frequencies
    run_log.write({"kind": "init", "phase": "prior", "checksums": registry.checksums()})
    t_start = time.perf_counter()

    for epoch in range(n_epochs):
        stage = sched.stage(epoch)
        registry.set_live(sched.live_groups(epoch))
        opt.set_epoch(epoch)
        order = torch.randperm(len(corpus) * B, generator=gen)
        sums = {"surf": 0.0, "emb": 0.0, "eik": 0.0, "normal": 0.0, "total": 0.0}
        updated = set()
        skipped = 0
        for step, flat in enumerate(order.tolist()):
            i = flat % len(corpus)
            field.encoder.set_mask_alpha(sched.mask_alpha(epoch + step / len(order), nf))
            surf_all = surfaces[i]
            idx = torch.randint(0, surf_all.shape[0], (train_cfg.surface_batch,), generator=gen)
            surf = surf_all[idx]
            off = _offsurface(gen, surf_all, train_cfg.offsurface_batch, train_cfg.offsurface_std)

            terms = {}
            if loss_cfg.normal_weight > 0 and normals[i] is not None:
                keep = ~on_voxel_boundary(surf, field.levels)
                surf_k = surf[keep].requires_grad_(True)
                d, z = field.evaluate(surf_k, i)
                (grad,) = torch.autograd.grad(d.sum(), surf_k, create_graph=True)
                gn = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)
                terms["normal"] = (1.0 - (gn * normals[i][idx][keep]).sum(-1)).mean()
            else:
                d, z = field.evaluate(surf, i)
            terms["surf"] = d.abs().mean()
            terms["emb"] = loss_embedding(field.latents[i], z, loss_cfg.sigma2)
            terms["eik"], nskip = loss_eikonal(field, off, i)
            skipped += nskip
            weights = {"surf": 1.0, "emb": loss_cfg.lambda_emb, "eik": loss_cfg.lambda_eik,
                       "normal": loss_cfg.normal_weight}
            try:
                grads = backward(terms, registry, weights, context=f"epoch {epoch}, scene {corpus[i].scene_id}")
            except NonFiniteLossError:
                log.error("non-finite prior loss at epoch %d scene %s", epoch, corpus[i].scene_id)
                raise
            upd = opt.step(grads)
            updated.update(k for k, v in upd.items() if v > 0)
            total = sum(weights[k] * grads.terms[k] for k in grads.terms)
            for k, v in grads.terms.items():
                sums[k] += v
            sums["total"] += total
        n_steps = len(order)
        rec = {
            "kind": "epoch", "phase": "prior", "epoch": epoch, "stage": stage,
            "loss": {k: v / n_steps for k, v in sums.items()},
            "lr": opt.lr, "mask_alpha": field.encoder.mask_alpha,
            "live": sorted(registry.live()), "updated": sorted(updated),
            "eikonal_skipped": skipped, "checksums": registry.checksums(),
            "seconds": time.perf_counter() - t_start,
        }
        run_log.write(rec)
        if epoch % 10 == 0 or epoch == n_epochs - 1:
            log.info("prior epoch %d [%s] surf=%.5f eik=%.5f emb=%.4f lr=%.2e",
                     epoch, stage, rec["loss"]["surf"], rec["loss"]["eik"], rec["loss"]["emb"], opt.lr)
    seconds = time.perf_counter() - t_start
    run_log.write({"kind": "summary", "phase": "prior", "epochs": n_epochs, "seconds": seconds,
                   "level_rms": level_rms(field),
                   "latent_norms": [float(v) for v in field.latents.detach().norm(dim=-1)]})
    return PriorResult(field, run_log, seconds)


def field_from_settings(cfg) -> MultiGridField:
    """Geometrically initialised field built from a resolved run configuration."""
    f = cfg.field
    dtype = torch.float64 if cfg.run.dtype == "float64" else torch.float32
    field = MultiGridField(levels=f.levels, feature_dim=f.feature_dim, num_frequencies=f.num_frequencies,
                           hidden=f.hidden, num_layers=f.num_layers, latent_dim=f.latent_dim,
                           softplus_beta=f.softplus_beta, include_input=f.include_input, dtype=dtype)
    return geometric_init(field, f.init_radius, seed=cfg.run.seed)


def prior_settings(cfg) -> Tuple[PriorLossConfig, TrainSchedule, PriorTrainConfig]:
    p = cfg.prior
    return (PriorLossConfig(p.lambda_emb, p.lambda_eik, p.sigma2, p.normal_weight),
            TrainSchedule(p.N),
            PriorTrainConfig(p.lr, p.lr_decay, p.lr_decay_every, p.batches_per_epoch, p.surface_batch,
                             p.offsurface_batch, p.offsurface_std, cfg.run.seed))
