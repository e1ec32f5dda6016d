"""Ray casting against SDFs, differentiable hit points, rendering networks and losses.

Camera convention: camera frame has x right, y up and looks down -z; the
pose maps camera to world. Pixel (u, v) has its origin at the top-left
corner of the image, v pointing down; pixel centres sit at half-integers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .field import PositionalEncoder

SDFFn = Callable[[torch.Tensor], torch.Tensor]


class GrazingRayError(ValueError):
    def __init__(self, count: int):
        self.count = count
        super().__init__(f"{count} ray(s) graze the surface (|grad d . v| < threshold)")


class DegenerateGradientError(ValueError):
    pass


class DegenerateIntervalError(ValueError):
    pass


# --------------------------------------------------------------------------
# cameras and rays


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world-from-camera
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))  # camera centre in world

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9 or np.linalg.det(self.rotation) < 0:
            raise ValueError(f"rotation is not a proper orthonormal matrix (error {err:.3g})")

    @classmethod
    def look_at(cls, eye, target=(0, 0, 0), up=(0, 1, 0), fov_deg: float = 30.0,
                width: int = 128, height: int = 128) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        rot = np.stack([right, true_up, back], axis=1)
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, rot, eye)

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) pixel-centre coordinates (u, v) in row-major order."""
        v, u = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return np.stack([u.reshape(-1), v.reshape(-1)], axis=-1)

    def to_dict(self) -> Dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "position": self.position.tolist()}

    @classmethod
    def from_dict(cls, d: Dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["rotation"]), np.array(d["position"]))


@dataclass
class Rays:
    origins: torch.Tensor  # (N, 3)
    dirs: torch.Tensor  # (N, 3) unit
    near: torch.Tensor  # (N,)
    far: torch.Tensor  # (N,)
    valid: torch.Tensor  # (N,) bool: the ray crosses the cube

    def __len__(self) -> int:
        return self.origins.shape[0]

    def at(self, t: torch.Tensor) -> torch.Tensor:
        """Points ``o + t v``; t has shape (N,) or (N, K)."""
        if t.dim() == 1:
            return self.origins + t.unsqueeze(-1) * self.dirs
        return self.origins.unsqueeze(1) + t.unsqueeze(-1) * self.dirs.unsqueeze(1)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.valid[idx])


def clip_to_cube(origins: torch.Tensor, dirs: torch.Tensor, bound: float = 1.0):
    """Slab test against [-bound, bound]^3. Returns (near, far, valid)."""
    with torch.no_grad():
        inv = 1.0 / torch.where(dirs == 0, torch.full_like(dirs, 1e-300), dirs)
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
        near = torch.minimum(t0, t1).max(dim=-1).values.clamp_min(0.0)
        far = torch.maximum(t0, t1).min(dim=-1).values
        valid = far > near
    return near, far, valid


def make_rays(origins: torch.Tensor, dirs: torch.Tensor) -> Rays:
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    near, far, valid = clip_to_cube(origins, dirs)
    return Rays(origins, dirs, near, far, valid)


def generate_rays(cam: Camera, pixels, dtype=torch.float64) -> Rays:
    """World-space unit rays through the given (N, 2) pixel coordinates."""
    px = torch.as_tensor(np.asarray(pixels, dtype=np.float64), dtype=dtype).reshape(-1, 2)
    d_cam = torch.stack([(px[:, 0] - cam.cx) / cam.fx, -(px[:, 1] - cam.cy) / cam.fy,
                         -torch.ones(px.shape[0], dtype=dtype)], dim=-1)
    rot = torch.as_tensor(cam.rotation, dtype=dtype)
    dirs = d_cam @ rot.T
    origins = torch.as_tensor(cam.position, dtype=dtype).expand(px.shape[0], 3).clone()
    return make_rays(origins, dirs)


def _inside(x: torch.Tensor) -> torch.Tensor:
    # Sample positions are o + t v with t inside the clip interval; the clamp
    # only removes round-off of order 1e-16.
    return x.clamp(-1.0, 1.0)


def _eval(fn: SDFFn, pts: torch.Tensor, chunk: int = 1 << 17) -> torch.Tensor:
    flat = _inside(pts.reshape(-1, 3))
    with torch.no_grad():
        out = torch.cat([fn(flat[s:s + chunk]) for s in range(0, flat.shape[0], chunk)]) if flat.shape[0] else flat[:, 0]
    return out.reshape(pts.shape[:-1]).to(pts.dtype)


# --------------------------------------------------------------------------
# intersection


@dataclass
class IntersectionResult:
    hit: torch.Tensor  # (N,) bool
    t: torch.Tensor  # (N,) ray parameter (inf on miss)
    x: torch.Tensor  # (N, 3) hit point (undefined on miss)
    t_lo: torch.Tensor  # bracket of the sign change
    t_hi: torch.Tensor
    started_inside: torch.Tensor  # (N,) bool
    evals: torch.Tensor  # (N,) field evaluations spent on each ray
    t_min: Optional[torch.Tensor] = None  # ray parameter of the smallest coarse sample
    d_min: Optional[torch.Tensor] = None

    def __len__(self):
        return self.hit.shape[0]


def _first_true(mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    any_ = mask.any(dim=-1)
    idx = mask.to(torch.int8).argmax(dim=-1)
    return any_, idx


def intersect_sampled(fn: SDFFn, rays: Rays, n_coarse: int = 64, n_fine: int = 32) -> IntersectionResult:
    """First zero crossing by uniform coarse sampling plus uniform refinement.

    ``n_coarse`` points are placed uniformly on [near, far]; inside the first
    interval whose endpoints change sign from + to -, ``n_fine`` points are
    placed uniformly and the crossing is linearly interpolated inside the first
    fine sub-interval with a sign change. Rays whose first sample is already
    inside are reported as hits at ``near`` with ``started_inside`` set.
    """
    if n_coarse < 2 or n_fine < 2:
        raise ValueError("need at least two coarse and two fine samples")
    n = len(rays)
    dtype = rays.origins.dtype
    if bool(((rays.far - rays.near)[rays.valid] <= 0).any()):
        raise DegenerateIntervalError("empty clip interval on a ray marked valid")
    s = torch.linspace(0.0, 1.0, n_coarse, dtype=dtype)
    near = torch.where(rays.valid, rays.near, torch.zeros_like(rays.near))
    far = torch.where(rays.valid, rays.far, torch.ones_like(rays.far))
    t = near.unsqueeze(-1) + (far - near).unsqueeze(-1) * s
    d = _eval(fn, rays.at(t))
    d = torch.where(rays.valid.unsqueeze(-1), d, torch.full_like(d, math.inf))

    started_inside = rays.valid & (d[:, 0] <= 0)
    change = (d[:, :-1] > 0) & (d[:, 1:] <= 0)
    has_change, first = _first_true(change)
    crossing = has_change & ~started_inside
    dmin, imin = d.min(dim=-1)
    t_min = t.gather(1, imin.unsqueeze(-1)).squeeze(-1)

    t_hit = torch.full((n,), math.inf, dtype=dtype)
    t_lo = torch.full((n,), math.nan, dtype=dtype)
    t_hi = torch.full((n,), math.nan, dtype=dtype)
    evals = torch.where(rays.valid, torch.full((n,), n_coarse), torch.zeros(n, dtype=torch.long))

    idx = crossing.nonzero().squeeze(-1)
    if idx.numel():
        i = first[idx]
        a = t[idx, i]
        b = t[idx, i + 1]
        sf = torch.linspace(0.0, 1.0, n_fine, dtype=dtype)
        tf = a.unsqueeze(-1) + (b - a).unsqueeze(-1) * sf
        df = _eval(fn, rays.subset(idx).at(tf))
        # endpoints reuse the coarse values so the bracket is consistent
        df[:, 0] = d[idx, i]
        df[:, -1] = d[idx, i + 1]
        fchange = (df[:, :-1] > 0) & (df[:, 1:] <= 0)
        _, j = _first_true(fchange)
        ar = torch.arange(idx.numel())
        lo, hi = tf[ar, j], tf[ar, j + 1]
        dlo, dhi = df[ar, j], df[ar, j + 1]
        frac = dlo / (dlo - dhi)
        t_hit[idx] = lo + frac * (hi - lo)
        t_lo[idx] = lo
        t_hi[idx] = hi
        evals[idx] += n_fine - 2
    si = started_inside.nonzero().squeeze(-1)
    t_hit[si] = near[si]
    t_lo[si] = near[si]
    t_hi[si] = near[si]
    hit = crossing | started_inside
    x = _inside(rays.at(torch.where(hit, t_hit, near)))
    return IntersectionResult(hit, t_hit, x, t_lo, t_hi, started_inside, evals, t_min, dmin)


def _bisect(fn: SDFFn, rays: Rays, lo: torch.Tensor, hi: torch.Tensor, iters: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Shrink brackets with d(lo) > 0 >= d(hi)."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        dm = _eval(fn, rays.at(mid))
        pos = dm > 0
        lo = torch.where(pos, mid, lo)
        hi = torch.where(pos, hi, mid)
    return lo, hi


def intersect_sphere_trace(
    fn: SDFFn,
    rays: Rays,
    max_iters: int = 256,
    surface_eps: float = 1e-5,
    probe_steps: int = 14,
    bisect_iters: int = 40,
) -> IntersectionResult:
    """Classic sphere tracing with a bracketing finish.

    March ``t <- t + d(x(t))`` until ``|d| <= surface_eps``; a negative value
    (overshoot on a non-Lipschitz field) brackets the root with the previous
    position. After convergence the root is bracketed by probing forward at
    geometrically growing offsets, then refined by bisection. Converged rays
    that find no sign change (tangential approach) are misses.
    """
    n = len(rays)
    dtype = rays.origins.dtype
    near = torch.where(rays.valid, rays.near, torch.zeros_like(rays.near))
    far = torch.where(rays.valid, rays.far, torch.zeros_like(rays.far))
    t = near.clone()
    t_prev = near.clone()
    evals = torch.zeros(n, dtype=torch.long)
    active = rays.valid.clone()
    converged = torch.zeros(n, dtype=torch.bool)
    overshot = torch.zeros(n, dtype=torch.bool)
    started_inside = torch.zeros(n, dtype=torch.bool)

    for it in range(max_iters):
        idx = active.nonzero().squeeze(-1)
        if idx.numel() == 0:
            break
        d = _eval(fn, rays.subset(idx).at(t[idx]))
        evals[idx] += 1
        if it == 0:
            inside = d <= 0
            started_inside[idx[inside]] = True
            active[idx[inside]] = False
            keep = ~inside
            idx, d = idx[keep], d[keep]
        conv = (d >= 0) & (d <= surface_eps)
        over = d < 0
        converged[idx[conv]] = True
        overshot[idx[over]] = True
        active[idx[conv | over]] = False
        step = ~(conv | over)
        sidx = idx[step]
        t_prev[sidx] = t[sidx]
        t[sidx] = t[sidx] + d[step]
        beyond = t[sidx] > far[sidx]
        active[sidx[beyond]] = False
    t_lo = torch.full((n,), math.nan, dtype=dtype)
    t_hi = torch.full((n,), math.nan, dtype=dtype)

    oidx = overshot.nonzero().squeeze(-1)
    t_lo[oidx], t_hi[oidx] = t_prev[oidx], t[oidx]

    cidx = converged.nonzero().squeeze(-1)
    found = torch.zeros(n, dtype=torch.bool)
    if cidx.numel():
        offs = surface_eps * (2.0 ** torch.arange(1, probe_steps + 1, dtype=dtype))
        tp = t[cidx].unsqueeze(-1) + offs
        tp = torch.minimum(tp, far[cidx].unsqueeze(-1))
        dp = _eval(fn, rays.subset(cidx).at(tp))
        evals[cidx] += probe_steps
        neg = dp <= 0
        any_neg, j = _first_true(neg)
        ar = torch.arange(cidx.numel())
        prev_t = torch.where(j > 0, tp[ar, (j - 1).clamp_min(0)], t[cidx])
        ok = cidx[any_neg]
        t_lo[ok] = prev_t[any_neg]
        t_hi[ok] = tp[ar, j][any_neg]
        found[ok] = True
    bracketed = found | overshot
    bidx = bracketed.nonzero().squeeze(-1)
    t_hit = torch.full((n,), math.inf, dtype=dtype)
    if bidx.numel():
        sub = rays.subset(bidx)
        lo, hi = _bisect(fn, sub, t_lo[bidx], t_hi[bidx], bisect_iters)
        evals[bidx] += bisect_iters
        t_hit[bidx] = 0.5 * (lo + hi)
    si = started_inside.nonzero().squeeze(-1)
    t_hit[si] = near[si]
    t_lo[si] = near[si]
    t_hi[si] = near[si]
    hit = bracketed | started_inside
    x = _inside(rays.at(torch.where(hit, t_hit, near)))
    return IntersectionResult(hit, t_hit, x, t_lo, t_hi, started_inside, evals)


def dense_first_root(fn: SDFFn, rays: Rays, n_samples: int = 100_000, chunk_rays: int = 16) -> torch.Tensor:
    """Brute-force first + to - crossing on ``n_samples`` uniform samples, refined by bisection.

    Test oracle; returns inf for rays without a crossing.
    """
    out = torch.full((len(rays),), math.inf, dtype=rays.origins.dtype)
    s = torch.linspace(0.0, 1.0, n_samples, dtype=rays.origins.dtype)
    for start in range(0, len(rays), chunk_rays):
        sub = rays.subset(slice(start, start + chunk_rays))
        t = sub.near.unsqueeze(-1) + (sub.far - sub.near).unsqueeze(-1) * s
        d = _eval(fn, sub.at(t))
        change = (d[:, :-1] > 0) & (d[:, 1:] <= 0)
        has, i = _first_true(change)
        ok = (has & sub.valid).nonzero().squeeze(-1)
        if ok.numel():
            lo, hi = _bisect(fn, sub.subset(ok), t[ok, i[ok]], t[ok, i[ok] + 1], 60)
            out[start + ok] = 0.5 * (lo + hi)
    return out


# --------------------------------------------------------------------------
# differentiable hit point


def differentiable_hit(
    field,
    rays: Rays,
    x0: torch.Tensor,
    scene=None,
    grazing_threshold: float = 1e-4,
    drop_grazing: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Hit points that depend on the field parameters through implicit differentiation.

    ``x_diff = x0 - v (d(x0) - sg[d(x0)]) / sg[grad d(x0) . v]`` where ``sg``
    stops gradients. The value equals ``x0`` exactly; the parameter gradient
    is that of ``x0 - v d(x0) / (grad d(x0) . v)``.

    Returns ``(x_diff, keep)`` where ``keep`` masks out grazing rays. Unless
    ``drop_grazing`` is set, any grazing ray raises :class:`GrazingRayError`.
    """
    x0 = x0.detach()
    v = rays.dirs.detach()
    _, grad0, _ = field.spatial_gradient(x0, scene)
    denom = (grad0 * v).sum(-1)
    keep = denom.abs() >= grazing_threshold
    if not bool(keep.all()):
        if not drop_grazing:
            raise GrazingRayError(int((~keep).sum()))
        x0, v, denom = x0[keep], v[keep], denom[keep]
    d = field(x0, scene)
    return implicit_hit(x0, v, d, denom), keep


def implicit_hit(x0: torch.Tensor, v: torch.Tensor, d: torch.Tensor, denom: torch.Tensor) -> torch.Tensor:
    """``x0 - v (d - sg[d]) / denom`` for a live SDF value ``d`` and a constant ``denom = grad d . v``."""
    return x0.detach() - v * ((d - d.detach()) / denom.detach()).unsqueeze(-1)


# --------------------------------------------------------------------------
# rendering networks


def _seeded_linear(gen: torch.Generator, a: int, b: int, dtype) -> nn.Linear:
    layer = nn.Linear(a, b).to(dtype)
    bound = 1.0 / math.sqrt(a)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


class RenderNets(nn.Module):
    """Radiance ``R([pe_R(x), n, Q(pe_Q(x)), v])``.

    Q: ``q_layers`` affine maps of width ``width`` with Softplus, a skip that
    concatenates the network input to the output of layer ``q_skip``, and a
    linear output of size ``feature_dim``. R: ``r_layers`` affine maps with
    ReLU between them and tanh on the 3-channel output.
    """

    def __init__(self, width: int = 512, q_layers: int = 8, q_skip: int = 4, feature_dim: int = 256,
                 r_layers: int = 4, q_frequencies: int = 6, r_frequencies: int = 4,
                 softplus_beta: float = 100.0, seed: int = 0, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.pe_q = PositionalEncoder(q_frequencies)
        self.pe_r = PositionalEncoder(r_frequencies)
        self.q_skip = q_skip
        self.softplus_beta = softplus_beta
        self.feature_dim = feature_dim
        self.width = width
        q_in = self.pe_q.out_dim
        dims_in = [q_in] + [width] * (q_layers - 1)
        dims_out = [width] * (q_layers - 1) + [feature_dim]
        if 0 < q_skip < q_layers:
            dims_in[q_skip] += q_in
        self.q = nn.ModuleList(_seeded_linear(gen, a, b, dtype) for a, b in zip(dims_in, dims_out))
        r_in = self.pe_r.out_dim + 3 + feature_dim + 3
        rdims = [r_in] + [width] * (r_layers - 1) + [3]
        self.r = nn.ModuleList(_seeded_linear(gen, a, b, dtype) for a, b in zip(rdims[:-1], rdims[1:]))
        self.to(dtype)

    def config(self) -> Dict:
        return {"width": self.width, "q_layers": len(self.q), "q_skip": self.q_skip,
                "feature_dim": self.feature_dim, "r_layers": len(self.r),
                "q_frequencies": self.pe_q.num_frequencies, "r_frequencies": self.pe_r.num_frequencies,
                "softplus_beta": self.softplus_beta}

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        return {"render_Q": list(self.q.parameters()), "render_R": list(self.r.parameters())}

    def features(self, x: torch.Tensor) -> torch.Tensor:
        inp = self.pe_q(x)
        h = inp
        for i, layer in enumerate(self.q):
            if i == self.q_skip:
                h = torch.cat([h, inp], dim=-1)
            h = layer(h)
            if i < len(self.q) - 1:
                h = F.softplus(h, beta=self.softplus_beta)
        return h

    def forward(self, x: torch.Tensor, n: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        h = torch.cat([self.pe_r(x), n, self.features(x), v], dim=-1)
        for i, layer in enumerate(self.r):
            h = layer(h)
            h = torch.relu(h) if i < len(self.r) - 1 else torch.tanh(h)
        return h


def render_radiance(nets: RenderNets, x_diff: torch.Tensor, n: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return nets(x_diff, n, v)


# --------------------------------------------------------------------------
# losses


def loss_rgb(pred: torch.Tensor, target: torch.Tensor, select: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean absolute error over the selected rays (hit and inside the mask)."""
    if select is not None:
        pred, target = pred[select], target[select]
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return (pred - target).abs().mean()


def loss_mask(d_min: torch.Tensor, labels: torch.Tensor, alpha: float = 50.0,
              num_rays: Optional[int] = None) -> torch.Tensor:
    """Soft silhouette loss.

    Binary cross-entropy between the mask label and ``sigmoid(-alpha * d_min)``
    for the rays handed in (those not both hitting and in the mask), summed and
    divided by ``alpha * num_rays`` where ``num_rays`` counts the whole batch.
    """
    if num_rays is None:
        num_rays = d_min.shape[0]
    if d_min.numel() == 0 or num_rays == 0:
        return d_min.sum() * 0.0
    bce = F.binary_cross_entropy_with_logits(-alpha * d_min, labels.to(d_min.dtype), reduction="sum")
    return bce / (alpha * num_rays)


def loss_normal(grad: torch.Tensor, n_hat: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """``mean(1 - <grad d, n_hat>)`` with ``grad d`` normalised unless ``normalize`` is off."""
    if grad.numel() == 0:
        return grad.sum() * 0.0
    norm = grad.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-8).any()):
        raise DegenerateGradientError(f"{int((norm < 1e-8).sum())} SDF gradient(s) vanish")
    g = grad / norm if normalize else grad
    return (1.0 - (g * n_hat).sum(-1)).mean()
