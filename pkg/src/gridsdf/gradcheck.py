"""Finite-difference validation of every differentiable path used in training.

Each check draws a fresh random configuration per trial and compares the
autograd gradient with central differences, reporting the relative L2 error
``|g_auto - g_fd| / |g_fd|``. Everything runs in float64.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .field import (MultiGridField, PositionalEncoder, distance_to_voxel_faces, geometric_init, interpolate)
from .render import (RenderNets, implicit_hit, intersect_sampled, loss_mask, loss_normal, make_rays)

DT = torch.float64


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:28s} trials={self.trials:4d} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e}"


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    den = float(b.norm())
    num = float((a - b).norm())
    return num / den if den > 0 else num


def fd_input(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float) -> torch.Tensor:
    """Jacobian-vector rows of a scalar-per-row function by central differences: (N, D)."""
    out = torch.zeros_like(x)
    for j in range(x.shape[-1]):
        e = torch.zeros_like(x)
        e[..., j] = h
        out[..., j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def fd_params(loss: Callable[[], torch.Tensor], probes: Sequence[Tuple[torch.Tensor, int]], h: float) -> torch.Tensor:
    vals = []
    with torch.no_grad():
        for p, i in probes:
            flat = p.view(-1)
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss())
            flat[i] = old - h
            down = float(loss())
            flat[i] = old
            vals.append((up - down) / (2 * h))
    return torch.tensor(vals, dtype=DT)


def auto_params(loss: Callable[[], torch.Tensor], probes: Sequence[Tuple[torch.Tensor, int]]) -> torch.Tensor:
    params = list({id(p): p for p, _ in probes}.values())
    grads = torch.autograd.grad(loss(), params, allow_unused=True)
    by_id = {id(p): (torch.zeros_like(p) if g is None else g) for p, g in zip(params, grads)}
    return torch.stack([by_id[id(p)].reshape(-1)[i] for p, i in probes]).detach()


def pick(gen: torch.Generator, params: Sequence[torch.Tensor], k: int) -> List[Tuple[torch.Tensor, int]]:
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    which = torch.multinomial(sizes, k, replacement=True, generator=gen)
    return [(params[w], int(torch.randint(0, params[w].numel(), (1,), generator=gen))) for w in which.tolist()]


def pick_mixed(gen: torch.Generator, params: Sequence[torch.Tensor], loss: Callable[[], torch.Tensor],
               k: int) -> List[Tuple[torch.Tensor, int]]:
    """Half the probes where autograd sees a gradient, half anywhere.

    Grid parameters are huge and a few points touch a handful of corners, so
    uniform picks alone would mostly compare zero with zero. The uniform half
    still catches gradients autograd misses entirely.
    """
    grads = torch.autograd.grad(loss(), list(params), allow_unused=True)
    support = [(p, (g.reshape(-1) != 0).nonzero().squeeze(-1)) for p, g in zip(params, grads) if g is not None]
    support = [(p, idx) for p, idx in support if idx.numel() > 0]
    probes = []
    for _ in range(k // 2 if support else 0):
        p, idx = support[int(torch.randint(0, len(support), (1,), generator=gen))]
        probes.append((p, int(idx[int(torch.randint(0, idx.numel(), (1,), generator=gen))])))
    return probes + pick(gen, params, k - len(probes))


def interior_points(gen: torch.Generator, n: int, levels=(4, 5, 6), margin: float = 1e-3,
                    radius: float = 0.9) -> torch.Tensor:
    """Random points in [-radius, radius]^3 at least ``margin`` away from every voxel face."""
    pts = []
    while sum(p.shape[0] for p in pts) < n:
        x = (torch.rand(4 * n, 3, generator=gen, dtype=DT) * 2 - 1) * radius
        pts.append(x[distance_to_voxel_faces(x, levels) > margin])
    return torch.cat(pts)[:n]


def probe_field(seed: int, hidden: int = 32, latent_dim: int = 16, alpha: float = 4.5) -> MultiGridField:
    """Small float64 field with nonzero grids, latent and a fractional encoder mask."""
    gen = torch.Generator().manual_seed(seed)
    f = MultiGridField(hidden=hidden, latent_dim=latent_dim, dtype=DT)
    geometric_init(f, 0.5, seed=seed)
    with torch.no_grad():
        for g in f.grids:
            g.copy_(0.05 * torch.randn(g.shape, generator=gen, dtype=DT))
        f.latents.copy_(0.1 * torch.randn(f.latents.shape, generator=gen, dtype=DT))
        for layer in f.decoder.layers:
            layer.weight.add_(0.05 * torch.randn(layer.weight.shape, generator=gen, dtype=DT))
    f.encoder.set_mask_alpha(alpha)
    return f


# --------------------------------------------------------------------------
# individual checks; each returns the per-trial relative errors


def check_interpolate_x(gen, trials):
    errs = []
    for _ in range(trials):
        level = int(torch.randint(2, 7, (1,), generator=gen))
        r = 2 ** level + 1
        grid = torch.randn(r, r, r, 4, generator=gen, dtype=DT)
        x = interior_points(gen, 1, levels=(level,), margin=1e-4)
        w = torch.randn(4, generator=gen, dtype=DT)
        fn = lambda p: interpolate(grid, p) @ w
        xq = x.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(fn(xq).sum(), xq)
        errs.append(rel_err(g, fd_input(fn, x, 1e-6)))
    return errs


def check_interpolate_grid(gen, trials):
    errs = []
    for _ in range(trials):
        grid = torch.randn(9, 9, 9, 3, generator=gen, dtype=DT).requires_grad_(True)
        x = (torch.rand(8, 3, generator=gen, dtype=DT) * 2 - 1)
        w = torch.randn(3, generator=gen, dtype=DT)
        loss = lambda: (interpolate(grid, x) @ w).pow(2).sum()
        probes = pick_mixed(gen, [grid], loss, 16)
        errs.append(rel_err(auto_params(loss, probes), fd_params(loss, probes, 1e-6)))
    return errs


def check_encoder(gen, trials):
    errs = []
    for _ in range(trials):
        pe = PositionalEncoder(6).to(DT)
        pe.set_mask_alpha(float(torch.rand(1, generator=gen)) * 6)
        w = torch.randn(pe.out_dim, generator=gen, dtype=DT)
        x = torch.rand(1, 3, generator=gen, dtype=DT) * 2 - 1
        fn = lambda p: pe(p) @ w
        xq = x.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(fn(xq).sum(), xq)
        errs.append(rel_err(g, fd_input(fn, x, 1e-6)))
    return errs


def check_sdf_x(gen, trials, field):
    errs = []
    for _ in range(trials):
        x = interior_points(gen, 1, margin=2e-4)
        _, g, _ = field.spatial_gradient(x)
        fd = fd_input(lambda p: field(p).detach(), x, 1e-4)
        errs.append(rel_err(g, fd))
    return errs


def _param_check(gen, trials, field, params, loss_of_field, k=16, h=1e-6):
    errs = []
    for _ in range(trials):
        x = interior_points(gen, 8, margin=1e-3)
        loss = lambda: loss_of_field(field, x)
        probes = pick_mixed(gen, params, loss, k)
        errs.append(rel_err(auto_params(loss, probes), fd_params(loss, probes, h)))
    return errs


def _sdf_loss(field, x):
    return (field(x) * torch.linspace(-1, 1, x.shape[0], dtype=DT)).sum()


def _eikonal(field, x):
    _, g, _ = field.spatial_gradient(x, create_graph=True)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def _normal(field, x):
    _, g, _ = field.spatial_gradient(x, create_graph=True)
    n = torch.nn.functional.normalize(torch.sin(3.0 * x + 1.0), dim=-1)
    return loss_normal(g, n)


def _mask(field, x):
    labels = torch.arange(x.shape[0]) % 2 == 0
    return loss_mask(field(x), labels, alpha=50.0)


def check_render(gen, trials, nets):
    params = [p for p in nets.parameters()]
    errs = []
    for _ in range(trials):
        x = torch.rand(4, 3, generator=gen, dtype=DT) * 2 - 1
        n = torch.nn.functional.normalize(torch.randn(4, 3, generator=gen, dtype=DT), dim=-1)
        v = torch.nn.functional.normalize(torch.randn(4, 3, generator=gen, dtype=DT), dim=-1)
        w = torch.randn(4, 3, generator=gen, dtype=DT)
        loss = lambda: (nets(x, n, v) * w).sum()
        probes = pick_mixed(gen, params, loss, 16)
        e1 = rel_err(auto_params(loss, probes), fd_params(loss, probes, 1e-6))
        xq = x.clone().requires_grad_(True)
        (gx,) = torch.autograd.grad((nets(xq, n, v) * w).sum(), xq)
        fx = fd_input(lambda p: (nets(p, n, v) * w).sum(-1).detach(), x, 1e-6)
        errs.append(max(e1, rel_err(gx, fx)))
    return errs


def _exact_root(field, o, v, t_lo, t_hi, iters=60):
    """Ray parameter of the zero crossing in [t_lo, t_hi]: bisection then Newton polish."""
    with torch.no_grad():
        for _ in range(iters):
            mid = 0.5 * (t_lo + t_hi)
            pos = field(o + mid.unsqueeze(-1) * v) > 0
            t_lo = torch.where(pos, mid, t_lo)
            t_hi = torch.where(pos, t_hi, mid)
    return _newton_root(field, o, v, 0.5 * (t_lo + t_hi), 3)


def _newton_root(field, o, v, t, iters=4):
    for _ in range(iters):
        d, g, _ = field.spatial_gradient(o + t.unsqueeze(-1) * v)
        t = t - d.detach() / (g * v).sum(-1)
    return t.detach()


def check_differentiable_hit(gen, trials, field, h=1e-5):
    """Motion of the true intersection along v vs the implicit-hit gradient."""
    params = [p for l in field.decoder.layers for p in l.parameters()] + list(field.grids)
    errs = []
    done = 0
    while done < trials:
        target = torch.nn.functional.normalize(torch.randn(1, 3, generator=gen, dtype=DT), dim=-1) * 0.2
        o = torch.nn.functional.normalize(torch.randn(1, 3, generator=gen, dtype=DT), dim=-1) * 3.0
        rays = make_rays(o, target - o)
        res = intersect_sampled(field.as_function(), rays, 64, 32)
        if not bool(res.hit[0]) or bool(res.started_inside[0]):
            continue
        v = rays.dirs
        t0 = _exact_root(field, o, v, res.t_lo, res.t_hi)
        x0 = o + t0.unsqueeze(-1) * v
        if distance_to_voxel_faces(x0, field.levels).min() < 1e-3:
            continue
        _, g0, _ = field.spatial_gradient(x0)
        denom = (g0 * v).sum(-1)
        if float(denom.abs().min()) < 0.1:
            continue

        def along():
            d = field(x0)
            return (implicit_hit(x0, v, d, denom) * v).sum()

        # a perturbation of size h moves the root by O(h), well inside Newton's basin
        probes = pick_mixed(gen, params, along, 8)
        auto = auto_params(along, probes)
        fd = fd_params(lambda: _newton_root(field, o, v, t0).sum(), probes, h)
        errs.append(rel_err(auto, fd))
        done += 1
    return errs


# --------------------------------------------------------------------------


def run_suite(trials: int = 100, seed: int = 0, names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    field = probe_field(seed)
    nets = RenderNets(width=16, q_layers=4, q_skip=2, feature_dim=8, r_layers=3, seed=seed, dtype=DT)
    dec = [p for l in field.decoder.layers for p in l.parameters()]
    grids = list(field.grids)
    checks: Dict[str, Tuple[Callable[[], List[float]], float]] = {
        "interpolate/x": (lambda: check_interpolate_x(gen, trials), 1e-4),
        "interpolate/grid": (lambda: check_interpolate_grid(gen, trials), 1e-4),
        "encoder/x": (lambda: check_encoder(gen, trials), 1e-4),
        "sdf/x": (lambda: check_sdf_x(gen, trials, field), 1e-4),
        "sdf/decoder": (lambda: _param_check(gen, trials, field, dec, _sdf_loss), 1e-4),
        "sdf/grids": (lambda: _param_check(gen, trials, field, grids, _sdf_loss), 1e-4),
        "sdf/latent": (lambda: _param_check(gen, trials, field, [field.latents], _sdf_loss), 1e-4),
        "mask_loss/params": (lambda: _param_check(gen, trials, field, dec + grids, _mask), 1e-4),
        "eikonal/params": (lambda: _param_check(gen, trials, field, dec + grids, _eikonal), 1e-3),
        "normal_loss/params": (lambda: _param_check(gen, trials, field, dec + grids, _normal), 1e-3),
        "render/params+x": (lambda: check_render(gen, trials, nets), 1e-4),
        "differentiable_hit/params": (lambda: check_differentiable_hit(gen, trials, field), 1e-3),
    }
    out = []
    for name, (fn, tol) in checks.items():
        if names and name not in names:
            continue
        errs = fn()
        out.append(CheckResult(name, len(errs), max(errs), tol))
    return out
