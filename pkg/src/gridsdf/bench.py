"""Intersection benchmark and the sampler / sphere-tracer comparison."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch

from . import analytic
from .render import Rays, intersect_sampled, intersect_sphere_trace, make_rays

METHODS = ("sampled", "sphere")


class BenchmarkGateError(RuntimeError):
    """Correctness gate failed, so no timing is reported."""


def random_rays(n: int, seed: int = 0, dtype=torch.float64) -> Rays:
    """Rays from a sphere of radius 2.5-3 aimed at random points of [-0.7, 0.7]^3."""
    gen = torch.Generator().manual_seed(seed)
    o = torch.nn.functional.normalize(torch.randn(n, 3, generator=gen, dtype=dtype), dim=-1)
    o = o * (2.5 + 0.5 * torch.rand(n, 1, generator=gen, dtype=dtype))
    target = (torch.rand(n, 3, generator=gen, dtype=dtype) * 2 - 1) * 0.7
    return make_rays(o, target - o)


def run_method(fn: Callable, rays: Rays, method: str, n_coarse: int = 64, n_fine: int = 32,
               max_iters: int = 256, surface_eps: float = 1e-5):
    if method == "sampled":
        return intersect_sampled(fn, rays, n_coarse, n_fine)
    if method == "sphere":
        return intersect_sphere_trace(fn, rays, max_iters, surface_eps)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


@dataclass
class Agreement:
    rays: int
    agree: int
    both_hit: int
    surface_skips: int  # both report a hit but on different surfaces (|dt| > tol)
    max_dt: float

    @property
    def rate(self) -> float:
        return self.agree / self.rays


def compare_methods(fn: Callable, rays: Rays, dt_tol: float = 5e-3, **kw) -> Agreement:
    """Hit/miss agreement of the two finders.

    A ray on which both report a hit more than ``dt_tol`` apart found
    different surfaces, so it counts as a disagreement; ``max_dt`` is taken
    over the remaining common hits.
    """
    a = run_method(fn, rays, "sampled", **{k: v for k, v in kw.items() if k in ("n_coarse", "n_fine")})
    b = run_method(fn, rays, "sphere", **{k: v for k, v in kw.items() if k in ("max_iters", "surface_eps")})
    both = a.hit & b.hit
    dt = (a.t - b.t).abs()
    skip = both & (dt > dt_tol)
    matched = both & ~skip
    agree = (a.hit == b.hit) & ~skip
    max_dt = float(dt[matched].max()) if bool(matched.any()) else 0.0
    return Agreement(len(rays), int(agree.sum()), int(both.sum()), int(skip.sum()), max_dt)


def _gate(shape, rays: Rays, res, tol_d: float = 1e-3) -> None:
    hits = res.hit & ~res.started_inside
    if bool(hits.any()):
        d = shape(res.x[hits]).abs()
        if float(d.mean()) > tol_d:
            raise BenchmarkGateError(f"mean |d| at hits {float(d.mean()):.3g} exceeds {tol_d}")
    exact = shape.ray_intersect(rays.origins, rays.dirs)
    if exact is not None:
        exact = torch.where(rays.valid & (exact <= rays.far), exact, torch.full_like(exact, math.inf))
        agree = (torch.isfinite(exact) == res.hit).double().mean()
        if float(agree) < 0.99:
            raise BenchmarkGateError(f"hit decisions agree with the exact intersection on only {float(agree):.2%}")


def bench_intersect(scene: str, n_rays: int, method: str, threads: int = 1, seed: int = 0,
                    repeats: int = 3, **kw) -> Dict:
    """Time one method on one analytic scene after checking its output."""
    torch.set_num_threads(threads)
    shape = analytic.make_shape(scene)
    rays = random_rays(n_rays, seed)
    res = run_method(shape, rays, method, **kw)
    _gate(shape, rays, res)
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_method(shape, rays, method, **kw)
        best = min(best, time.perf_counter() - t0)
    hits = res.hit & ~res.started_inside
    mean_d = float(shape(res.x[hits]).abs().mean()) if bool(hits.any()) else float("nan")
    return {"method": method, "scene": scene, "rays": n_rays, "threads": threads,
            "seconds": best, "rays_per_s": n_rays / best,
            "hit_rate": float(res.hit.double().mean()), "mean_abs_d": mean_d}


CSV_FIELDS = ("method", "scene", "rays", "threads", "seconds", "rays_per_s", "hit_rate", "mean_abs_d")


def csv_rows(rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    if header:
        w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in CSV_FIELDS})
    return buf.getvalue()
