"""Closed-form signed distance functions used as oracles and synthetic ground truth.

Every shape is a callable mapping (N, 3) points to (N,) signed distances
(negative inside). Sphere and ellipsoid also provide exact ray intersection.
"""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch


def _vec(v, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(v, dtype=like.dtype, device=like.device)


class Shape:
    """Base class; subclasses implement ``__call__`` and optionally ``ray_intersect``."""

    exact_distance = True

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def gradient(self, x: torch.Tensor) -> torch.Tensor:
        with torch.enable_grad():
            xq = x.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(self(xq).sum(), xq)
        return g

    def normal(self, x: torch.Tensor) -> torch.Tensor:
        g = self.gradient(x)
        return g / g.norm(dim=-1, keepdim=True).clamp_min(1e-300)

    def ray_intersect(self, origins: torch.Tensor, dirs: torch.Tensor) -> Optional[torch.Tensor]:
        """Smallest positive hit parameter per ray (inf on miss), or None if unsupported."""
        return None

    def project(self, x: torch.Tensor, iters: int = 30) -> torch.Tensor:
        """Newton projection of points onto the zero level set."""
        x = x.clone()
        for _ in range(iters):
            g = self.gradient(x)
            d = self(x)
            x = x - (d / (g * g).sum(-1).clamp_min(1e-300)).unsqueeze(-1) * g
        return x


class Sphere(Shape):
    def __init__(self, radius: float = 0.5, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = tuple(float(c) for c in center)

    def __call__(self, x):
        return (x - _vec(self.center, x)).norm(dim=-1) - self.radius

    def ray_intersect(self, origins, dirs):
        oc = origins - _vec(self.center, origins)
        b = (oc * dirs).sum(-1)
        c = (oc * oc).sum(-1) - self.radius ** 2
        disc = b * b - c
        sq = disc.clamp_min(0).sqrt()
        t0, t1 = -b - sq, -b + sq
        t = torch.where(t0 > 0, t0, t1)
        return torch.where((disc >= 0) & (t > 0), t, torch.full_like(t, math.inf))


class Ellipsoid(Shape):
    """Ellipsoid with the usual bound ``k0 (k0 - 1) / k1``; exact zero set, not an exact distance."""

    exact_distance = False

    def __init__(self, radii=(0.3, 0.4, 0.5), center=(0.0, 0.0, 0.0)):
        self.radii = tuple(float(r) for r in radii)
        self.center = tuple(float(c) for c in center)

    def __call__(self, x):
        p = x - _vec(self.center, x)
        r = _vec(self.radii, x)
        k0 = (p / r).norm(dim=-1)
        k1 = (p / (r * r)).norm(dim=-1)
        return k0 * (k0 - 1.0) / k1.clamp_min(1e-300)

    def ray_intersect(self, origins, dirs):
        r = _vec(self.radii, origins)
        o = (origins - _vec(self.center, origins)) / r
        d = dirs / r
        a = (d * d).sum(-1)
        b = (o * d).sum(-1)
        c = (o * o).sum(-1) - 1.0
        disc = b * b - a * c
        sq = disc.clamp_min(0).sqrt()
        t0, t1 = (-b - sq) / a, (-b + sq) / a
        t = torch.where(t0 > 0, t0, t1)
        return torch.where((disc >= 0) & (t > 0), t, torch.full_like(t, math.inf))


class Box(Shape):
    """Axis-aligned box; ``rounding`` > 0 rounds the edges with that radius."""

    def __init__(self, half_extents=(0.3, 0.3, 0.3), center=(0.0, 0.0, 0.0), rounding: float = 0.0):
        self.half_extents = tuple(float(h) for h in half_extents)
        self.center = tuple(float(c) for c in center)
        self.rounding = float(rounding)

    def __call__(self, x):
        q = (x - _vec(self.center, x)).abs() - _vec(self.half_extents, x) + self.rounding
        outside = q.clamp_min(0).norm(dim=-1)
        inside = q.max(dim=-1).values.clamp_max(0)
        return outside + inside - self.rounding


class Torus(Shape):
    """Torus around the y axis."""

    def __init__(self, major: float = 0.45, minor: float = 0.15, center=(0.0, 0.0, 0.0)):
        self.major = float(major)
        self.minor = float(minor)
        self.center = tuple(float(c) for c in center)

    def __call__(self, x):
        p = x - _vec(self.center, x)
        q = torch.stack([torch.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2) - self.major, p[:, 1]], dim=-1)
        return q.norm(dim=-1) - self.minor


class Union(Shape):
    def __init__(self, parts: Sequence[Shape]):
        self.parts = list(parts)
        self.exact_distance = all(p.exact_distance for p in self.parts)

    def __call__(self, x):
        d = self.parts[0](x)
        for p in self.parts[1:]:
            d = torch.minimum(d, p(x))
        return d

    def ray_intersect(self, origins, dirs):
        ts = [p.ray_intersect(origins, dirs) for p in self.parts]
        if any(t is None for t in ts):
            return None
        t = ts[0]
        for other in ts[1:]:
            t = torch.minimum(t, other)
        return t


class Scaled(Shape):
    """``s * shape(x)``: same zero set, gradient magnitude scaled by ``s``."""

    def __init__(self, shape: Shape, scale: float):
        self.shape = shape
        self.scale = float(scale)
        self.exact_distance = False

    def __call__(self, x):
        return self.scale * self.shape(x)


def blob_head() -> Union:
    """Head-like test object: a cranium sphere joined with a face ellipsoid."""
    return Union([
        Sphere(0.40, (0.0, 0.08, -0.04)),
        Ellipsoid((0.27, 0.32, 0.28), (0.0, -0.10, 0.12)),
    ])


SHAPES = {
    "sphere": lambda: Sphere(0.5),
    "torus": lambda: Torus(0.45, 0.15),
    "box": lambda: Box((0.35, 0.3, 0.4), rounding=0.05),
    "box_sharp": lambda: Box((0.35, 0.3, 0.4)),
    "union": lambda: Union([Sphere(0.3, (-0.35, 0.0, 0.0)),
                            Box((0.22, 0.25, 0.22), (0.35, 0.1, 0.0), rounding=0.06),
                            Torus(0.35, 0.15, (0.0, -0.4, 0.0))]),
    "blob_head": blob_head,
}

# scenes used for the sampler / sphere-tracer equivalence check
INTERSECTION_SCENES = ("sphere", "torus", "box", "union")


def make_shape(name: str) -> Shape:
    try:
        return SHAPES[name]()
    except KeyError:
        raise ValueError(f"unknown analytic shape {name!r}; choose from {sorted(SHAPES)}") from None


def sample_surface(shape: Shape, n: int, seed: int = 0, resolution: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted points on the zero set with unit normals.

    Samples a fine marching-cubes mesh of the shape, then projects the samples
    onto the exact zero set.
    """
    from .mesh import extract_mesh, sample_mesh

    mesh = extract_mesh(lambda x: shape(x), resolution=resolution, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    pts, _ = sample_mesh(mesh, n, rng)
    x = shape.project(torch.from_numpy(pts))
    return x.numpy(), shape.normal(x).numpy()
