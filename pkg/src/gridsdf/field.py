"""Hybrid signed distance field: dense multi-level feature grids + shallow MLP.

A query ``x`` in ``[-1, 1]^3`` is mapped to

    d = decoder([pe(x), z(x), g])

where ``z(x)`` is the sum of trilinear interpolations from the feature grids
at levels 4, 5 and 6, ``pe`` a sinusoidal encoding with progressive masking
and ``g`` a per-scene global latent.
"""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_LEVELS = (4, 5, 6)


class OutOfDomainError(ValueError):
    """Raised when a query point lies outside the cube [-1, 1]^3."""


def check_domain(x: torch.Tensor) -> None:
    if x.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) coordinates, got shape {tuple(x.shape)}")
    bad = ~(x.detach().abs() <= 1.0).all(dim=-1)  # also catches NaN
    if bool(bad.any()):
        n = int(bad.sum())
        first = x.detach().reshape(-1, 3)[bad.reshape(-1)][0].tolist()
        raise OutOfDomainError(f"{n} point(s) outside [-1,1]^3, e.g. {first}")


def grid_resolution(level: int) -> int:
    return 2 ** level + 1


def corner_coordinates(level: int, dtype=torch.float64) -> torch.Tensor:
    """Coordinates of all corners, shape (R, R, R, 3), indexed [k, j, i] (z, y, x)."""
    r = grid_resolution(level)
    ax = -1.0 + 2.0 * torch.arange(r, dtype=dtype) / (r - 1)
    zz, yy, xx = torch.meshgrid(ax, ax, ax, indexing="ij")
    return torch.stack([xx, yy, zz], dim=-1)


def _voxel_coords(x: torch.Tensor, n: int) -> Tuple[torch.Tensor, torch.Tensor]:
    # Continuous index coordinates. A point exactly on a face is assigned to
    # the voxel with the smaller index (ceil - 1), clamped into range.
    u = (x + 1.0) * (0.5 * n)
    idx = (torch.ceil(u.detach()) - 1.0).clamp_(0, n - 1).long()
    return u, idx


def interpolate(grid: torch.Tensor, x: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Trilinear interpolation of corner features.

    Args:
        grid: (R, R, R, F) corner features indexed [z, y, x].
        x: (N, 3) query points in [-1, 1]^3.

    Returns:
        (N, F) interpolated features. Differentiable with respect to both
        ``grid`` and ``x`` (to any order inside a voxel).
    """
    if check:
        check_domain(x)
    r = grid.shape[0]
    n = r - 1
    feat = grid.shape[-1]
    u, idx = _voxel_coords(x, n)
    w = u - idx.to(u.dtype)  # (N, 3) in [0, 1]
    base = (idx[:, 2] * r + idx[:, 1]) * r + idx[:, 0]
    offsets = torch.tensor([dz * r * r + dy * r + dx for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
                           device=x.device)
    # one gather for all 8 corners keeps the backward to a single scatter
    corners = grid.reshape(-1, feat).index_select(0, (base.unsqueeze(-1) + offsets).reshape(-1))
    corners = corners.reshape(-1, 8, feat)
    wx = torch.stack([1.0 - w[:, 0], w[:, 0]], dim=-1)
    wy = torch.stack([1.0 - w[:, 1], w[:, 1]], dim=-1)
    wz = torch.stack([1.0 - w[:, 2], w[:, 2]], dim=-1)
    weights = (wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]).reshape(-1, 8)
    return (corners * weights.unsqueeze(-1)).sum(dim=1)


def on_voxel_boundary(x: torch.Tensor, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    """Boolean (N,) mask of points lying exactly on an interior voxel face at any level."""
    flag = torch.zeros(x.shape[0], dtype=torch.bool, device=x.device)
    for level in levels:
        n = 2 ** level
        u = (x.detach() + 1.0) * (0.5 * n)
        interior = (u > 0) & (u < n)
        flag |= ((u == torch.round(u)) & interior).any(dim=-1)
    return flag


def distance_to_voxel_faces(x: torch.Tensor, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    """Smallest distance (model units) from each point to an interior face at any level."""
    best = torch.full((x.shape[0],), float("inf"), dtype=x.dtype, device=x.device)
    for level in levels:
        n = 2 ** level
        u = (x.detach() + 1.0) * (0.5 * n)
        frac = u - torch.floor(u)
        dist = torch.minimum(frac, 1.0 - frac) * (2.0 / n)
        best = torch.minimum(best, dist.min(dim=-1).values)
    return best


def mask_weights(alpha: float, num_frequencies: int, dtype=torch.float64) -> torch.Tensor:
    """Cosine ramp weights w_k(alpha) for k = 0..num_frequencies-1."""
    k = torch.arange(num_frequencies, dtype=dtype)
    t = (alpha - k).clamp(0.0, 1.0)
    return (1.0 - torch.cos(t * math.pi)) / 2.0


class PositionalEncoder(nn.Module):
    """Sinusoidal encoding with log-linear frequencies 2^k * pi.

    Output layout: ``[x, sin(2^0 pi x), cos(2^0 pi x), sin(2^1 pi x), ...]``;
    the raw coordinate block is present only when ``include_input`` is set.
    """

    def __init__(self, num_frequencies: int, input_dim: int = 3, include_input: bool = True):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.input_dim = input_dim
        self.include_input = include_input
        self.register_buffer("freqs", (2.0 ** torch.arange(num_frequencies, dtype=torch.float64)) * math.pi)
        self.register_buffer("alpha", torch.tensor(float(num_frequencies), dtype=torch.float64))

    @property
    def out_dim(self) -> int:
        return self.input_dim * (2 * self.num_frequencies + int(self.include_input))

    @property
    def mask_alpha(self) -> float:
        return float(self.alpha)

    def set_mask_alpha(self, alpha: float) -> None:
        if not 0.0 <= alpha <= self.num_frequencies:
            raise ValueError(f"mask_alpha must lie in [0, {self.num_frequencies}], got {alpha}")
        self.alpha.fill_(float(alpha))

    def weights(self) -> torch.Tensor:
        return mask_weights(float(self.alpha), self.num_frequencies, dtype=self.freqs.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.num_frequencies == 0:
            return x if self.include_input else x[..., :0]
        arg = x.unsqueeze(-2) * self.freqs.to(x.dtype).unsqueeze(-1)  # (..., K, D)
        w = self.weights().to(x.dtype).unsqueeze(-1)
        bands = torch.stack([torch.sin(arg) * w, torch.cos(arg) * w], dim=-2)  # (..., K, 2, D)
        bands = bands.flatten(-3)
        if self.include_input:
            return torch.cat([x, bands], dim=-1)
        return bands


class Decoder(nn.Module):
    """Shallow MLP: affine maps with Softplus between them, no output activation."""

    def __init__(self, in_dim: int, hidden: int = 512, num_layers: int = 3, softplus_beta: float = 100.0):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [1]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.softplus_beta = softplus_beta

    def forward(self, h: torch.Tensor, first_bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            if i == 0 and first_bias is not None:
                h = F.linear(h, layer.weight[:, : h.shape[-1]], first_bias)
            else:
                h = layer(h)
            if i < len(self.layers) - 1:
                h = F.softplus(h, beta=self.softplus_beta)
        return h.squeeze(-1)


class MultiGridField(nn.Module):
    """The SDF ``d = decoder([pe(x), z(x), g])``.

    Parameters are organised in groups ``grid_l4``, ``grid_l5``, ``grid_l6``,
    ``decoder`` and ``latent`` (see :meth:`parameter_groups`).
    """

    def __init__(
        self,
        levels: Sequence[int] = DEFAULT_LEVELS,
        feature_dim: int = 8,
        num_frequencies: int = 6,
        hidden: int = 512,
        num_layers: int = 3,
        latent_dim: int = 256,
        scene_ids: Sequence[str] = ("scene",),
        softplus_beta: float = 100.0,
        include_input: bool = True,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.levels = tuple(int(l) for l in levels)
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.scene_ids: List[str] = list(scene_ids)
        self.grids = nn.ParameterList(
            nn.Parameter(torch.zeros((grid_resolution(l),) * 3 + (feature_dim,), dtype=dtype))
            for l in self.levels
        )
        self.encoder = PositionalEncoder(num_frequencies, 3, include_input)
        self.decoder = Decoder(self.encoder.out_dim + feature_dim + latent_dim, hidden, num_layers, softplus_beta)
        self.latents = nn.Parameter(torch.zeros(len(self.scene_ids), latent_dim, dtype=dtype))
        self.to(dtype)
        self.active_scene = 0

    # -- configuration ----------------------------------------------------
    def config(self) -> Dict:
        return {
            "levels": list(self.levels),
            "feature_dim": self.feature_dim,
            "num_frequencies": self.encoder.num_frequencies,
            "include_input": self.encoder.include_input,
            "mask_alpha": self.encoder.mask_alpha,
            "hidden": self.decoder.layers[0].out_features,
            "num_layers": len(self.decoder.layers),
            "latent_dim": self.latent_dim,
            "softplus_beta": self.decoder.softplus_beta,
        }

    @property
    def dtype(self) -> torch.dtype:
        return self.latents.dtype

    def grid(self, level: int) -> nn.Parameter:
        return self.grids[self.levels.index(level)]

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups = {f"grid_l{l}": [g] for l, g in zip(self.levels, self.grids)}
        groups["decoder"] = list(self.decoder.parameters())
        groups["latent"] = [self.latents]
        return groups

    def scene_index(self, scene) -> int:
        if scene is None:
            return self.active_scene
        if isinstance(scene, str):
            return self.scene_ids.index(scene)
        return int(scene)

    def reset_latents(self, scene_ids: Sequence[str]) -> None:
        """Replace all latents with zero vectors for the given scenes."""
        self.scene_ids = list(scene_ids)
        self.latents = nn.Parameter(torch.zeros(len(self.scene_ids), self.latent_dim, dtype=self.dtype))
        self.active_scene = 0

    # -- evaluation -------------------------------------------------------
    def aggregate_features(self, x: torch.Tensor, check: bool = True) -> torch.Tensor:
        if check:
            check_domain(x)
        z = None
        for g in self.grids:
            f = interpolate(g, x, check=False)
            z = f if z is None else z + f
        return z

    def evaluate(self, x: torch.Tensor, scene=None, check: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        """Signed distance (N,) and aggregated grid feature z(x) (N, F)."""
        if check:
            check_domain(x)
        z = self.aggregate_features(x, check=False)
        pe = self.encoder(x)
        g = self.latents[self.scene_index(scene)]
        w = self.decoder.layers[0].weight
        # g is shared by the batch, so its block of the first layer folds into the bias.
        bias = self.decoder.layers[0].bias + w[:, pe.shape[-1] + self.feature_dim:] @ g
        return self.decoder(torch.cat([pe, z], dim=-1), first_bias=bias), z

    def forward(self, x: torch.Tensor, scene=None, check: bool = True) -> torch.Tensor:
        """Signed distance at (N, 3) points; returns (N,)."""
        return self.evaluate(x, scene, check)[0]

    def as_function(self, scene=None):
        """Plain ``points -> distances`` callable (casts to the field dtype)."""
        return lambda x: self.forward(x.to(self.dtype), scene)

    def sdf(self, x: torch.Tensor, scene=None) -> torch.Tensor:
        return self.forward(x, scene)

    def spatial_gradient(
        self, x: torch.Tensor, scene=None, create_graph: bool = False
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return ``(d, grad_x d, boundary_flag)`` at (N, 3) points.

        Points on an interior voxel face get the gradient of the voxel with the
        smaller index and are flagged.
        """
        check_domain(x)
        with torch.enable_grad():
            xq = x if x.requires_grad else x.detach().requires_grad_(True)
            d = self.forward(xq, scene, check=False)
            (grad,) = torch.autograd.grad(d.sum(), xq, create_graph=create_graph)
        return d, grad, on_voxel_boundary(x, self.levels)


def fibonacci_directions(n: int, dtype=torch.float64) -> torch.Tensor:
    """n near-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = torch.arange(n, dtype=dtype) + 0.5
    z = 1.0 - 2.0 * i / n
    r = torch.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)


def geometric_init(field: MultiGridField, radius: float = 0.5, seed: int = 0) -> MultiGridField:
    """Zero the grids and latents; set decoder weights so that d(x) ~ |x| - radius.

    Deterministic variant of the SAL scheme. Rows of the first layer are
    spread unit directions u_j acting on the raw coordinates, so
    mean_j relu(u_j . x) = |x| / 4 is a quadrature rather than a Monte-Carlo
    estimate; hidden-to-hidden layers start as the identity (a no-op on
    non-negative activations) and the output layer averages with weight
    4 / width. The sinusoidal columns start at zero. The grid and latent
    columns get N(0, 2 / width) weights; their inputs are zero here, so the
    initial SDF does not depend on them, but they must be nonzero for the
    grids to receive gradient.
    """
    gen = torch.Generator().manual_seed(seed)
    dtype = field.dtype
    layers = field.decoder.layers
    if not field.encoder.include_input:
        raise ValueError("geometric initialisation needs the raw coordinate pass-through")
    n_pe = field.encoder.out_dim
    with torch.no_grad():
        for g in field.grids:
            g.zero_()
        field.latents.zero_()
        for i, layer in enumerate(layers):
            out_dim, in_dim = layer.weight.shape
            if i == 0:
                w = torch.zeros(out_dim, in_dim, dtype=dtype)
                w[:, :3] = fibonacci_directions(out_dim, dtype)
                w[:, n_pe:] = math.sqrt(2.0 / out_dim) * torch.randn(
                    out_dim, in_dim - n_pe, generator=gen, dtype=dtype
                )
                layer.weight.copy_(w)
                layer.bias.zero_()
            elif i < len(layers) - 1:
                layer.weight.copy_(torch.eye(out_dim, in_dim, dtype=dtype))
                layer.bias.zero_()
            else:
                layer.weight.fill_(4.0 / in_dim)
                layer.bias.fill_(-radius)
    return field


def random_init(field: MultiGridField, seed: int = 0) -> MultiGridField:
    """Default PyTorch-style uniform initialisation of the decoder; zero grids and latents."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for g in field.grids:
            g.zero_()
        field.latents.zero_()
        for layer in field.decoder.layers:
            bound = 1.0 / math.sqrt(layer.weight.shape[1])
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.uniform_(-bound, bound, generator=gen)
    return field
