"""Parameter groups, gradient collection and the Adam optimizer.

Reverse-mode differentiation itself is delegated to torch.autograd: the
autograd graph recorded during a forward pass plays the role of the tape.
What this module adds is the bookkeeping the training schedules rely on:
named parameter groups that can be frozen, gradient sets that are exactly
zero for frozen groups, named non-finite checks on each loss term, and an
Adam implementation that skips frozen groups entirely.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import torch

GROUP_NAMES = ("grid_l4", "grid_l5", "grid_l6", "decoder", "latent", "render_Q", "render_R")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, context: str = ""):
        self.term = term
        self.value = value
        msg = f"loss term {term!r} is not finite ({value})"
        if context:
            msg += f" [{context}]"
        super().__init__(msg)


class BoundaryPointError(ValueError):
    """A gradient-dependent loss was requested at a point on a voxel face."""


@dataclass
class ParameterGroup:
    name: str
    params: List[torch.Tensor]
    trainable: bool = True

    def values(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.params])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def numel(self) -> int:
        return sum(p.numel() for p in self.params)


class ParameterRegistry:
    """Ordered mapping of group name -> :class:`ParameterGroup`."""

    def __init__(self, groups: Iterable[ParameterGroup] = ()):
        self.groups: Dict[str, ParameterGroup] = {}
        for g in groups:
            self.add(g)

    @classmethod
    def from_modules(cls, *modules) -> "ParameterRegistry":
        reg = cls()
        for m in modules:
            if m is None:
                continue
            for name, params in m.parameter_groups().items():
                reg.add(ParameterGroup(name, list(params)))
        return reg

    def add(self, group: ParameterGroup) -> None:
        if group.name in self.groups:
            raise ValueError(f"duplicate parameter group {group.name!r}")
        seen = {id(p) for g in self.groups.values() for p in g.params}
        if any(id(p) in seen for p in group.params):
            raise ValueError(f"group {group.name!r} shares a parameter with another group")
        self.groups[group.name] = group

    def __getitem__(self, name: str) -> ParameterGroup:
        return self.groups[name]

    def __iter__(self):
        return iter(self.groups.values())

    def names(self) -> List[str]:
        return list(self.groups)

    def live(self) -> List[str]:
        return [n for n, g in self.groups.items() if g.trainable]

    def set_live(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.groups)
        if unknown:
            raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
        for n, g in self.groups.items():
            g.trainable = n in names

    def freeze(self, *names: str) -> None:
        for n in names:
            self.groups[n].trainable = False

    def unfreeze(self, *names: str) -> None:
        for n in names:
            self.groups[n].trainable = True

    def zeros(self, name: str) -> List[torch.Tensor]:
        """Cached zero gradients for a group; shared, never to be modified in place."""
        cache = self.__dict__.setdefault("_zeros", {})
        group = self.groups[name]
        hit = cache.get(name)
        if hit is None or any(z.shape != p.shape or z.dtype != p.dtype for z, p in zip(hit, group.params)):
            hit = [torch.zeros_like(p) for p in group.params]
            cache[name] = hit
        return hit

    def checksums(self) -> Dict[str, str]:
        return {n: g.checksum() for n, g in self.groups.items()}


@dataclass
class GradientSet:
    """Gradients per parameter group (frozen groups hold zeros) and per input."""

    groups: Dict[str, List[torch.Tensor]]
    inputs: List[torch.Tensor] = field(default_factory=list)
    live: List[str] = field(default_factory=list)
    terms: Dict[str, float] = field(default_factory=dict)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        if set(self.groups) != set(other.groups):
            raise ValueError("cannot merge gradient sets over different groups")
        groups = {n: [a + b for a, b in zip(self.groups[n], other.groups[n])] for n in self.groups}
        inputs = [a + b for a, b in zip(self.inputs, other.inputs)] if self.inputs else list(other.inputs)
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0.0) + v
        return GradientSet(groups, inputs, sorted(set(self.live) | set(other.live)), terms)

    def flat(self, name: str) -> torch.Tensor:
        return torch.cat([g.reshape(-1) for g in self.groups[name]])

    def norms(self) -> Dict[str, float]:
        return {n: float(torch.sqrt(sum((g.double() ** 2).sum() for g in gs))) for n, gs in self.groups.items()}


def backward(
    terms: Mapping[str, torch.Tensor],
    registry: ParameterRegistry,
    weights: Optional[Mapping[str, float]] = None,
    inputs: Sequence[torch.Tensor] = (),
    context: str = "",
) -> GradientSet:
    """Differentiate ``sum_k weights[k] * terms[k]`` with respect to all live groups.

    Every term is checked for finiteness first; the error names the offending
    term. Frozen groups receive exact zeros and are not differentiated at all.
    """
    weights = dict(weights or {})
    root = None
    values = {}
    for name, t in terms.items():
        if t.numel() != 1:
            raise ValueError(f"loss term {name!r} is not a scalar")
        v = float(t.detach())
        values[name] = v
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v, context)
        w = weights.get(name, 1.0)
        if w == 0.0:
            continue
        root = w * t if root is None else root + w * t
    live = registry.live()
    live_params = [p for n in live for p in registry[n].params]
    targets = live_params + list(inputs)
    if root is not None and root.requires_grad and targets:
        grads = torch.autograd.grad(root, targets, allow_unused=True)
    else:
        grads = [None] * len(targets)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    it = iter(grads[: len(live_params)])
    groups = {}
    for n, g in registry.groups.items():
        if g.trainable:
            groups[n] = [next(it) for _ in g.params]
        else:
            groups[n] = registry.zeros(n)
    return GradientSet(groups, list(grads[len(live_params):]), live, values)


def second_order_gradient(
    field,
    x: torch.Tensor,
    registry: ParameterRegistry,
    loss_of_gradient: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    scene=None,
) -> GradientSet:
    """Parameter gradients of a loss that depends on the spatial gradient of the SDF.

    The default loss is the eikonal residual ``mean((|grad d| - 1)^2)``.
    """
    if loss_of_gradient is None:
        loss_of_gradient = lambda g: ((g.norm(dim=-1) - 1.0) ** 2).mean()
    _, grad, boundary = field.spatial_gradient(x, scene, create_graph=True)
    if bool(boundary.any()):
        raise BoundaryPointError(f"{int(boundary.sum())} point(s) lie on voxel faces")
    return backward({"gradient_loss": loss_of_gradient(grad)}, registry)


class Adam:
    """Adam with per-group bias correction, frozen-group skipping and step decay.

    ``lr(epoch) = base_lr * decay ** (epoch // decay_every)``.
    """

    def __init__(
        self,
        registry: ParameterRegistry,
        lr: float = 1e-4,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        decay: float = 0.5,
        decay_every: Optional[int] = 50,
        group_lr_scale: Optional[Mapping[str, float]] = None,
    ):
        self.registry = registry
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay = decay
        self.decay_every = decay_every
        self.group_lr_scale = dict(group_lr_scale or {})
        self.epoch = 0
        self.step_count = 0
        self.group_steps: Dict[str, int] = {n: 0 for n in registry.names()}
        self.m: Dict[str, List[torch.Tensor]] = {}
        self.v: Dict[str, List[torch.Tensor]] = {}

    def lr_at(self, epoch: int) -> float:
        if not self.decay_every:
            return self.base_lr
        return self.base_lr * self.decay ** (epoch // self.decay_every)

    @property
    def lr(self) -> float:
        return self.lr_at(self.epoch)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    @torch.no_grad()
    def step(self, grads: GradientSet) -> Dict[str, float]:
        """Apply one update to every live group; returns the L2 norm of each update."""
        self.step_count += 1
        updates = {}
        lr = self.lr
        for name, group in self.registry.groups.items():
            if not group.trainable:
                continue
            gs = grads.groups.get(name)
            if gs is None or len(gs) != len(group.params):
                raise ValueError(f"gradient set does not cover group {name!r}")
            for p, g in zip(group.params, gs):
                if g.shape != p.shape:
                    raise ValueError(f"group {name!r}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
            if name not in self.m:
                self.m[name] = [torch.zeros_like(p) for p in group.params]
                self.v[name] = [torch.zeros_like(p) for p in group.params]
            self.group_steps[name] = self.group_steps.get(name, 0) + 1
            t = self.group_steps[name]
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            step_size = lr * self.group_lr_scale.get(name, 1.0) / c1
            sq = 0.0
            for p, g, m, v in zip(group.params, gs, self.m[name], self.v[name]):
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                denom = v.sqrt().div_(math.sqrt(c2)).add_(self.eps)
                upd = m.div(denom)
                p.add_(upd, alpha=-step_size)
                sq += float(torch.linalg.vector_norm(upd)) ** 2
            updates[name] = step_size * math.sqrt(sq)
        return updates
