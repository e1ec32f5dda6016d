"""Run configuration: one YAML file with a section per subsystem.

Every key has a default and an origin: ``method`` for values fixed by the
reconstruction method itself and ``chosen`` for values picked for this
implementation. Values are resolved per key from, in order of priority, the
config file, command-line ``--set`` overrides, and the defaults; the winning
source of each key is kept for logging.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# section -> key -> (default, origin, help)
DEFAULTS: Dict[str, Dict[str, Tuple[Any, str, str]]] = {
    "run": {
        "seed": (0, "chosen", "single seed all randomness derives from"),
        "threads": (1, "chosen", "torch intra-op thread count"),
        "dtype": ("float64", "chosen", "float64 or float32"),
    },
    "field": {
        "levels": ([4, 5, 6], "method", "grid levels; resolution 2^l + 1 per axis"),
        "feature_dim": (8, "method", "feature length per grid corner"),
        "num_frequencies": (6, "method", "positional encoding bands of the SDF input"),
        "include_input": (True, "chosen", "pass raw coordinates alongside the bands"),
        "hidden": (512, "method", "decoder width"),
        "num_layers": (3, "method", "decoder affine maps"),
        "latent_dim": (256, "method", "global latent length"),
        "softplus_beta": (100.0, "chosen", "Softplus sharpness"),
        "init_radius": (0.5, "chosen", "radius of the geometric initialisation"),
    },
    "prior": {
        "N": (100, "method", "base epoch count; the schedule runs 7N epochs"),
        "lambda_emb": (0.1, "chosen", "embedding loss weight"),
        "lambda_eik": (0.1, "chosen", "eikonal loss weight"),
        "sigma2": (1.0, "chosen", "latent prior variance"),
        "normal_weight": (0.0, "chosen", "optional normal supervision weight"),
        "lr": (1e-4, "method", "Adam learning rate"),
        "lr_decay": (0.5, "method", "step decay factor"),
        "lr_decay_every": (50, "method", "epochs between decays"),
        "batches_per_epoch": (16, "chosen", "batches per scene per epoch"),
        "surface_batch": (512, "chosen", "surface points per batch"),
        "offsurface_batch": (512, "chosen", "off-surface points per batch"),
        "offsurface_std": (0.05, "chosen", "stddev of perturbed off-surface samples"),
        "samples_per_mesh": (16384, "chosen", "surface samples drawn per corpus mesh"),
    },
    "intersect": {
        "n_coarse": (64, "chosen", "coarse samples per ray"),
        "n_fine": (32, "chosen", "refinement samples in the first sign-change interval"),
        "sphere_max_iters": (256, "chosen", "sphere tracing iteration cap"),
        "sphere_eps": (1e-5, "chosen", "sphere tracing convergence threshold"),
    },
    "recon": {
        "stage1_epochs": (30, "method", "epochs with the decoder frozen"),
        "stage2_end": (100, "method", "last epoch (exclusive) of the second stage"),
        "rays_per_view": (2048, "chosen", "rays per view per epoch"),
        "w_rgb": (1.0, "chosen", "photometric loss weight"),
        "w_mask": (100.0, "chosen", "silhouette loss weight"),
        "w_normal": (1.0, "chosen", "normal loss weight"),
        "mask_alpha": (50.0, "chosen", "silhouette sharpness"),
        "normalize_normals": (True, "chosen", "normalise the SDF gradient in the normal loss"),
        "lr": (1e-4, "method", "Adam learning rate"),
        "lr_decay": (0.5, "chosen", "step decay factor"),
        "lr_decay_every": (None, "chosen", "epochs between decays; null disables decay"),
        "mask_dilation": (4, "chosen", "pixels of mask dilation for ray sampling"),
        "grazing_threshold": (1e-4, "chosen", "rays with |grad d . v| below this are dropped"),
        "render_width": (512, "method", "rendering network width"),
        "render_q_layers": (8, "method", "layers of the feature network"),
        "render_r_layers": (4, "method", "layers of the radiance head"),
    },
    "eval": {
        "mesh_resolution": (256, "chosen", "marching cubes lattice size"),
        "oversample_points": (1_000_000, "chosen", "points sampled from the reconstruction"),
        "min_spacing": (0.002, "chosen", "minimum spacing between reconstruction samples"),
    },
}


@dataclass
class Section:
    values: Dict[str, Any]

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None


class RunConfig:
    """Resolved configuration with per-key sources (``file``, ``flag`` or ``default``)."""

    def __init__(self, values: Dict[str, Dict[str, Any]], sources: Dict[str, str]):
        self.values = values
        self.sources = sources
        for name, vals in values.items():
            setattr(self, name, Section(vals))

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: dict(v) for s, v in self.values.items()}

    def log_sources(self, logger: logging.Logger = log) -> None:
        for key in sorted(self.sources):
            sec, name = key.split(".", 1)
            logger.info("config %s = %r (%s)", key, self.values[sec][name], self.sources[key])


def _check_type(key: str, default, value) -> Optional[str]:
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return None
        return f"{key}: expected an integer or null, got {value!r}"
    if isinstance(default, bool):
        return None if isinstance(value, bool) else f"{key}: expected true/false, got {value!r}"
    if isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        return None if ok else f"{key}: expected an integer, got {value!r}"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else f"{key}: expected a number, got {value!r}"
    if isinstance(default, list):
        return None if isinstance(value, list) else f"{key}: expected a list, got {value!r}"
    if isinstance(default, str):
        return None if isinstance(value, str) else f"{key}: expected a string, got {value!r}"
    return None


def _flatten(tree: Mapping, origin: str, problems: List[str]) -> Dict[str, Any]:
    out = {}
    if not isinstance(tree, Mapping):
        problems.append(f"{origin}: top level must be a mapping of sections")
        return out
    for sec, body in tree.items():
        if sec not in DEFAULTS:
            problems.append(f"{origin}: unknown section {sec!r}")
            continue
        if not isinstance(body, Mapping):
            problems.append(f"{origin}: section {sec!r} must be a mapping")
            continue
        for k, v in body.items():
            if k not in DEFAULTS[sec]:
                problems.append(f"{origin}: unknown key {sec}.{k}")
            else:
                out[f"{sec}.{k}"] = v
    return out


def parse_overrides(items: List[str]) -> Dict[str, Any]:
    """``section.key=value`` strings; values are parsed as YAML scalars."""
    tree: Dict[str, Dict[str, Any]] = {}
    problems = []
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override {item!r} is not of the form section.key=value")
            continue
        key, raw = item.split("=", 1)
        sec, name = key.split(".", 1)
        tree.setdefault(sec, {})[name] = yaml.safe_load(raw)
    if problems:
        raise ConfigError(problems)
    return tree


def resolve(file_tree: Optional[Mapping] = None, flag_tree: Optional[Mapping] = None) -> RunConfig:
    problems: List[str] = []
    from_file = _flatten(file_tree or {}, "config file", problems)
    from_flags = _flatten(flag_tree or {}, "flag", problems)
    values: Dict[str, Dict[str, Any]] = {}
    sources: Dict[str, str] = {}
    for sec, keys in DEFAULTS.items():
        values[sec] = {}
        for name, (default, _, _) in keys.items():
            key = f"{sec}.{name}"
            if key in from_file:
                value, src = from_file[key], "file"
            elif key in from_flags:
                value, src = from_flags[key], "flag"
            else:
                value, src = default, "default"
            err = _check_type(key, default, value)
            if err:
                problems.append(err)
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            values[sec][name] = value
            sources[key] = src
    if values["run"]["dtype"] not in ("float32", "float64"):
        problems.append(f"run.dtype: expected float32 or float64, got {values['run']['dtype']!r}")
    if not problems and values["run"]["threads"] < 1:
        problems.append("run.threads: must be at least 1")
    if problems:
        raise ConfigError(problems)
    return RunConfig(values, sources)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    tree = None
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"config file {path}: {exc}"]) from None
    return resolve(tree, parse_overrides(overrides or []))


def defaults_help() -> str:
    lines = ["configuration keys (default, origin):"]
    for sec, keys in DEFAULTS.items():
        for name, (default, origin, text) in keys.items():
            lines.append(f"  {sec}.{name} = {default!r} ({origin}) {text}")
    return "\n".join(lines)
