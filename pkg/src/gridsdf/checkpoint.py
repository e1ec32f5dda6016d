"""Binary checkpoint container for a :class:`MultiGridField` and optional render nets.

The byte layout is described in ``docs/checkpoint_format.md``. All integers are
unsigned 32-bit little-endian; all tensor data is stored as 64-bit
little-endian floats regardless of the in-memory dtype, so a float32 field
round-trips exactly (float32 -> float64 -> float32 is lossless).
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
import torch

from .field import MultiGridField
from .render import RenderNets

MAGIC = b"GRIDSDF\x00"
VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(IOError):
    """Malformed, truncated or incompatible checkpoint file."""


def _u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", int(value)))


def _f64(fh: BinaryIO, t: torch.Tensor) -> None:
    fh.write(t.detach().cpu().to(torch.float64).contiguous().numpy().astype("<f8", copy=False).tobytes())


def _str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    _u32(fh, len(b))
    fh.write(b)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def _dtype_name(dtype: torch.dtype) -> str:
    for k, v in _DTYPES.items():
        if v == dtype:
            return k
    raise CheckpointError(f"unsupported dtype {dtype}")


def dumps(field: MultiGridField, render: Optional[RenderNets] = None, meta: Optional[Dict] = None) -> bytes:
    fh = io.BytesIO()
    header = {
        "field": field.config(),
        "dtype": _dtype_name(field.dtype),
        "render": render.config() if render is not None else None,
        "meta": meta or {},
    }
    fh.write(MAGIC)
    _u32(fh, VERSION)
    _str(fh, json.dumps(header, sort_keys=True))
    _u32(fh, len(field.levels))
    for level, grid in zip(field.levels, field.grids):
        _u32(fh, level)
        _u32(fh, grid.shape[0])
        _u32(fh, grid.shape[-1])
        _f64(fh, grid)
    _u32(fh, len(field.decoder.layers))
    for layer in field.decoder.layers:
        _u32(fh, layer.out_features)
        _u32(fh, layer.in_features)
        _f64(fh, layer.weight)
        _f64(fh, layer.bias)
    _u32(fh, len(field.scene_ids))
    _u32(fh, field.latent_dim)
    for sid, g in zip(field.scene_ids, field.latents):
        _str(fh, str(sid))
        _f64(fh, g)
    extras = {} if render is None else {f"render.{k}": v for k, v in render.state_dict().items()}
    _u32(fh, len(extras))
    for name in sorted(extras):
        t = extras[name]
        _str(fh, name)
        _u32(fh, t.dim())
        for s in t.shape:
            _u32(fh, s)
        _f64(fh, t)
    return fh.getvalue()


def loads(data: bytes) -> Tuple[MultiGridField, Optional[RenderNets], Dict]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a gridsdf checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.str())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    dtype = _DTYPES[header["dtype"]]
    cfg = dict(header["field"])
    mask_alpha = cfg.pop("mask_alpha")

    n_levels = r.u32()
    levels, grids = [], []
    for _ in range(n_levels):
        level, res, feat = r.u32(), r.u32(), r.u32()
        if res != 2 ** level + 1:
            raise CheckpointError(f"level {level}: resolution {res} != 2^l + 1")
        levels.append(level)
        grids.append(r.f64(res ** 3 * feat).reshape(res, res, res, feat))
    if levels != list(cfg["levels"]):
        raise CheckpointError("grid levels disagree with header")
    layers = []
    for _ in range(r.u32()):
        out_f, in_f = r.u32(), r.u32()
        layers.append((r.f64(out_f * in_f).reshape(out_f, in_f), r.f64(out_f)))
    n_scenes, latent_dim = r.u32(), r.u32()
    ids, lat = [], []
    for _ in range(n_scenes):
        ids.append(r.str())
        lat.append(r.f64(latent_dim))
    extras = {}
    for _ in range(r.u32()):
        name = r.str()
        shape = tuple(r.u32() for _ in range(r.u32()))
        extras[name] = r.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes")

    field = MultiGridField(scene_ids=ids or ("scene",), dtype=dtype, **cfg)
    if len(layers) != len(field.decoder.layers):
        raise CheckpointError("decoder depth disagrees with header")
    with torch.no_grad():
        for g, arr in zip(field.grids, grids):
            g.copy_(torch.from_numpy(arr))
        for layer, (w, b) in zip(field.decoder.layers, layers):
            if tuple(layer.weight.shape) != w.shape:
                raise CheckpointError("decoder layer shape disagrees with header")
            layer.weight.copy_(torch.from_numpy(w))
            layer.bias.copy_(torch.from_numpy(b))
        if ids:
            field.latents.copy_(torch.from_numpy(np.stack(lat)))
    field.encoder.set_mask_alpha(mask_alpha)

    render = None
    if header.get("render") is not None:
        render = RenderNets(dtype=dtype, **header["render"])
        state = {k[len("render."):]: torch.from_numpy(v).to(dtype) for k, v in extras.items() if k.startswith("render.")}
        try:
            render.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"render nets: {exc}") from None
    return field, render, header.get("meta", {})


def save(path: Union[str, Path], field: MultiGridField, render: Optional[RenderNets] = None,
         meta: Optional[Dict] = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(field, render, meta))


def load(path: Union[str, Path]) -> Tuple[MultiGridField, Optional[RenderNets], Dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(data)
