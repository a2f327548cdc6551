"""Binary checkpoint container for fusion models.

Layout (little-endian)::

    b"JCK1" | uint32 header_len | header (UTF-8 JSON) | float64 payloads

The header records the variant, model dims, combiner and the ordered list of
``[name, rows, cols]``; payloads follow in that order, row-major.  float64
storage keeps save/load bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FormatError
from .fusion import FusionModel, ModelDims

MAGIC = b"JCK1"


def save_checkpoint(path, model: FusionModel, extra: dict | None = None) -> None:
    named = model.named_parameters()
    header = {
        "variant": model.variant,
        "dims": {"L": model.dims.L, "d_a": model.dims.d_a, "d_v": model.dims.d_v,
                 "k": model.dims.k, "h_head": model.dims.h_head},
        "combiner": model.combiner,
        "n_backbones": model.n_backbones,
        "backbone_dims": getattr(model, "backbone_dims", None),
        "params": [[n, int(p.value.shape[0]), int(p.value.shape[1])] for n, p in named.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(blob)) + blob)
        for p in named.values():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def read_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse_header(data, path)[0]


def _parse_header(data: bytes, path):
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {data[:4]!r})", 0)
    if len(data) < 8:
        raise FormatError(f"{path}: header truncated", len(data))
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + n:
        raise FormatError(f"{path}: header truncated", len(data))
    return json.loads(data[8:8 + n].decode()), 8 + n


def load_checkpoint(path) -> FusionModel:
    data = Path(path).read_bytes()
    header, offset = _parse_header(data, path)
    dims = ModelDims(**header["dims"])
    backbone_dims = header.get("backbone_dims")
    model = FusionModel.create(header["variant"], dims, seed=0, combiner=header["combiner"],
                               backbone_dims=backbone_dims)
    model.n_backbones = header["n_backbones"]
    model.backbone_dims = backbone_dims
    named = model.named_parameters()
    listed = [p[0] for p in header["params"]]
    if listed != list(named):
        raise CheckpointError(f"{path}: parameter list {listed} does not match variant {header['variant']!r}")
    for name, rows, cols in header["params"]:
        size = 8 * rows * cols
        if offset + size > len(data):
            raise FormatError(f"{path}: payload for {name} truncated", len(data))
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        if named[name].value.shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {named[name].value.shape}")
        named[name].value = arr.astype(np.float64)
        named[name].zero_grad()
        offset += size
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset)
    return model
