"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"PMCK"
    version    uint32    currently 1
    hdr_len    uint32    byte length of the JSON header
    header     hdr_len   UTF-8 JSON: {"arch": {...}, "arrays": [[name, kind, shape], ...],
                         "meta": {...}}
    payload              for each entry of "arrays" in order: prod(shape) float64
                         values, little-endian, C order

``kind`` is "tensor" (trainable) or "buffer". Loading reproduces every array
bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from painmeter.nn.model import Architecture, ModelParams

MAGIC = b"PMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    entries = [(k, "tensor", a) for k, a in params.tensors.items()]
    entries += [(k, "buffer", a) for k, a in params.buffers.items()]
    header = {
        "arch": params.arch.to_dict(),
        "arrays": [[k, kind, list(a.shape)] for k, kind, a in entries],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a painmeter checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors, buffers = {}, {}
    for name, kind, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        a = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        (tensors if kind == "tensor" else buffers)[name] = a
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return ModelParams(Architecture.from_dict(header["arch"]), tensors, buffers), header["meta"]
