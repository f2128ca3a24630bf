"""Binary checkpoint format.

Layout: ``b"MDST"``, u16 version (1), u32 header length, UTF-8 JSON header
mapping tensor name -> {"shape", "offset"}, then contiguous little-endian
float64 data. Offsets are in bytes from the start of the data section. The
optional ``__metadata__`` header entry carries the model config.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import EncoderParams, ModelConfig

MAGIC = b"MDST"
VERSION = 1
_META = "__metadata__"


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    header, offset, blobs = {}, 0, []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        header[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    if metadata is not None:
        header[_META] = metadata
    raw = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 10 + hlen
    header = json.loads(buf[10:start].decode("utf-8"))
    metadata = header.pop(_META, None)
    out = {}
    for name, entry in header.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start + entry["offset"])
        out[name] = arr.reshape(shape).astype(np.float64)
    return out, metadata


def save_params(params: EncoderParams, path, extra: dict | None = None) -> None:
    meta = {"config": params.config.to_dict()}
    if extra:
        meta.update(extra)
    write_tensors(path, {n: t.data for n, t in params.tensors.items()}, meta)


def load_params(path) -> tuple[EncoderParams, dict]:
    arrays, meta = read_tensors(path)
    if not meta or "config" not in meta:
        raise CheckpointError(f"{path}: no model config in header metadata")
    cfg = ModelConfig(**meta["config"])
    tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
    return EncoderParams(cfg, tensors), meta
