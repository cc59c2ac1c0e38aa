"""Binary checkpoint container.

Layout: the 8-byte magic ``AVCKPT01``, a little-endian uint64 header length,
a UTF-8 JSON header, then every tensor as little-endian float64 in header
order. The header holds ``version``, ``config``, ``rng``, free-form ``meta``
the completed-phase ``flags``
and per-tensor ``name``/``owner``/``shape``. Bytes depend only on content.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from avaction.model.params import ModelConfig, ModelParams
from avaction.numerics import RngState

MAGIC = b"AVCKPT01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, rng: RngState | None = None, meta: dict | None = None) -> Path:
    names = list(params.tensors)
    header = {
        "version": VERSION,
        "config": params.config.to_dict(),
        "rng": rng.to_dict() if rng is not None else None,
        "meta": meta or {},
        "flags": sorted(params.flags),
        "tensors": [
            {"name": n, "owner": params.owner[n], "shape": list(params[n].shape)} for n in names
        ],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + body)
    return path


def load_checkpoint(path) -> tuple[ModelParams, RngState | None, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16 : 16 + n].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    params = ModelParams(ModelConfig.from_dict(header["config"]))
    pos = 16 + n
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(t["shape"]).astype(np.float64)
        pos += 8 * count
        params.add(t["owner"], t["name"], arr)
    params.flags = set(header.get("flags", []))
    rng = RngState.from_dict(header["rng"]) if header.get("rng") else None
    return params, rng, header.get("meta", {})
