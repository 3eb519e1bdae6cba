"""Binary checkpoint format.

Layout (little-endian): b"VERTCKPT", u32 version, u32 descriptor byte length,
UTF-8 JSON descriptor, u64 parameter count, f64 parameters.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import UsageError
from .layers import Classifier, build

MAGIC = b"VERTCKPT"
VERSION = 1


def dumps(model: Classifier) -> bytes:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode("utf-8")
    flat = model.flat_params().astype("<f8")
    return (MAGIC + struct.pack("<II", VERSION, len(desc)) + desc
            + struct.pack("<Q", flat.size) + flat.tobytes())


def loads(buf: bytes) -> Classifier:
    if buf[:8] != MAGIC:
        raise UsageError("not a VERTCKPT file")
    version, n = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise UsageError(f"unsupported checkpoint version {version}")
    off = 16
    desc = buf[off:off + n].decode("utf-8")
    off += n
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    model = build(desc)
    model.load_flat(flat.astype(np.float64))
    return model


def save(path, model: Classifier):
    Path(path).write_bytes(dumps(model))


def load(path) -> Classifier:
    return loads(Path(path).read_bytes())
