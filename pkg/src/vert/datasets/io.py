"""VERTDATA tensor files.

Layout (little-endian): b"VERTDATA", u32 version, u64 sample count, u32 ndim,
u32 dims (C, H, W), f64 inputs, u16 labels, u8 ground-truth masks (H*W per
sample).  An optional trailing b"SDEX" section holds the signal and
distractor tensors, patch positions and the generator config, which
``flip_correlation`` and the reconstruction checks need.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import UsageError
from .generators import Dataset, DatasetConfig

MAGIC = b"VERTDATA"
EXT = b"SDEX"
VERSION = 1


def dumps(ds: Dataset) -> bytes:
    n = len(ds)
    dims = ds.x.shape[1:]
    parts = [MAGIC, struct.pack("<IQI", VERSION, n, len(dims)), struct.pack(f"<{len(dims)}I", *dims),
             ds.x.astype("<f8").tobytes(), ds.y.astype("<u2").tobytes(), ds.m.astype("u1").tobytes()]
    meta = json.dumps({"config": ds.config.to_dict(), "patched_classes": sorted(ds.patched_classes)},
                      sort_keys=True).encode("utf-8")
    pos = ds.patch_pos if ds.patch_pos is not None else np.full((n, 2), -1)
    parts += [EXT, struct.pack("<I", len(meta)), meta, ds.s.astype("<f8").tobytes(),
              ds.d.astype("<f8").tobytes(), ds.ids.astype("<i8").tobytes(), pos.astype("<i8").tobytes()]
    return b"".join(parts)


def loads(buf: bytes) -> Dataset:
    if buf[:8] != MAGIC:
        raise UsageError("not a VERTDATA file")
    version, n, ndim = struct.unpack_from("<IQI", buf, 8)
    if version != VERSION:
        raise UsageError(f"unsupported VERTDATA version {version}")
    off = 8 + 16
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    npx = int(np.prod(dims))
    x = np.frombuffer(buf, "<f8", n * npx, off).reshape((n,) + dims).astype(np.float64)
    off += 8 * n * npx
    y = np.frombuffer(buf, "<u2", n, off).astype(np.int64)
    off += 2 * n
    hw = dims[-2:]
    m = np.frombuffer(buf, "u1", n * int(np.prod(hw)), off).reshape((n,) + hw).copy()
    off += n * int(np.prod(hw))
    cfg, patched, s, d, ids, pos = DatasetConfig(), frozenset(), np.zeros_like(x), x.copy(), np.arange(n), None
    if buf[off:off + 4] == EXT:
        off += 4
        (mlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = json.loads(buf[off:off + mlen].decode("utf-8"))
        off += mlen
        cfg = DatasetConfig.from_dict(meta["config"])
        patched = frozenset(meta["patched_classes"])
        s = np.frombuffer(buf, "<f8", n * npx, off).reshape(x.shape).astype(np.float64)
        off += 8 * n * npx
        d = np.frombuffer(buf, "<f8", n * npx, off).reshape(x.shape).astype(np.float64)
        off += 8 * n * npx
        ids = np.frombuffer(buf, "<i8", n, off).astype(np.int64)
        off += 8 * n
        pos = np.frombuffer(buf, "<i8", 2 * n, off).reshape(n, 2).astype(np.int64)
        if (pos < 0).all():
            pos = None
    return Dataset(x=x, y=y, s=s, d=d, m=m, config=cfg, ids=ids, patch_pos=pos, patched_classes=patched)


def save(path, ds: Dataset):
    Path(path).write_bytes(dumps(ds))


def load(path) -> Dataset:
    return loads(Path(path).read_bytes())
