"""Mask export: 8-bit PGM images and VERTMASK bitset blocks.

VERTMASK layout (little-endian): b"VERTMASK", u32 version, u64 record count,
u32 mask height, u32 mask width, then per record u64 sample id, u8 scale and
the mask bits packed LSB-first into ceil(h*w/8) bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import UsageError
from .masking import MaskSet

MAGIC = b"VERTMASK"
VERSION = 1


def to_u8(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    return np.clip(np.round((img - lo) / span * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray, lo: float | None = 0.0, hi: float | None = 1.0):
    """Write a 2-D array as binary P5 PGM (values mapped from [lo, hi] to 0..255)."""
    img = np.asarray(img)
    data = img if img.dtype == np.uint8 else to_u8(img, lo, hi)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise UsageError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf, np.uint8, w * h, pos + 1).reshape(h, w)


def dumps(masks: MaskSet) -> bytes:
    n, h, w = masks.weights.shape
    bits = masks.weights >= 0.5
    owners = masks.owners if masks.owners is not None else np.arange(n)
    out = [MAGIC, struct.pack("<IQII", VERSION, n, h, w)]
    for i in range(n):
        out.append(struct.pack("<QB", int(owners[i]), masks.u))
        out.append(np.packbits(bits[i].ravel(), bitorder="little").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> MaskSet:
    if buf[:8] != MAGIC:
        raise UsageError("not a VERTMASK file")
    version, n, h, w = struct.unpack_from("<IQII", buf, 8)
    if version != VERSION:
        raise UsageError(f"unsupported VERTMASK version {version}")
    off = 8 + 20
    nbytes = (h * w + 7) // 8
    weights = np.zeros((n, h, w))
    owners = np.zeros(n, dtype=np.int64)
    u = 1
    for i in range(n):
        owners[i], u = struct.unpack_from("<QB", buf, off)
        off += 9
        raw = np.frombuffer(buf, np.uint8, nbytes, off)
        off += nbytes
        weights[i] = np.unpackbits(raw, bitorder="little")[:h * w].reshape(h, w)
    return MaskSet(weights, weights == 0, u, True, owners)


def save_masks(path, masks: MaskSet):
    Path(path).write_bytes(dumps(masks))


def load_masks(path) -> MaskSet:
    return loads(Path(path).read_bytes())
