"""File formats: point clouds, PGM images, CSV tables and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"MTRN"  u32 version
    u32 n_config, then n_config x (str key, str value)
    u32 n_tensors, then n_tensors x (str name, u32 ndim, u64 dims..., f64 data...)

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""
from __future__ import annotations

import csv
import io
import struct

import numpy as np

MAGIC = b"MTRN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_cloud(path, points):
    with open(path, "w") as fh:
        for x, y, z in np.asarray(points, dtype=np.float64).tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_cloud(path):
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


def write_pgm(path, img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.round(img * 255).astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fmt(v):
    """Shortest round-trip text for floats; other values via str."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# checkpoints

def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(config_pairs, tensors):
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(config_pairs)))
    for k, v in config_pairs:
        buf.write(_str(k) + _str(v))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")  # tobytes() emits C order; keeps 0-d shapes
        buf.write(_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(raw):
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    def string():
        return bytes(take(u32())).decode("utf-8")

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = [(string(), string()) for _ in range(u32())]
    tensors = []
    for _ in range(u32()):
        name = string()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
        tensors.append((name, arr))
    return config, tensors
