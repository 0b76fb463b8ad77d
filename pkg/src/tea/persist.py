"""Checkpoint files and PGM sample grids.

Checkpoint layout (all integers little-endian)::

    b"TEAC" | u16 version | u16 reserved | u32 payload length | payload | u32 CRC32(payload)

The payload holds the topology (input shape, then one record per layer:
u8 kind code, u8 dim count, u32 dims..., u32 group count) followed by two
tensor sections, parameters then running statistics. Each section is a u32
count of records ``u16 name length | name (utf-8) | u8 rank | u32 dims... |
float32 values``.
"""
from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from .nn import LAYER_KINDS, LayerSpec, ModelState

MAGIC = b"TEAC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensors(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def checkpoint_bytes(model: ModelState):
    parts = [struct.pack("<B", len(model.input_shape)),
             struct.pack(f"<{len(model.input_shape)}I", *model.input_shape),
             struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<BB", LAYER_KINDS.index(layer.kind), len(layer.dims)))
        parts.append(struct.pack(f"<{len(layer.dims)}I", *layer.dims))
        parts.append(struct.pack("<I", layer.group_count))
    parts.append(_pack_tensors(model.params))
    parts.append(_pack_tensors(model.running_stats))
    payload = b"".join(parts)
    header = MAGIC + struct.pack("<HHI", VERSION, 0, len(payload))
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: ModelState, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("truncated checkpoint payload")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint payload")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def tensors(self):
        (count,) = self.take("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.take("<H")
            name = self.raw(nlen).decode("utf-8")
            (rank,) = self.take("<B")
            shape = self.take(f"<{rank}I")
            n = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.raw(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def load_checkpoint_bytes(data: bytes) -> ModelState:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a TEAC checkpoint")
    version, _, length = struct.unpack_from("<HHI", data, 4)
    if version > VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (max {VERSION})")
    payload = data[12:12 + length]
    if len(payload) != length or len(data) != 12 + length + 4:
        raise CheckpointError("checkpoint length mismatch")
    (crc,) = struct.unpack_from("<I", data, 12 + length)
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch")
    r = _Reader(payload)
    (rank,) = r.take("<B")
    input_shape = r.take(f"<{rank}I")
    (nlayers,) = r.take("<I")
    layers = []
    for _ in range(nlayers):
        code, ndims = r.take("<BB")
        if code >= len(LAYER_KINDS):
            raise CheckpointError(f"unknown layer code {code}")
        dims = r.take(f"<{ndims}I")
        (groups,) = r.take("<I")
        layers.append(LayerSpec(LAYER_KINDS[code], dims, groups))
    params = r.tensors()
    stats = r.tensors()
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in checkpoint payload")
    try:
        return ModelState(tuple(layers), input_shape, params, stats)
    except ValueError as err:
        raise CheckpointError(f"inconsistent checkpoint: {err}") from err


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())


def to_pixels(v):
    """[-1, 1] -> 0..255 with round-half-up."""
    v = np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0)
    return np.floor(255.0 * (v + 1.0) / 2.0 + 0.5).astype(np.uint8)


def sample_grid(negatives):
    """Tile ``[n, 1, H, W]`` images into a ``ceil(sqrt(n))`` square grid of pixels."""
    x = np.asarray(negatives)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError("sample grid export needs single-channel [n, 1, H, W] images")
    n, _, h, w = x.shape
    g = math.ceil(math.sqrt(n))
    grid = np.zeros((g * h, g * w), dtype=np.uint8)
    px = to_pixels(x[:, 0])
    for i in range(n):
        r, c = divmod(i, g)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = px[i]
    return grid


def export_sample_grid(negatives, path):
    """Write a binary PGM (P5, maxval 255)."""
    grid = sample_grid(negatives)
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        f.write(grid.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    # exactly one whitespace byte separates the header from the raster
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return pix, maxval
