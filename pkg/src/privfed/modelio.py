"""Binary model serialization.

Fixed little-endian layout so files round-trip bit-exactly across
platforms: a magic header, the input shape and class count, then one
tagged record per layer (dense and conv records carry their weight and
bias payloads as raw float64).
"""

from __future__ import annotations

import struct

import numpy as np

from .data import MagicNumberError, TruncatedFileError
from .nn import Conv2D, Dense, Flatten, MaxPool2, ModelParams, Relu

MAGIC = b"PFM1"

_TAGS = {Dense: b"dens", Conv2D: b"conv", Relu: b"relu", MaxPool2: b"pool", Flatten: b"flat"}


def _pack_array(arr: np.ndarray) -> bytes:
    parts = [struct.pack("<I", arr.ndim)]
    for dim in arr.shape:
        parts.append(struct.pack("<I", dim))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_model(model: ModelParams, path: str) -> None:
    parts = [MAGIC, struct.pack("<I", len(model.layers))]
    parts.append(struct.pack("<I", len(model.input_shape)))
    for dim in model.input_shape:
        parts.append(struct.pack("<I", dim))
    parts.append(struct.pack("<I", model.num_classes))
    for layer in model.layers:
        parts.append(_TAGS[type(layer)])
        if isinstance(layer, (Dense, Conv2D)):
            parts.append(_pack_array(layer.w))
            parts.append(_pack_array(layer.b))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise TruncatedFileError(f"{self.path}: needed {count} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self) -> np.ndarray:
        shape = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def load_model(path: str) -> ModelParams:
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise MagicNumberError(f"{path}: not a model file (bad magic)")
    layer_count = r.u32()
    input_shape = tuple(r.u32() for _ in range(r.u32()))
    num_classes = r.u32()
    layers = []
    for _ in range(layer_count):
        tag = r.take(4)
        if tag == b"dens":
            layers.append(Dense(r.array(), r.array()))
        elif tag == b"conv":
            layers.append(Conv2D(r.array(), r.array()))
        elif tag == b"relu":
            layers.append(Relu())
        elif tag == b"pool":
            layers.append(MaxPool2())
        elif tag == b"flat":
            layers.append(Flatten())
        else:
            raise MagicNumberError(f"{path}: unknown layer tag {tag!r}")
    if r.pos != len(r.buf):
        raise TruncatedFileError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return ModelParams(tuple(layers), input_shape, num_classes)
