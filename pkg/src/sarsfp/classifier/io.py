"""Versioned little-endian binary model files.

Layout::

    b"SFPM" | u32 version | u32 len + utf8 architecture id
    | u32 len + utf8 JSON layer options | u32 n_classes | u32 H | u32 W
    | u32 n_tensors | per tensor: u32 ndim, u32 dims...
    | raw float64 weights, tensors in order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import ARCHITECTURES, ClassifierModel, assemble

MAGIC = b"SFPM"
FORMAT_VERSION = 1


def dumps_model(model: ClassifierModel) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for text in (model.architecture_id, json.dumps(model.options, sort_keys=True)):
        raw = text.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    out.append(struct.pack("<III", model.n_classes, *model.input_shape))
    params = model.params
    out.append(struct.pack("<I", len(params)))
    for p in params:
        out.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
    for p in params:
        out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("corrupt model file: truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("corrupt model file: bad string") from None


def loads_model(data: bytes) -> ClassifierModel:
    if data[:4] != MAGIC:
        raise FormatError(f"not a model file (magic {data[:4]!r}, expected {MAGIC!r})")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    arch = r.text()
    if arch not in ARCHITECTURES:
        raise FormatError(f"corrupt model file: unknown architecture {arch!r}")
    try:
        options = json.loads(r.text())
    except json.JSONDecodeError:
        raise FormatError("corrupt model file: bad options block") from None
    n_classes, h, w = r.u32(3)
    n_tensors = r.u32()
    shapes = []
    for _ in range(n_tensors):
        ndim = r.u32()
        dims = r.u32(ndim) if ndim else ()
        shapes.append((dims,) if ndim == 1 else tuple(dims))
    tensors = []
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        tensors.append(np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape))
    if r.pos != len(data):
        raise FormatError("corrupt model file: trailing bytes")
    try:
        return assemble(arch, n_classes, (h, w), options, tensors=tensors)
    except Exception as exc:  # shape chain mismatch means the file is inconsistent
        raise FormatError(f"corrupt model file: {exc}") from None


def save_model(model: ClassifierModel, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> ClassifierModel:
    return loads_model(Path(path).read_bytes())
