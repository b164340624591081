"""Rank-4 tensor container and the flat binary checkpoint format.

Checkpoint files hold a 16-byte header of four little-endian uint32 extents
(N, C, H, W) followed by little-endian float32 values in row-major order.
A manifest text file maps ``name -> filename -> shape``, one tab-separated
line per tensor.
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

_HEADER = struct.Struct("<4I")


def as4d(shape: Tuple[int, ...]) -> Tuple[int, int, int, int]:
    """Promote a shape of rank <= 4 to four extents.

    A rank-1 shape is treated as a channel vector and becomes ``(1, C, 1, 1)``;
    other low ranks are left-padded with ones.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ValueError(f"shape {shape} has rank {len(shape)} > 4")
    if len(shape) == 1:
        return (1, shape[0], 1, 1)
    return (1,) * (4 - len(shape)) + shape


class Tensor:
    """Dense array with an optional gradient buffer of the same shape.

    ``tags`` carries optimizer metadata (``offset`` for offset-learning
    layers, ``decay`` for whether weight decay applies).
    """

    def __init__(self, data, name: str = "", tags: Optional[Dict[str, bool]] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tags = dict(tags or {})

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ValueError(f"{self.name}: gradient shape {g.shape} != {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def write_tensor(path, array: np.ndarray):
    array = np.asarray(array)
    extents = as4d(array.shape)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*extents))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    extents = _HEADER.unpack_from(raw)
    count = int(np.prod(extents))
    body = raw[_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {count} float32 values for extents {extents}, got {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(extents).astype(np.float64)


def save_checkpoint(directory, tensors: Dict[str, np.ndarray], manifest="manifest.txt"):
    """Write one file per named tensor plus a manifest listing them."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        fname = name.replace("/", "__") + ".bin"
        arr = np.asarray(tensors[name])
        write_tensor(os.path.join(directory, fname), arr)
        lines.append(f"{name}\t{fname}\t{'x'.join(str(s) for s in arr.shape)}\n")
    with open(os.path.join(directory, manifest), "w") as fh:
        fh.writelines(lines)


def load_checkpoint(directory, manifest="manifest.txt") -> Dict[str, np.ndarray]:
    """Read tensors listed in a manifest, restoring their original shapes."""
    out = {}
    with open(os.path.join(directory, manifest)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, fname, shape_s = line.split("\t")
            except ValueError:
                raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields") from None
            shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
            arr = read_tensor(os.path.join(directory, fname))
            out[name] = arr.reshape(shape)
    return out
