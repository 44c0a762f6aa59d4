"""Dense two-channel offset fields, sub-pixel lookup and point restoration."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .annot import AnnotationError, PointSet
from .noise import clamp_to_image

FIELD_MAGIC = b"NAEF"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class VectorField:
    """``data`` has shape (2, H, W): channel 0 is dx, channel 1 is dy, in pixels."""

    data: np.ndarray

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float32)
        if a.ndim != 3 or a.shape[0] != 2 or a.shape[1] < 1 or a.shape[2] < 1:
            raise ValueError(f"field must have shape (2, H, W), got {a.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @classmethod
    def zeros(cls, width: int, height: int) -> "VectorField":
        return cls(np.zeros((2, height, width), dtype=np.float32))

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def size(self):
        return self.width, self.height


def _corners(x, y, w, h):
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, y0, x1, y1, x - x0, y - y0


def sample(field: VectorField, xy, method: str = "bilinear") -> np.ndarray:
    """Field values at continuous coordinates; returns an (N, 2) float64 array.

    Coordinates outside the grid are clamped to the border first.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if np.isnan(xy).any():
        raise ValueError("NaN coordinates")
    f = field.data.astype(np.float64)
    w, h = field.width, field.height
    if method == "nearest":
        x = np.clip(np.rint(xy[:, 0]), 0, w - 1).astype(np.int64)
        y = np.clip(np.rint(xy[:, 1]), 0, h - 1).astype(np.int64)
        return f[:, y, x].T.copy()
    if method != "bilinear":
        raise ValueError(f"unknown sampling method {method!r}")
    x0, y0, x1, y1, fx, fy = _corners(xy[:, 0], xy[:, 1], w, h)
    top = f[:, y0, x0] * (1 - fx) + f[:, y0, x1] * fx
    bottom = f[:, y1, x0] * (1 - fx) + f[:, y1, x1] * fx
    return (top * (1 - fy) + bottom * fy).T


def bilinear_sample(field: VectorField, x: float, y: float):
    ox, oy = sample(field, [[x, y]])[0]
    return float(ox), float(oy)


def sample_torch(field: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear lookup in a (2, H, W) tensor at (N, 2) coordinates.

    Same clamp-to-edge convention as :func:`sample`; gradients flow to ``field``.
    """
    _, h, w = field.shape
    x = xy[:, 0].clamp(0, w - 1)
    y = xy[:, 1].clamp(0, h - 1)
    x0 = x.floor().long().clamp(max=w - 1)
    y0 = y.floor().long().clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0).to(field.dtype)
    fy = (y - y0).to(field.dtype)
    top = field[:, y0, x0] * (1 - fx) + field[:, y0, x1] * fx
    bottom = field[:, y1, x0] * (1 - fx) + field[:, y1, x1] * fx
    return (top * (1 - fy) + bottom * fy).T


def restore(points: PointSet, field: VectorField, method: str = "bilinear") -> PointSet:
    """Shift every point by the field sampled at its own coordinates."""
    if field.size != points.size:
        raise ValueError(f"field size {field.size} does not match image size {points.size}")
    if len(points) == 0:
        return points
    moved = points.xy + sample(field, points.xy, method)
    return PointSet(clamp_to_image(moved, points.size, points.xy), points.size)


def write_field(field: VectorField) -> bytes:
    body = field.data.astype("<f4").tobytes(order="C")
    return _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, field.width, field.height) + body


def read_field(data: bytes) -> VectorField:
    if len(data) < _HEADER.size:
        raise AnnotationError("field file shorter than its header")
    magic, version, w, h = _HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise AnnotationError(f"bad field magic {magic!r}")
    if version != FIELD_VERSION:
        raise AnnotationError(f"unsupported field version {version}")
    expected = _HEADER.size + 2 * w * h * 4
    if len(data) != expected:
        raise AnnotationError(f"field file is {len(data)} bytes, expected {expected}")
    if w < 1 or h < 1:
        raise AnnotationError(f"invalid field size {w}x{h}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(2, h, w)
    return VectorField(arr.astype(np.float32))
