"""Images, point annotations and their file formats.

Coordinates are continuous: x is the column, y is the row, origin top-left,
and pixel (i, j) has its centre at (x=j, y=i).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree


class AnnotationError(ValueError):
    """Malformed annotation or image data; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageGrid:
    """Grayscale image, row-major, intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2D array, got shape {px.shape}")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height


def nearest_distances(points) -> Optional[np.ndarray]:
    """Distance from every point to its nearest other point.

    Returns ``None`` when fewer than two points are given, since the
    distance is undefined there. Coincident points get distance 0.
    """
    xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(xy)
    if n < 2:
        return None
    _, idx = cKDTree(xy).query(xy, k=2)
    # either column may hold the point itself; pick the other one and
    # recompute the distance with a fixed formula so results are reproducible
    self_first = idx[:, 0] == np.arange(n)
    nb = np.where(self_first, idx[:, 1], idx[:, 0])
    diff = xy[nb] - xy
    return np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1])


@dataclass(frozen=True)
class PointSet:
    """Point annotations anchored to an image of ``size`` = (W, H).

    ``nn_dist`` is ``None`` when the set holds fewer than two points.
    """

    xy: np.ndarray
    size: Tuple[int, int]
    nn_dist: Optional[np.ndarray] = field(init=False, compare=False)

    def __post_init__(self):
        xy = np.array(self.xy, dtype=np.float64).reshape(-1, 2)
        w, h = (int(v) for v in self.size)
        if w < 1 or h < 1:
            raise ValueError(f"invalid image size {self.size}")
        if not np.all(np.isfinite(xy)):
            raise ValueError("point coordinates must be finite")
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise ValueError(f"point {bad} {tuple(xy[bad])} outside image of size {(w, h)}")
        object.__setattr__(self, "xy", _frozen(xy))
        object.__setattr__(self, "size", (w, h))
        d = nearest_distances(xy)
        object.__setattr__(self, "nn_dist", None if d is None else _frozen(d))

    def __len__(self) -> int:
        return len(self.xy)

    def __eq__(self, other):
        if not isinstance(other, PointSet):
            return NotImplemented
        return self.size == other.size and np.array_equal(self.xy, other.xy)

    @property
    def x(self) -> np.ndarray:
        return self.xy[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xy[:, 1]


@dataclass(frozen=True)
class AnnotationFile:
    image_ref: str
    image_size: Tuple[int, int]
    points: PointSet

    @classmethod
    def from_points(cls, image_ref: str, points: PointSet) -> "AnnotationFile":
        return cls(image_ref, points.size, points)


def _fmt(v: float) -> str:
    # repr gives the shortest string that round-trips a float64 exactly
    return repr(float(v))


def write_annotations(ann: AnnotationFile) -> bytes:
    w, h = ann.image_size
    lines = ["{", f'  "image": {json.dumps(ann.image_ref)},', f'  "image_size": [{w}, {h}],']
    pts = ann.points.xy
    if len(pts) == 0:
        lines.append('  "points": []')
    else:
        lines.append('  "points": [')
        rows = [f"    [{_fmt(x)}, {_fmt(y)}]" for x, y in pts]
        lines.append(",\n".join(rows))
        lines.append("  ]")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


_POINT_RE = re.compile(r"\[([^\[\]]*)\]")


def _point_lines(text: str) -> list:
    """Best-effort 1-based line number of every entry of the points array."""
    m = re.search(r'"points"\s*:\s*\[', text)
    if m is None:
        return []
    return [text.count("\n", 0, pm.start()) + 1 for pm in _POINT_RE.finditer(text, m.end())]


def read_annotations(data: bytes) -> AnnotationFile:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise AnnotationError(f"not UTF-8: {e}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationError(e.msg, e.lineno) from None
    if not isinstance(obj, dict):
        raise AnnotationError("top level must be a JSON object", 1)
    for key in ("image", "image_size", "points"):
        if key not in obj:
            raise AnnotationError(f"missing key {key!r}")
    extra = set(obj) - {"image", "image_size", "points"}
    if extra:
        raise AnnotationError(f"unknown keys {sorted(extra)}")
    if not isinstance(obj["image"], str):
        raise AnnotationError('"image" must be a string')
    size = obj["image_size"]
    if (
        not isinstance(size, list)
        or len(size) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in size)
    ):
        raise AnnotationError('"image_size" must be [W, H] with positive integers')
    w, h = size
    pts = obj["points"]
    if not isinstance(pts, list):
        raise AnnotationError('"points" must be a list')
    where = _point_lines(text)

    def line_of(i):
        return where[i] if i < len(where) else None

    xy = np.zeros((len(pts), 2))
    for i, p in enumerate(pts):
        if (
            not isinstance(p, list)
            or len(p) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
        ):
            raise AnnotationError(f"point {i} must be [x, y]", line_of(i))
        x, y = float(p[0]), float(p[1])
        if not (math.isfinite(x) and math.isfinite(y)):
            raise AnnotationError(f"point {i} has non-finite coordinates", line_of(i))
        if not (0 <= x < w and 0 <= y < h):
            raise AnnotationError(f"point {i} ({x}, {y}) outside image of size {w}x{h}", line_of(i))
        xy[i] = x, y
    return AnnotationFile(obj["image"], (w, h), PointSet(xy, (w, h)))


def read_pgm(data: bytes) -> ImageGrid:
    """Parse a binary (P5) PGM; intensities are divided by maxval."""
    if data[:2] != b"P5":
        raise AnnotationError("not a binary PGM (expected magic P5)")
    fields = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise AnnotationError("malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise AnnotationError("malformed PGM header")
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise AnnotationError(f"invalid PGM size {w}x{h}")
    if not 1 <= maxval <= 65535:
        raise AnnotationError(f"invalid PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise AnnotationError(f"truncated PGM payload: {len(payload)} of {need} bytes")
    raw = np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float64)
    if raw.max(initial=0) > maxval:
        raise AnnotationError("PGM sample exceeds maxval")
    return ImageGrid(raw / maxval)


def write_pgm(img: ImageGrid) -> bytes:
    q = np.rint(img.pixels * 255.0).astype(np.uint8)
    return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + q.tobytes()
