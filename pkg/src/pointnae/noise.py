"""Bounded random offsets for point annotations.

Each point gets a sampling radius ``r_i = alpha * min(d_i, l[row(y_i)])``
where ``d_i`` is its nearest-neighbour distance and ``l`` a per-row cap.
The cap is either perspective-aware (a sliding window swept bottom-up that
never grows towards the top of the image) or the median of all ``d_i``.
Offsets then take a uniform direction and a magnitude uniform in ``[0, r_i]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annot import PointSet

MAX_ALPHA = 0.5
BOUND_MODES = ("perspective", "constant")


class ConfigError(ValueError):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *key)``, e.g. (seed, image, epoch)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def window_size(height: int) -> int:
    return max(1, height // 50)


def row_cap_perspective(y, d, height: int) -> np.ndarray:
    """Per-row radius cap, non-increasing from the bottom row upwards.

    Rows are swept from ``height - 1`` to 0. Row ``i`` looks at points with
    ``i - w < y <= i + w`` (``w = max(1, height // 50)``) and takes the
    largest ``d`` among them; rows with no such point inherit the row below.
    The running minimum keeps the cap from growing upwards. The sweep is
    seeded with the global maximum of ``d``.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    d = np.asarray(d, dtype=np.float64).ravel()
    if len(y) == 0:
        raise ValueError("empty point set")
    if len(y) != len(d):
        raise ValueError("y and d must have equal length")
    height = int(height)
    w = window_size(height)
    order = np.argsort(y, kind="stable")
    ys, ds = y[order], d[order]
    rows = np.arange(height, dtype=np.float64)
    lo = np.searchsorted(ys, rows - w, side="right")
    hi = np.searchsorted(ys, rows + w, side="right")
    win_max = np.full(height + 1, np.inf)
    win_max[height] = d.max()
    for i in np.flatnonzero(hi > lo):
        win_max[i] = ds[lo[i] : hi[i]].max()
    # L[i] = min(win_max[i], L[i+1]): a reversed running minimum
    return np.minimum.accumulate(win_max[::-1])[::-1][:height].copy()


def row_cap_constant(d, height: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64).ravel()
    if len(d) == 0:
        raise ValueError("empty point set")
    # np.median averages the two central values for even counts
    return np.full(int(height), float(np.median(d)))


def check_alpha(alpha: float, allow_overlap: bool = False) -> float:
    alpha = float(alpha)
    limit = 1.0 if allow_overlap else MAX_ALPHA
    if not (0.0 < alpha <= limit):
        hint = "" if allow_overlap else " (values above 0.5 need allow_overlap)"
        raise ConfigError(f"alpha must lie in (0, {limit}], got {alpha}{hint}")
    return alpha


def point_rows(y, height: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(y, dtype=np.float64)), 0, height - 1).astype(np.int64)


def radii(y, d, row_cap, alpha: float, allow_overlap: bool = False) -> np.ndarray:
    alpha = check_alpha(alpha, allow_overlap)
    row_cap = np.asarray(row_cap, dtype=np.float64)
    caps = row_cap[point_rows(y, len(row_cap))]
    return alpha * np.minimum(np.asarray(d, dtype=np.float64), caps)


@dataclass(frozen=True)
class SamplingBounds:
    alpha: float
    row_cap: np.ndarray
    radius: np.ndarray


def sampling_bounds(
    points: PointSet, alpha: float, mode: str = "perspective", allow_overlap: bool = False
) -> SamplingBounds:
    """Radii for every point of ``points``.

    Sets with fewer than two points have no defined ``d_i``; their radii are
    all zero and the row cap is left empty.
    """
    alpha = check_alpha(alpha, allow_overlap)
    if mode not in BOUND_MODES:
        raise ConfigError(f"unknown bound mode {mode!r}; expected one of {BOUND_MODES}")
    height = points.size[1]
    if points.nn_dist is None:
        return SamplingBounds(alpha, np.zeros(0), np.zeros(len(points)))
    d = points.nn_dist
    if mode == "perspective":
        cap = row_cap_perspective(points.y, d, height)
    else:
        cap = row_cap_constant(d, height)
    return SamplingBounds(alpha, cap, radii(points.y, d, cap, alpha, allow_overlap))


@dataclass(frozen=True)
class OffsetSample:
    direction: float
    magnitude: float
    offset: tuple


def compose_offset(direction, magnitude):
    direction = np.asarray(direction, dtype=np.float64)
    magnitude = np.asarray(magnitude, dtype=np.float64)
    return np.stack([magnitude * np.cos(direction), magnitude * np.sin(direction)], axis=-1)


def sample_offset(rng: np.random.Generator, r: float) -> OffsetSample:
    a = rng.uniform(0.0, 2.0 * np.pi)
    m = min(rng.uniform(0.0, 1.0) * float(r), float(r))
    ox, oy = compose_offset(a, m)
    return OffsetSample(float(a), float(m), (float(ox), float(oy)))


def sample_offsets(rng: np.random.Generator, r) -> np.ndarray:
    """Vectorised ``sample_offset``: one (ox, oy) row per radius."""
    r = np.asarray(r, dtype=np.float64).ravel()
    a = rng.uniform(0.0, 2.0 * np.pi, size=len(r))
    m = rng.uniform(0.0, 1.0, size=len(r)) * r
    # the uniform draw on [0, 1) can round up to r after scaling; keep m <= r
    np.minimum(m, r, out=m)
    return compose_offset(a, m)


@dataclass(frozen=True)
class NoisedPointSet:
    """``noised`` is clamped to the image; ``offsets`` are the raw draws and
    ``effective`` the displacement that survived clamping."""

    source: PointSet
    noised: PointSet
    offsets: np.ndarray
    clamped: np.ndarray

    @property
    def effective(self) -> np.ndarray:
        return self.noised.xy - self.source.xy


def clamp_to_image(xy, size, origin=None) -> np.ndarray:
    """Clamp into [0, W-1] x [0, H-1].

    With ``origin`` given, a source point already lying in (W-1, W) keeps its
    coordinate as the upper limit so a zero offset never moves it.
    """
    w, h = size
    xy = np.asarray(xy, dtype=np.float64)
    hi = np.array([w - 1, h - 1], dtype=np.float64)
    if origin is not None:
        hi = np.maximum(hi, origin)
    return np.clip(xy, 0.0, hi)


def make_noised(points: PointSet, bounds: SamplingBounds, rng: np.random.Generator) -> NoisedPointSet:
    if len(bounds.radius) != len(points):
        raise ValueError("bounds do not match the point set")
    offsets = sample_offsets(rng, bounds.radius)
    raw = points.xy + offsets
    xy = clamp_to_image(raw, points.size, points.xy)
    clamped = np.any(xy != raw, axis=1)
    return NoisedPointSet(points, PointSet(xy, points.size), offsets, clamped)
