"""Synthetic counting scenes with known object centres, plus the fixed-magnitude
annotation jitter used for robustness experiments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .annot import AnnotationFile, ImageGrid, PointSet, write_annotations, write_pgm
from .noise import clamp_to_image, compose_offset, substream

MAX_ATTEMPTS = 10_000


class PackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    count_range: Tuple[int, int] = (10, 16)
    radius: float = 3.0
    # per-object radius varies uniformly by this relative amount
    radius_spread: float = 0.15
    render: str = "gaussian"
    layout: str = "uniform"
    top_scale: float = 1.0
    min_separation: float = 10.0
    background_noise: float = 0.05
    # centres keep this many pixels from the image border
    margin: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "count_range", tuple(int(v) for v in self.count_range))
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")
        if self.layout not in ("uniform", "perspective"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.render not in ("gaussian", "disc"):
            raise ValueError(f"unknown render mode {self.render!r}")
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid count range {self.count_range}")
        if not 0 < self.top_scale <= 1:
            raise ValueError("top_scale must lie in (0, 1]")

    def scale_at(self, y):
        """Object scale factor: top_scale at y = 0 rising linearly to 1 at y = H - 1."""
        if self.layout == "uniform":
            return np.ones_like(np.asarray(y, dtype=np.float64))
        t = np.asarray(y, dtype=np.float64) / max(self.height - 1, 1)
        return self.top_scale + (1.0 - self.top_scale) * t


@dataclass(frozen=True)
class JitterSpec:
    beta: float = 0.4


def _sample_y(spec: SceneSpec, rng, lo, hi):
    # perspective: density ~ 1/scale^2, drawn by rejection against the top density
    if spec.layout == "uniform":
        return rng.uniform(lo, hi)
    while True:
        y = rng.uniform(lo, hi)
        if rng.random() * (1.0 / spec.top_scale**2) <= 1.0 / spec.scale_at(y) ** 2:
            return y


def place_centers(spec: SceneSpec, count: int, rng) -> np.ndarray:
    """Hard-core layout by rejection sampling.

    Two centres must be at least ``min_separation`` (times the larger of
    their perspective scales) apart.
    """
    m = spec.margin
    x_lo, x_hi = m, spec.width - 1 - m
    y_lo, y_hi = m, spec.height - 1 - m
    if x_hi < x_lo or y_hi < y_lo:
        raise PackingError("image too small for its margin")
    centers = np.zeros((0, 2))
    scales = np.zeros(0)
    attempts = 0
    while len(centers) < count:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise PackingError(
                f"could not place {count} objects with separation {spec.min_separation} "
                f"in {spec.width}x{spec.height} after {MAX_ATTEMPTS} attempts"
            )
        c = np.array([rng.uniform(x_lo, x_hi), _sample_y(spec, rng, y_lo, y_hi)])
        s = float(spec.scale_at(c[1]))
        if len(centers):
            need = spec.min_separation * np.maximum(scales, s)
            if np.any(np.hypot(*(centers - c).T) < need):
                continue
        centers = np.vstack([centers, c])
        scales = np.append(scales, s)
    return centers


def render(spec: SceneSpec, centers: np.ndarray, radii: np.ndarray, rng) -> np.ndarray:
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    img = np.zeros((spec.height, spec.width))
    for (cx, cy), r in zip(centers, radii):
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        if spec.render == "gaussian":
            sigma = r / 2.0
            blob = np.exp(-d2 / (2 * sigma * sigma))
        else:
            blob = (d2 <= r * r).astype(np.float64)
        np.maximum(img, blob, out=img)
    if spec.background_noise > 0:
        img = img + rng.normal(0.0, spec.background_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class Scene:
    image: ImageGrid
    centers: PointSet
    radii: np.ndarray


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    lo, hi = spec.count_range
    count = int(rng.integers(lo, hi + 1))
    centers = place_centers(spec, count, rng)
    spread = rng.uniform(1 - spec.radius_spread, 1 + spec.radius_spread, size=count)
    radii = spec.radius * spread * spec.scale_at(centers[:, 1])
    img = render(spec, centers, radii, rng)
    return Scene(ImageGrid(img), PointSet(centers, (spec.width, spec.height)), radii)


def jitter_annotations(centers: PointSet, spec: JitterSpec, rng: np.random.Generator) -> PointSet:
    """Move every point by exactly ``beta * d_i`` in a uniformly random direction,
    then clamp into the image."""
    if centers.nn_dist is None:
        raise ValueError("jitter needs at least two points (nearest distance undefined)")
    theta = rng.uniform(0.0, 2.0 * np.pi, size=len(centers))
    moved = centers.xy + compose_offset(theta, spec.beta * centers.nn_dist)
    return PointSet(clamp_to_image(moved, centers.size, centers.xy), centers.size)


def scene_name(i: int) -> str:
    return f"scene_{i:05d}"


def emit_dataset(n_scenes: int, spec: SceneSpec, jitter: JitterSpec, out_dir, seed: int = 0) -> dict:
    """Write ``n_scenes`` image / jittered annotation / ground-truth triples and
    a ``manifest.json`` listing them. Output bytes depend only on the inputs."""
    out_dir = Path(out_dir)
    manifest = {
        "seed": int(seed),
        "scene_spec": {**asdict(spec), "count_range": list(spec.count_range)},
        "jitter": asdict(jitter),
        "scenes": [],
    }
    if n_scenes == 0:
        return manifest
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_scenes):
        rng = substream(seed, i)
        scene = generate_scene(spec, rng)
        ann = jitter_annotations(scene.centers, jitter, rng) if len(scene.centers) >= 2 else scene.centers
        name = scene_name(i)
        files = {"image": f"{name}.pgm", "annotations": f"{name}.ann.json", "truth": f"{name}.gt.json"}
        _write(out_dir / files["image"], write_pgm(scene.image))
        _write(out_dir / files["annotations"], write_annotations(AnnotationFile(files["image"], ann.size, ann)))
        _write(out_dir / files["truth"], write_annotations(AnnotationFile(files["image"], ann.size, scene.centers)))
        manifest["scenes"].append(files)
    _write(out_dir / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    return manifest


def _write(path: Path, data: bytes):
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
