"""Training loop for the denoising network.

Every iteration augments an image, draws fresh bounded offsets for its
annotations on the augmented geometry, and regresses the field sampled at
the noised points onto the negated offsets.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .annot import ImageGrid, PointSet, read_annotations, read_pgm
from .field import sample, sample_torch
from .network import DenoiseNet, ModelConfig, backward, forward, image_tensor
from .noise import BOUND_MODES, ConfigError, check_alpha, make_noised, sampling_bounds, substream

log = logging.getLogger(__name__)

# substream key reserved for the fixed noise used by the held-out metric
HOLDOUT_EPOCH = 2**31 - 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 100
    batch_size: int = 8
    crop_size: int = 128
    scale_range: Tuple[float, float] = (0.7, 1.3)
    flip_prob: float = 0.5
    alpha: float = 0.4
    bound_mode: str = "perspective"
    allow_overlap: bool = False
    seed: int = 0
    holdout_fraction: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "betas", tuple(float(v) for v in self.betas))
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale range {self.scale_range}")
        if self.bound_mode not in BOUND_MODES:
            raise ConfigError(f"unknown bound mode {self.bound_mode!r}")
        check_alpha(self.alpha, self.allow_overlap)
        if self.batch_size < 1 or self.epochs < 0 or self.crop_size < 1:
            raise ConfigError("batch_size and crop_size must be positive, epochs non-negative")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


# -- loss ----------------------------------------------------------------------


def offset_loss(predicted, applied):
    """Mean over points of ||predicted - (-applied)||^2.

    Works on torch tensors (differentiably) or array-likes; an empty point
    list gives 0.
    """
    if not isinstance(predicted, torch.Tensor):
        predicted = torch.as_tensor(np.asarray(predicted, dtype=np.float64).reshape(-1, 2))
    applied = torch.as_tensor(applied, dtype=predicted.dtype).reshape(-1, 2)
    if predicted.shape != applied.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(applied.shape)}")
    if len(predicted) == 0:
        return predicted.sum() * 0
    return ((predicted + applied) ** 2).sum(dim=1).mean()


# -- optimiser -----------------------------------------------------------------


@dataclass
class TrainState:
    model: DenoiseNet
    exp_avg: Dict[str, torch.Tensor]
    exp_avg_sq: Dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0
    skipped: int = 0

    @classmethod
    def fresh(cls, model: DenoiseNet) -> "TrainState":
        params = dict(model.named_parameters())
        zeros = lambda: {k: torch.zeros_like(p) for k, p in params.items()}  # noqa: E731
        return cls(model, zeros(), zeros())


def adam_step(state: TrainState, grads: Dict[str, torch.Tensor], config: TrainConfig) -> TrainState:
    """Adam with decoupled weight decay, applied in place.

    The parameter is first shrunk by ``1 - lr * wd`` and then takes the
    bias-corrected Adam step. A non-finite gradient skips the whole step.
    """
    if not all(torch.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return state
    lr, wd, eps = config.learning_rate, config.weight_decay, config.eps
    beta1, beta2 = config.betas
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            g = grads[name]
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if wd:
                p.mul_(1 - lr * wd)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# -- augmentation --------------------------------------------------------------


def apply_augmentation(
    image: ImageGrid, points: PointSet, scale: float, flip: bool, origin: Tuple[int, int], crop: int
) -> Tuple[ImageGrid, PointSet]:
    """Scale about the origin (x -> s*x), optionally mirror, then crop.

    Output pixel (i, j) of the scaled image samples the input at (i/s, j/s),
    so image content and points follow the same map. Points outside the
    crop window are dropped.
    """
    w, h = image.size
    sw, sh = math.ceil(w * scale - 1e-9), math.ceil(h * scale - 1e-9)
    if scale == 1.0:
        px = image.pixels
    else:
        px = ndimage.affine_transform(
            image.pixels, np.diag([1.0 / scale, 1.0 / scale]), output_shape=(sh, sw), order=1, mode="nearest"
        )
    xy = points.xy * scale
    if flip:
        px = px[:, ::-1]
        # a point in (W'-1, W') would mirror to a negative coordinate
        xy[:, 0] = sw - 1 - np.minimum(xy[:, 0], sw - 1)
    ox, oy = origin
    if crop > sw or crop > sh:
        raise ValueError(f"crop {crop} larger than scaled image {sw}x{sh}")
    px = px[oy : oy + crop, ox : ox + crop]
    keep = (xy[:, 0] >= ox) & (xy[:, 0] < ox + crop) & (xy[:, 1] >= oy) & (xy[:, 1] < oy + crop)
    xy = xy[keep] - [ox, oy]
    return ImageGrid(np.clip(px, 0.0, 1.0)), PointSet(xy, (crop, crop))


def augment(image: ImageGrid, points: PointSet, rng: np.random.Generator, config: TrainConfig):
    """Random scale, horizontal flip and crop; the scale is raised when needed
    so the scaled image still covers the crop."""
    lo, hi = config.scale_range
    s = rng.uniform(lo, hi)
    s = max(s, config.crop_size / min(image.size))
    flip = bool(rng.random() < config.flip_prob)
    sw, sh = math.ceil(image.width * s - 1e-9), math.ceil(image.height * s - 1e-9)
    ox = int(rng.integers(0, sw - config.crop_size + 1))
    oy = int(rng.integers(0, sh - config.crop_size + 1))
    return apply_augmentation(image, points, s, flip, (ox, oy), config.crop_size)


# -- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    name: str
    image: ImageGrid
    points: PointSet


def load_sample(ann_path) -> Sample:
    ann_path = Path(ann_path)
    ann = read_annotations(ann_path.read_bytes())
    image = read_pgm((ann_path.parent / ann.image_ref).read_bytes())
    if image.size != ann.image_size:
        raise ValueError(f"{ann_path}: image is {image.size}, annotation says {ann.image_size}")
    return Sample(ann_path.name[: -len(".ann.json")], image, ann.points)


def load_dataset(directory) -> List[Sample]:
    """All ``*.ann.json`` annotations of a directory with their images.

    Ground-truth files are never read here.
    """
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["scenes"]
        paths = [directory / e["annotations"] for e in entries]
    else:
        paths = sorted(directory.glob("*.ann.json"))
    return [load_sample(p) for p in paths]


def split_holdout(n: int, fraction: float) -> Tuple[List[int], List[int]]:
    if n < 2 or fraction <= 0:
        return list(range(n)), []
    k = min(n - 1, max(1, int(round(fraction * n))))
    return list(range(n - k)), list(range(n - k, n))


# -- training ------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    holdout_restore_err_px: float
    images_used: int = 0


def noised_example(sample_: Sample, config: TrainConfig, rng, augment_first: bool = True):
    image, points = sample_.image, sample_.points
    if augment_first:
        image, points = augment(image, points, rng, config)
    bounds = sampling_bounds(points, config.alpha, config.bound_mode, config.allow_overlap)
    return image, make_noised(points, bounds, rng)


def batch_loss(model: DenoiseNet, images, noised_sets) -> Optional[torch.Tensor]:
    """Mean per-image loss over images holding at least two points."""
    dtype = next(model.parameters()).dtype
    out = model(image_tensor(images, dtype))
    losses = []
    for b, ns in enumerate(noised_sets):
        if len(ns.source) < 2:
            continue
        xy = torch.tensor(ns.noised.xy, dtype=dtype)
        pred = sample_torch(out[b], xy)
        losses.append(offset_loss(pred, torch.tensor(ns.effective, dtype=dtype)))
    if not losses:
        return None
    return torch.stack(losses).mean()


def holdout_error(model: DenoiseNet, samples: Sequence[Sample], config: TrainConfig, indices) -> float:
    """Mean distance between restored noised points and their annotations,
    with noise fixed across epochs."""
    errs = []
    for i in indices:
        s = samples[i]
        if len(s.points) < 2:
            continue
        _, ns = noised_example(s, config, substream(config.seed, i, HOLDOUT_EPOCH), augment_first=False)
        f = forward(model, s.image)
        back = ns.noised.xy + sample(f, ns.noised.xy)
        errs.append(np.hypot(*(back - s.points.xy).T))
    if not errs:
        return 0.0
    return float(np.concatenate(errs).mean())


def train_epoch(samples: Sequence[Sample], state: TrainState, config: TrainConfig,
                train_idx=None, holdout_idx=None) -> EpochMetrics:
    if not samples:
        raise ValueError("empty dataset")
    if train_idx is None:
        train_idx, holdout_idx = split_holdout(len(samples), config.holdout_fraction)
    epoch = state.epoch
    order = substream(config.seed, epoch).permutation(np.asarray(train_idx, dtype=np.int64))
    model = state.model
    total, used = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        images, noised = [], []
        for i in idx:
            img, ns = noised_example(samples[i], config, substream(config.seed, int(i), epoch))
            images.append(img)
            noised.append(ns)
        loss = batch_loss(model, images, noised)
        if loss is None:
            continue
        adam_step(state, backward(loss, model), config)
        n_used = sum(len(ns.source) >= 2 for ns in noised)
        total += loss.item() * n_used
        used += n_used
    state.epoch += 1
    eval_idx = holdout_idx if holdout_idx else train_idx
    err = holdout_error(model, samples, config, eval_idx)
    return EpochMetrics(epoch, total / used if used else 0.0, err, used)


METRIC_COLUMNS = ("epoch", "mean_loss", "holdout_restore_err_px")


def train(samples: Sequence[Sample], config: TrainConfig, model_config: ModelConfig = ModelConfig(),
          metrics_csv=None, callback=None) -> Tuple[DenoiseNet, List[EpochMetrics]]:
    """Train a fresh model; returns it with per-epoch metrics.

    When ``metrics_csv`` is a path, one row per epoch is appended to it.
    """
    if config.crop_size % (2**model_config.stages):
        raise ConfigError(f"crop size {config.crop_size} not divisible by {2**model_config.stages}")
    model = DenoiseNet(model_config, seed=config.seed)
    state = TrainState.fresh(model)
    train_idx, holdout_idx = split_holdout(len(samples), config.holdout_fraction)
    history = []
    if metrics_csv is not None:
        path = Path(metrics_csv)
        if not path.exists() or path.stat().st_size == 0:
            path.write_text(",".join(METRIC_COLUMNS) + "\n")
    for _ in range(config.epochs):
        m = train_epoch(samples, state, config, train_idx, holdout_idx)
        history.append(m)
        log.info("epoch %d loss %.5f holdout err %.4f px", m.epoch, m.mean_loss, m.holdout_restore_err_px)
        if metrics_csv is not None:
            with open(metrics_csv, "a") as fh:
                fh.write(f"{m.epoch},{m.mean_loss!r},{m.holdout_restore_err_px!r}\n")
        if callback is not None:
            callback(m)
    return model, history
