"""Restoration quality against synthetic ground truth, and the two experiment
sweeps built on it (jitter magnitude and sampling-area alpha)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .annot import PointSet, read_annotations
from .field import restore
from .network import DenoiseNet, ModelConfig, forward
from .synth import JitterSpec, SceneSpec, emit_dataset
from .trainer import Sample, TrainConfig, load_dataset, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "beta", "alpha", "mean_err_before", "mean_err_after", "improvement_ratio",
    "p50", "p90", "n_points", "flag",
)
DEFAULT_BETAS = (0.2, 0.4, 0.6, 0.8)
DEFAULT_ALPHAS = (0.3, 0.4, 0.5, 0.6)
OVERLAP_NOTE = (
    "alpha above 0.5 lets sampling discs of neighbouring points overlap; "
    "it needs the explicit overlap override and is expected to hurt refinement"
)


def point_error(annotations: PointSet, truth: PointSet, mode: str = "indexed") -> np.ndarray:
    """Per-point Euclidean error.

    ``indexed`` pairs points by position in the arrays. ``nn_match`` pairs
    them greedily, closest remaining pair first, and leaves extras unmatched.
    """
    a, t = annotations.xy, truth.xy
    if mode == "indexed":
        if len(a) != len(t):
            raise ValueError(f"indexed mode needs equal sizes, got {len(a)} and {len(t)}")
        return np.hypot(*(a - t).T) if len(a) else np.zeros(0)
    if mode != "nn_match":
        raise ValueError(f"unknown match mode {mode!r}")
    if len(a) == 0 or len(t) == 0:
        return np.zeros(0)
    dist = np.hypot(a[:, None, 0] - t[None, :, 0], a[:, None, 1] - t[None, :, 1])
    # stable sort keeps tie-breaking deterministic
    order = np.argsort(dist, axis=None, kind="stable")
    used_a = np.zeros(len(a), bool)
    used_t = np.zeros(len(t), bool)
    errs = []
    for flat in order:
        i, j = divmod(int(flat), len(t))
        if used_a[i] or used_t[j]:
            continue
        used_a[i] = used_t[j] = True
        errs.append(dist[i, j])
        if len(errs) == min(len(a), len(t)):
            break
    return np.sort(np.asarray(errs))


@dataclass(frozen=True)
class RestorationMetrics:
    mean_err_before: float
    mean_err_after: float
    improvement_ratio: float
    p50: float
    p90: float
    n_points: int
    match: str = "indexed"


def restoration_metrics(before: np.ndarray, after: np.ndarray, match: str = "indexed") -> RestorationMetrics:
    """Summarise per-point errors before and after refinement.

    The ratio is ``1 - after / before``; it is NaN when the error before is 0.
    Quantiles describe the errors after refinement.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if len(after) == 0:
        return RestorationMetrics(0.0, 0.0, math.nan, 0.0, 0.0, 0, match)
    mb, ma = float(before.mean()), float(after.mean())
    ratio = 1.0 - ma / mb if mb > 0 else math.nan
    p50, p90 = np.quantile(after, [0.5, 0.9])
    return RestorationMetrics(mb, ma, ratio, float(p50), float(p90), len(after), match)


def refine_samples(model: DenoiseNet, samples: Sequence[Sample]) -> List[PointSet]:
    return [restore(s.points, forward(model, s.image)) for s in samples]


def load_truth(directory, samples: Sequence[Sample]) -> List[PointSet]:
    directory = Path(directory)
    return [read_annotations((directory / f"{s.name}.gt.json").read_bytes()).points for s in samples]


def dataset_metrics(annotated: Sequence[PointSet], refined: Sequence[PointSet],
                    truth: Sequence[PointSet], mode: str = "indexed") -> RestorationMetrics:
    before = [point_error(a, t, mode) for a, t in zip(annotated, truth)]
    after = [point_error(r, t, mode) for r, t in zip(refined, truth)]
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    return restoration_metrics(cat(before), cat(after), mode)


def report_row(metrics: RestorationMetrics, beta=math.nan, alpha=math.nan, flag: str = "") -> Dict:
    row = {"beta": beta, "alpha": alpha}
    row.update({k: v for k, v in asdict(metrics).items() if k != "match"})
    if not flag and math.isnan(metrics.improvement_ratio):
        flag = "zero_baseline"
    row["flag"] = flag
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_report(rows: Sequence[Dict], csv_path, json_path=None, notes: Sequence[str] = ()):
    lines = [",".join(REPORT_COLUMNS)]
    lines += [",".join(_fmt(r[c]) for c in REPORT_COLUMNS) for r in rows]
    Path(csv_path).write_text("\n".join(lines) + "\n")
    if json_path is not None:
        clean = [{c: (None if isinstance(r[c], float) and math.isnan(r[c]) else r[c]) for c in REPORT_COLUMNS}
                 for r in rows]
        doc = {"columns": list(REPORT_COLUMNS), "rows": clean, "notes": list(notes)}
        Path(json_path).write_text(json.dumps(doc, indent=2) + "\n")


def read_report(csv_path) -> List[Dict]:
    text = Path(csv_path).read_text().strip().splitlines()
    header = text[0].split(",")
    rows = []
    for line in text[1:]:
        vals = line.split(",")
        row = {}
        for k, v in zip(header, vals):
            if k == "flag":
                row[k] = v
            elif k == "n_points":
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


def run_experiment(data_dir, config: TrainConfig, model_config: ModelConfig,
                   beta: float, callback: Optional[Callable] = None) -> Dict:
    """Train on one synthetic dataset, refine its annotations, score them."""
    samples = load_dataset(data_dir)
    truth = load_truth(data_dir, samples)
    model, history = train(samples, config, model_config, callback=callback)
    if any(not math.isfinite(m.mean_loss) for m in history):
        nan = RestorationMetrics(math.nan, math.nan, math.nan, math.nan, math.nan, 0)
        return report_row(nan, beta, config.alpha, "diverged")
    refined = refine_samples(model, samples)
    metrics = dataset_metrics([s.points for s in samples], refined, truth)
    return report_row(metrics, beta, config.alpha)


def robustness_sweep(work_dir, n_scenes: int, scene: SceneSpec, config: TrainConfig,
                     model_config: ModelConfig = ModelConfig(), betas: Sequence[float] = DEFAULT_BETAS,
                     data_seed: int = 0) -> List[Dict]:
    """One dataset per jitter magnitude ``beta * d``; same scene seed for all."""
    if not betas:
        raise ValueError("need at least one beta")
    rows = []
    for beta in betas:
        data_dir = Path(work_dir) / f"beta_{beta:g}"
        emit_dataset(n_scenes, scene, JitterSpec(beta), data_dir, seed=data_seed)
        row = run_experiment(data_dir, config, model_config, beta)
        log.info("beta %g: before %.3f after %.3f", beta, row["mean_err_before"], row["mean_err_after"])
        rows.append(row)
    return rows


def alpha_ablation(work_dir, n_scenes: int, scene: SceneSpec, config: TrainConfig,
                   model_config: ModelConfig = ModelConfig(), alphas: Sequence[float] = DEFAULT_ALPHAS,
                   beta: float = 0.4, data_seed: int = 0, allow_overlap: bool = False) -> List[Dict]:
    """Train on one fixed dataset with each sampling-area ``alpha``.

    Alphas above 0.5 raise unless ``allow_overlap`` is set.
    """
    if not alphas:
        raise ValueError("need at least one alpha")
    data_dir = Path(work_dir) / f"alpha_data_beta_{beta:g}"
    emit_dataset(n_scenes, scene, JitterSpec(beta), data_dir, seed=data_seed)
    rows = []
    for alpha in alphas:
        cfg = replace(config, alpha=alpha, allow_overlap=allow_overlap)
        row = run_experiment(data_dir, cfg, model_config, beta)
        if alpha > 0.5 and not row["flag"]:
            row["flag"] = "overlap"
        log.info("alpha %g: after %.3f", alpha, row["mean_err_after"])
        rows.append(row)
    return rows
