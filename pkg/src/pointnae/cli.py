"""Command line entry point: ``pointnae {synth,train,refine,eval,sweep}``.

Exit status is 0 on success, 1 for usage/configuration errors and 2 for
unreadable or invalid data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .annot import AnnotationError, AnnotationFile, read_annotations, read_pgm, write_annotations
from .evaluate import (
    DEFAULT_ALPHAS, DEFAULT_BETAS, OVERLAP_NOTE, alpha_ablation, dataset_metrics, load_truth,
    report_row, robustness_sweep, write_report,
)
from .field import restore, write_field
from .network import DenoiseNet, ModelConfig, forward, load_checkpoint, save_checkpoint
from .noise import BOUND_MODES, ConfigError
from .plots import plot_alpha, plot_robustness
from .synth import JitterSpec, PackingError, SceneSpec, emit_dataset
from .trainer import TrainConfig, load_dataset, train

log = logging.getLogger("pointnae")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="worker threads for torch")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--config", type=Path, help="file of 'key = value' lines; flags take precedence")


def _scene_args(p):
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--count-min", type=int, default=10)
    p.add_argument("--count-max", type=int, default=16)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--layout", choices=("uniform", "perspective"), default="uniform")
    p.add_argument("--top-scale", type=float, default=1.0)
    p.add_argument("--background-noise", type=float, default=0.05)
    p.add_argument("--render", choices=("gaussian", "disc"), default="gaussian")


def _train_args(p, with_alpha=True):
    if with_alpha:
        p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--bound-mode", choices=BOUND_MODES, default="perspective")
    p.add_argument("--allow-overlap", action="store_true", help="permit alpha above 0.5")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--crop", type=int, default=0, help="crop size; 0 picks min(128, image side)")
    p.add_argument("--scale-range", type=_floats, default=[0.7, 1.3])
    p.add_argument("--widths", type=_ints, default=[16, 32, 64], help="encoder widths, one per stage")
    p.add_argument("--output-scale", type=float, default=1.0)
    p.add_argument("--holdout", type=float, default=0.1, help="fraction of images held out for metrics")


def build_parser() -> Parser:
    parser = Parser(prog="pointnae", description="Refine point annotations with a denoising field.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=50, help="number of scenes")
    p.add_argument("--beta", type=float, default=0.4, help="annotation jitter as a fraction of d")
    _scene_args(p)

    p = sub.add_parser("train", help="train a denoising network")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--metrics", type=Path, help="per-epoch CSV (default: <out>.metrics.csv)")
    _train_args(p)

    p = sub.add_parser("refine", help="refine annotations with a trained checkpoint")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--annotations", type=Path, help="single annotation file")
    p.add_argument("--image", type=Path, help="image for --annotations (default: the file's image field)")
    p.add_argument("--out", type=Path, help="refined annotation file for --annotations")
    p.add_argument("--field-out", type=Path, help="also write the predicted field (single-file mode)")
    p.add_argument("--data", type=Path, help="dataset directory to refine as a whole")
    p.add_argument("--out-dir", type=Path, help="output directory for --data")
    p.add_argument("--sampling", choices=("bilinear", "nearest"), default="bilinear")

    p = sub.add_parser("eval", help="score annotations against ground truth")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset with .ann.json and .gt.json files")
    p.add_argument("--refined", type=Path, required=True, help="directory of refined .ann.json files")
    p.add_argument("--out", type=Path, required=True, help="report CSV; a .json mirror is written next to it")
    p.add_argument("--match", choices=("indexed", "nn_match"), default="indexed")

    p = sub.add_parser("sweep", help="jitter-robustness or alpha sweep")
    _common(p)
    p.add_argument("--kind", choices=("robustness", "alpha"), required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n", type=int, default=200, help="scenes per dataset")
    p.add_argument("--betas", type=_floats, default=list(DEFAULT_BETAS))
    p.add_argument("--alphas", type=_floats, default=list(DEFAULT_ALPHAS))
    p.add_argument("--beta", type=float, default=0.4, help="jitter for the alpha sweep")
    p.add_argument("--alpha", type=float, default=0.4, help="alpha for the robustness sweep")
    _scene_args(p)
    _train_args(p, with_alpha=False)
    return parser


# -- config file ---------------------------------------------------------------


def read_config_file(path: Path) -> dict:
    values = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = (value, n)
    return values


def _prescan(argv):
    """Subcommand and --config path, found before full parsing so that the
    config file can satisfy required options."""
    command = next((a for a in argv if a in COMMANDS), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, config = _prescan(argv)
    if command is None or config is None:
        return parser.parse_args(argv)
    config = Path(config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, (value, n) in read_config_file(config).items():
        if key not in actions:
            raise UsageError(f"{config}:{n}: unknown key {key!r} for '{command}'")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{config}:{n}: {key} must be true or false")
            defaults[key] = value.lower() in ("true", "1", "yes")
            continue
        try:
            defaults[key] = action.type(value) if action.type else value
        except (TypeError, ValueError):
            raise UsageError(f"{config}:{n}: bad value {value!r} for {key}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"{config}:{n}: {key} must be one of {list(action.choices)}")
    # file values become defaults; flags on the command line still win
    subparser.set_defaults(**defaults)
    for a in subparser._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


# -- commands ------------------------------------------------------------------


def scene_spec(args) -> SceneSpec:
    return SceneSpec(
        width=args.width, height=args.height, count_range=(args.count_min, args.count_max),
        radius=args.radius, min_separation=args.separation, layout=args.layout,
        top_scale=args.top_scale, background_noise=args.background_noise, render=args.render,
    )


def model_config(args) -> ModelConfig:
    return ModelConfig(widths=tuple(args.widths), output_scale=args.output_scale)


def train_config(args, image_side: int, alpha: float) -> TrainConfig:
    mcfg = model_config(args)
    crop = args.crop
    if crop == 0:
        step = 2**mcfg.stages
        crop = max(step, min(128, image_side) // step * step)
    if len(args.scale_range) != 2:
        raise UsageError("--scale-range needs two values")
    return TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
        batch_size=args.batch_size, crop_size=crop, scale_range=tuple(args.scale_range),
        alpha=alpha, bound_mode=args.bound_mode, allow_overlap=args.allow_overlap,
        seed=args.seed, holdout_fraction=args.holdout,
    )


def cmd_synth(args):
    manifest = emit_dataset(args.n, scene_spec(args), JitterSpec(args.beta), args.out, seed=args.seed)
    log.info("wrote %d scenes to %s", len(manifest["scenes"]), args.out)


def cmd_train(args):
    samples = load_dataset(args.data)
    if not samples and args.epochs:
        raise DataError(f"{args.data}: no annotated images found")
    side = min(min(s.image.size) for s in samples) if samples else 128
    cfg = train_config(args, side, args.alpha)
    metrics = args.metrics or args.out.with_name(args.out.name + ".metrics.csv")
    if metrics.exists():
        metrics.unlink()
    model, history = train(samples, cfg, model_config(args), metrics_csv=metrics)
    args.out.write_bytes(save_checkpoint(model))
    log.info("saved checkpoint to %s after %d epochs", args.out, len(history))


def _load_model(path: Path) -> DenoiseNet:
    try:
        return load_checkpoint(path.read_bytes())
    except AnnotationError as e:
        raise DataError(f"{path}: {e}") from None


def _read_ann(path: Path):
    try:
        return read_annotations(path.read_bytes())
    except AnnotationError as e:
        raise DataError(f"{path}: {e}") from None


def _read_image(path: Path):
    try:
        return read_pgm(path.read_bytes())
    except AnnotationError as e:
        raise DataError(f"{path}: {e}") from None


def cmd_refine(args):
    model = _load_model(args.ckpt)
    if args.annotations is not None:
        if args.out is None:
            raise UsageError("--annotations needs --out")
        ann = _read_ann(args.annotations)
        image_path = args.image or args.annotations.parent / ann.image_ref
        image = _read_image(image_path)
        if image.size != ann.image_size:
            raise DataError(f"{image_path}: image is {image.size}, annotation expects {ann.image_size}")
        field = forward(model, image)
        refined = restore(ann.points, field, args.sampling)
        args.out.write_bytes(write_annotations(AnnotationFile(ann.image_ref, ann.image_size, refined)))
        if args.field_out is not None:
            args.field_out.write_bytes(write_field(field))
        return
    if args.data is None or args.out_dir is None:
        raise UsageError("give either --annotations/--out or --data/--out-dir")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for s in load_dataset(args.data):
        refined = restore(s.points, forward(model, s.image), args.sampling)
        image_ref = os.path.relpath(args.data / f"{s.name}.pgm", args.out_dir)
        out = AnnotationFile(image_ref, s.points.size, refined)
        (args.out_dir / f"{s.name}.ann.json").write_bytes(write_annotations(out))


def cmd_eval(args):
    samples = load_dataset(args.data)
    truth = load_truth(args.data, samples)
    refined = [_read_ann(args.refined / f"{s.name}.ann.json").points for s in samples]
    metrics = dataset_metrics([s.points for s in samples], refined, truth, args.match)
    beta = float("nan")
    manifest = args.data / "manifest.json"
    if manifest.exists():
        beta = float(json.loads(manifest.read_text())["jitter"]["beta"])
    row = report_row(metrics, beta=beta)
    write_report([row], args.out, args.out.with_suffix(".json"))
    print(f"mean error before {metrics.mean_err_before:.4f} px, after {metrics.mean_err_after:.4f} px, "
          f"improvement {metrics.improvement_ratio:.4f}")


def cmd_sweep(args):
    args.out.mkdir(parents=True, exist_ok=True)
    spec = scene_spec(args)
    side = min(spec.width, spec.height)
    if args.kind == "robustness":
        cfg = train_config(args, side, args.alpha)
        rows = robustness_sweep(args.out, args.n, spec, cfg, model_config(args), args.betas, args.seed)
        write_report(rows, args.out / "robustness.csv", args.out / "robustness.json")
        plot_robustness(rows, args.out / "robustness.png")
    else:
        bad = [a for a in args.alphas if a > 0.5]
        if bad and not args.allow_overlap:
            raise UsageError(f"alpha {bad} above 0.5 needs --allow-overlap")
        cfg = train_config(args, side, min(args.alphas))
        rows = alpha_ablation(args.out, args.n, spec, cfg, model_config(args), args.alphas, args.beta,
                              args.seed, allow_overlap=args.allow_overlap)
        write_report(rows, args.out / "alpha.csv", args.out / "alpha.json", notes=[OVERLAP_NOTE])
        plot_alpha(rows, args.out / "alpha.png")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "refine": cmd_refine, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:  # argparse: usage errors, --help, --version
        return e.code if isinstance(e.code, int) else 1
    except UsageError as e:
        print(f"pointnae: error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"pointnae: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(max(1, args.threads))
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"pointnae: error: {e}", file=sys.stderr)
        return 1
    except (DataError, AnnotationError, PackingError) as e:
        print(f"pointnae: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"pointnae: error: {e.filename}: no such file", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"pointnae: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
