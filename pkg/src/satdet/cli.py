"""Command line interface: one executable driving the whole pipeline.

Subcommands mirror the processing stages:

    satdet generate  --out ws/raw --observations 50 --frames-per-obs 10
    satdet split     --data ws/raw --out ws/split --train-fraction 0.67
    satdet augment   --data ws/split/train --out ws/train
    satdet train     --train-data ws/train --val-data ws/val --out ws/model.sdtn
    satdet quantize  --model ws/model.sdtn --calib ws/train --out ws/model_quant.sdtn
    satdet infer     --model ws/model.sdtn --image frame.png --out ws/inference
    satdet eval      --data ws/val --model ws/model.sdtn --model ws/model_quant.sdtn
    satdet bench     --data ws/val --model ws/model.sdtn

Every command is deterministic for fixed flags (identical rerun outputs,
timestamps excluded) and never mutates its inputs. A pipeline config file
(--config) supplies per-stage defaults and a workspace directory; explicit
flags always win. Exit codes: 0 success, 1 usage error, 2 data/validation
error, 3 internal invariant failure. The only environment variable honored
is SATDET_LOG (log level); everything that affects behavior is a flag or a
config key.
"""

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from PIL import Image

from .data import (
    MANIFEST_NAME,
    augment_x8,
    load_manifest,
    save_manifest,
    split_dataset,
    write_frames,
)
from .errors import ConfigError, DataError, SatdetError, ShapeError
from .evaluate import (
    benchmark_latency,
    evaluate_detector,
    format_eval_table,
    format_latency_table,
    render_annotated,
)
from .imgio import load_image
from .quantize import (
    calibrate,
    convert_model,
    detect_quantized,
    load_quantized_checkpoint,
    save_quantized_checkpoint,
)
from .scene import LabeledFrame, SceneConfig, TrackingMode, generate_observation_set
from .ssd import (
    Precision,
    SizeClass,
    TrainConfig,
    detect,
    load_checkpoint,
    read_sidecar,
    save_checkpoint,
    train,
)

log = logging.getLogger("satdet")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

_EVAL_DEFAULTS = {"confidence_threshold": 0.25, "match_iou": 0.3, "nms_iou": 0.45}
_SEED_DEFAULTS = {"generate": 0, "split": 0}


# ---------------------------------------------------------------------------
# pipeline config

@dataclass(frozen=True)
class PipelineConfig:
    """Workspace plus per-stage defaults, loadable from one JSON document."""

    workspace_dir: str
    scene: SceneConfig = SceneConfig()
    train: TrainConfig = TrainConfig()
    eval: dict = field(default_factory=lambda: dict(_EVAL_DEFAULTS))
    seeds: dict = field(default_factory=lambda: dict(_SEED_DEFAULTS))

    def __post_init__(self):
        if not self.workspace_dir:
            raise ConfigError("workspace_dir must be a non-empty path")
        parent = Path(self.workspace_dir).expanduser().parent
        if not parent.exists():
            raise ConfigError(
                f"workspace_dir parent does not exist: {parent}")
        for key in self.eval:
            if key not in _EVAL_DEFAULTS:
                raise ConfigError(f"unknown eval setting '{key}'")
        for key, val in self.eval.items():
            if not (0.0 <= float(val) <= 1.0):
                raise ConfigError(f"eval.{key} must be in [0, 1], got {val}")
        for key in self.seeds:
            if key not in _SEED_DEFAULTS:
                raise ConfigError(f"unknown seed '{key}'")
        for key, val in self.seeds.items():
            if int(val) < 0:
                raise ConfigError(f"seeds.{key} must be >= 0, got {val}")

    def to_dict(self):
        return {
            "workspace_dir": self.workspace_dir,
            "scene": self.scene.to_dict(),
            "train": {k: getattr(self.train, k)
                      for k in self.train.__dataclass_fields__},
            "eval": dict(self.eval),
            "seeds": dict(self.seeds),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"workspace_dir", "scene", "train", "eval", "seeds"}
        if unknown:
            raise ConfigError(f"unknown pipeline config fields: {sorted(unknown)}")
        if "workspace_dir" not in d:
            raise ConfigError("pipeline config needs a workspace_dir")
        scene = SceneConfig.from_dict(d.get("scene", {}))
        train_d = dict(d.get("train", {}))
        unknown = set(train_d) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        eval_d = dict(_EVAL_DEFAULTS)
        eval_d.update(d.get("eval", {}))
        seeds = dict(_SEED_DEFAULTS)
        seeds.update(d.get("seeds", {}))
        return cls(workspace_dir=str(d["workspace_dir"]), scene=scene,
                   train=TrainConfig(**train_d), eval=eval_d, seeds=seeds)


def load_pipeline_config(path) -> PipelineConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return PipelineConfig.from_dict(doc)


def save_pipeline_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# shared helpers

def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _config_of(args):
    if getattr(args, "config", None) is None:
        return None
    return load_pipeline_config(args.config)


def _resolve_out(args, config, default_name):
    """--out, else workspace_dir/default_name from the config."""
    if args.out is not None:
        return Path(args.out)
    if config is not None:
        return Path(config.workspace_dir) / default_name
    raise ConfigError("--out is required when no --config supplies a workspace_dir")


def _manifest_path(data):
    p = Path(data)
    if p.is_dir():
        return p / MANIFEST_NAME
    return p


def _labeled_frames(manifest_path):
    """Manifest records as LabeledFrames with pixels loaded."""
    manifest = load_manifest(manifest_path)
    if not manifest.records:
        raise DataError(f"{manifest_path}: dataset is empty")
    base = Path(manifest_path).parent
    return [LabeledFrame(pixels=load_image(base / r.image_path),
                         boxes=list(r.boxes),
                         tracking_mode=r.tracking_mode)
            for r in manifest.records]


def _load_model(path):
    """Load a float or quantized checkpoint, dispatching on its sidecar."""
    meta = read_sidecar(path)
    if meta.get("precision") == Precision.QUANTIZED.value:
        return load_quantized_checkpoint(path)
    return load_checkpoint(path)


def _detect_fn(model, confidence, nms_iou):
    if model.precision is Precision.QUANTIZED:
        return lambda px: detect_quantized(model, px, confidence_threshold=confidence,
                                           nms_iou=nms_iou)
    return lambda px: detect(model, px, confidence_threshold=confidence,
                             nms_iou=nms_iou)


def _eval_setting(args, config, key):
    flag = getattr(args, key)
    if flag is not None:
        return flag
    if config is not None:
        return float(config.eval[key])
    return _EVAL_DEFAULTS[key]


def _model_rows(args, config):
    """(label, path, model, detect_fn) per --model flag, labels unique."""
    confidence = _eval_setting(args, config, "confidence_threshold")
    nms_iou = _eval_setting(args, config, "nms_iou")
    rows = []
    seen = {}
    for mpath in args.model:
        model = _load_model(mpath)
        label = f"{Path(mpath).stem} ({model.precision.value})"
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label} #{seen[label]}"
        rows.append((label, mpath, model, _detect_fn(model, confidence, nms_iou)))
    return rows, confidence


# ---------------------------------------------------------------------------
# commands

_SCENE_FLAG_FIELDS = (
    ("width", "width_px"),
    ("height", "height_px"),
    ("star_count", "star_count"),
    ("rso_count", "rso_count"),
    ("star_mag", "star_mag_range"),
    ("rso_mag", "rso_mag_range"),
    ("streak_length", "streak_length_px"),
    ("psf_sigma", "psf_sigma_px"),
    ("background", "background_level"),
    ("read_noise", "read_noise_sigma"),
)


def cmd_generate(args) -> int:
    config = _config_of(args)
    scene = config.scene if config else SceneConfig()
    overrides = {}
    if args.mode is not None:
        overrides["tracking_mode"] = TrackingMode(args.mode)
    for flag, field_name in _SCENE_FLAG_FIELDS:
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = tuple(value) if isinstance(value, list) else value
    if overrides:
        scene = replace(scene, **overrides)
    seed = args.seed
    if seed is None:
        seed = config.seeds["generate"] if config else _SEED_DEFAULTS["generate"]
    out = _resolve_out(args, config, "raw")

    k = args.frames_per_obs
    log.info("generating %d observations x %d frames (seed %d)",
             args.observations, k, seed)
    frames = generate_observation_set(scene, args.observations, k, seed)
    manifest = write_frames(frames, out,
                            name_fn=lambda i: f"obs{i // k:04d}_f{i % k:02d}")
    _write_json(out / "generation.json", {
        "scene": scene.to_dict(),
        "observations": args.observations,
        "frames_per_obs": k,
        "seed": seed,
    })
    print(f"wrote {len(manifest)} frames ({manifest.total_boxes} boxes) to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    config = _config_of(args)
    manifest_path = _manifest_path(args.data)
    out = _resolve_out(args, config, "augmented")
    if out.resolve() == manifest_path.parent.resolve():
        raise ConfigError(f"--out must differ from --data ({out})")
    manifest = load_manifest(manifest_path)
    augmented = augment_x8(manifest, manifest_path.parent, out)
    print(f"augmented {len(manifest)} -> {len(augmented)} frames "
          f"({augmented.total_boxes} boxes) in {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    config = _config_of(args)
    manifest_path = _manifest_path(args.data)
    out = _resolve_out(args, config, "split")
    seed = args.seed
    if seed is None:
        seed = config.seeds["split"] if config else _SEED_DEFAULTS["split"]
    manifest = load_manifest(manifest_path)
    train_m, val_m = split_dataset(manifest.records, args.train_fraction, seed)
    if not train_m.records or not val_m.records:
        raise DataError(
            f"train_fraction {args.train_fraction} leaves an empty split "
            f"({len(train_m)} train / {len(val_m)} val)")
    src_dir = manifest_path.parent
    for name, part in (("train", train_m), ("val", val_m)):
        part_dir = out / name
        for rec in part.records:
            dst = part_dir / rec.image_path
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src_dir / rec.image_path, dst)
        save_manifest(part, part_dir / MANIFEST_NAME)
    print(f"split {len(manifest)} frames -> {len(train_m)} train / "
          f"{len(val_m)} val under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config_of(args)
    train_config = config.train if config else TrainConfig()
    overrides = {k: getattr(args, k)
                 for k in ("epochs", "batch_size", "learning_rate", "seed",
                           "neg_pos_ratio", "early_stop_f1")
                 if getattr(args, k) is not None}
    if overrides:
        train_config = replace(train_config, **overrides)
    size = SizeClass(args.size)
    out = args.out
    if out is None and config is not None:
        out = Path(config.workspace_dir) / f"model_{size.value}.sdtn"
    if out is None:
        raise ConfigError("--out is required when no --config supplies a workspace_dir")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def _progress(entry):
        print(f"epoch {entry['epoch']:3d}  train_loss {entry['train_loss']:.4f}  "
              f"val_f1 {entry['val_f1']:.4f}")

    log.info("training %s detector at input size %d", size.value, args.input_size)
    model, train_log = train(
        _manifest_path(args.train_data), _manifest_path(args.val_data),
        size_class=size, train_config=train_config,
        input_size=(args.input_size, args.input_size), log_fn=_progress)
    save_checkpoint(model, out)
    log_path = out.with_suffix(".log.json")
    _write_json(log_path, {
        "train_config": {k: getattr(train_config, k)
                         for k in train_config.__dataclass_fields__},
        "size_class": size.value,
        "input_size": args.input_size,
        "epochs": train_log,
    })
    best = max(e["val_f1"] for e in train_log)
    print(f"saved checkpoint to {out} (best val F1 {best:.4f}, log {log_path})")
    return EXIT_OK


def cmd_infer(args) -> int:
    config = _config_of(args)
    model = _load_model(args.model)
    pixels = load_image(args.image)
    confidence = _eval_setting(args, config, "confidence_threshold")
    nms_iou = _eval_setting(args, config, "nms_iou")
    detections = _detect_fn(model, confidence, nms_iou)(pixels)
    out = _resolve_out(args, config, "inference")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    det_path = out / f"{stem}_detections.json"
    _write_json(det_path, {
        "image": str(args.image),
        "checkpoint": str(args.model),
        "confidence_threshold": confidence,
        "nms_iou": nms_iou,
        "detections": [{"box": [d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max],
                        "confidence": d.confidence} for d in detections],
    })
    png_path = out / f"{stem}_annotated.png"
    Image.fromarray(render_annotated(pixels, detections)).save(png_path)
    print(f"{len(detections)} detections -> {det_path}, {png_path}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = load_checkpoint(args.model)
    manifest_path = _manifest_path(args.calib)
    manifest = load_manifest(manifest_path)
    if args.max_frames < 1:
        raise ConfigError(f"--max-frames must be >= 1, got {args.max_frames}")
    base = manifest_path.parent
    frames = [load_image(base / r.image_path)
              for r in manifest.records[: args.max_frames]]
    ranges = calibrate(model, frames)
    qmodel = convert_model(model, ranges)
    out = Path(args.out) if args.out is not None else Path(args.model).with_name(
        Path(args.model).stem + "_quant" + Path(args.model).suffix)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_quantized_checkpoint(qmodel, out)
    float_size = os.path.getsize(args.model)
    quant_size = os.path.getsize(out)
    snrs = [v["snr_db"] for v in qmodel.conversion_report.values()
            if v["snr_db"] is not None]
    print(f"quantized {args.model} -> {out} using {len(frames)} calibration frames")
    print(f"checkpoint size {float_size} -> {quant_size} bytes "
          f"({float_size / quant_size:.2f}x smaller)")
    if snrs:
        print(f"worst weight-tensor SNR {min(snrs):.1f} dB "
              f"across {len(snrs)} tensors")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config_of(args)
    frames = _labeled_frames(_manifest_path(args.data))
    match_iou = _eval_setting(args, config, "match_iou")
    rows, confidence = _model_rows(args, config)
    table_rows = []
    reports = []
    for label, mpath, model, fn in rows:
        report = evaluate_detector(fn, frames, confidence_threshold=confidence,
                                   match_iou=match_iou)
        table_rows.append((label, report))
        reports.append({"checkpoint": str(mpath),
                        "precision": model.precision.value,
                        "report": report.to_dict()})
    print(format_eval_table(table_rows))
    if args.out is not None:
        _write_json(args.out, {"data": str(args.data), "models": reports})
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _config_of(args)
    manifest_path = _manifest_path(args.data)
    manifest = load_manifest(manifest_path)
    records = manifest.records
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigError(f"--limit must be >= 1, got {args.limit}")
        records = records[: args.limit]
    if not records:
        raise DataError(f"{manifest_path}: dataset is empty")
    base = manifest_path.parent
    pixels = [load_image(base / r.image_path) for r in records]
    rows, _ = _model_rows(args, config)
    table_rows = []
    reports = []
    for label, mpath, model, fn in rows:
        report = benchmark_latency(fn, pixels, warmup=args.warmup)
        table_rows.append((label, report))
        reports.append({"checkpoint": str(mpath),
                        "precision": model.precision.value,
                        "report": report.to_dict()})
    print(format_latency_table(table_rows))
    if args.out is not None:
        _write_json(args.out, {"data": str(args.data), "models": reports})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="satdet",
                     description="Synthetic space imagery and a from-scratch "
                                 "RSO detector, end to end.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON supplying defaults")

    p = sub.add_parser("generate", parents=[common], add_help=True,
                       help="render a labeled synthetic dataset")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--observations", type=int, default=50,
                   help="number of observations (default 50)")
    p.add_argument("--frames-per-obs", type=int, default=10,
                   help="frames per observation (default 10)")
    p.add_argument("--mode", choices=[m.value for m in TrackingMode],
                   help="tracking mode (default from config or rate_track)")
    p.add_argument("--seed", type=int, help="master generation seed")
    p.add_argument("--width", type=int, help="frame width in pixels")
    p.add_argument("--height", type=int, help="frame height in pixels")
    p.add_argument("--star-count", type=int, help="stars per frame")
    p.add_argument("--rso-count", type=int, help="RSOs per frame")
    p.add_argument("--star-mag", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="star magnitude range")
    p.add_argument("--rso-mag", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="RSO magnitude range")
    p.add_argument("--streak-length", type=float, help="streak length in pixels")
    p.add_argument("--psf-sigma", type=float, help="PSF sigma in pixels")
    p.add_argument("--background", type=float, help="background level in counts")
    p.add_argument("--read-noise", type=float, help="read noise sigma in counts")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("augment", parents=[common],
                       help="expand a dataset by the 8 dihedral transforms")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", help="output dataset directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", parents=[common],
                       help="partition a dataset into train and val")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", help="output directory (train/ and val/ created)")
    p.add_argument("--train-fraction", type=float, default=0.67,
                   help="fraction of frames in the train split (default 0.67)")
    p.add_argument("--seed", type=int, help="shuffle seed")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--train-data", required=True,
                   help="training dataset directory or manifest")
    p.add_argument("--val-data", required=True,
                   help="validation dataset directory or manifest")
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("--size", choices=[s.value for s in SizeClass],
                   default=SizeClass.SMALL.value, help="model size class")
    p.add_argument("--input-size", type=int, default=256,
                   help="square model input size (default 256)")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, help="minibatch size")
    p.add_argument("--learning-rate", type=float, help="Adam learning rate")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--neg-pos-ratio", type=int, help="hard-negative ratio")
    p.add_argument("--early-stop-f1", type=float,
                   help="stop once validation F1 reaches this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common],
                       help="run a checkpoint on one image")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input image (16-bit PNG or PGM)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--confidence-threshold", dest="confidence_threshold",
                   type=float, help="detection confidence threshold")
    p.add_argument("--nms-iou", dest="nms_iou", type=float,
                   help="NMS IoU threshold")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("quantize", parents=[common],
                       help="post-training int8 quantization of a checkpoint")
    p.add_argument("--model", required=True, help="float checkpoint path")
    p.add_argument("--calib", required=True,
                   help="calibration dataset directory or manifest")
    p.add_argument("--out", help="quantized checkpoint path "
                                 "(default <model>_quant<ext>)")
    p.add_argument("--max-frames", type=int, default=32,
                   help="calibration frames to use (default 32)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", parents=[common],
                       help="precision/recall/F1 of checkpoints on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--model", required=True, action="append",
                   help="checkpoint path (repeatable)")
    p.add_argument("--confidence-threshold", dest="confidence_threshold",
                   type=float, help="detection confidence threshold")
    p.add_argument("--match-iou", dest="match_iou", type=float,
                   help="IoU required to match a ground-truth box")
    p.add_argument("--nms-iou", dest="nms_iou", type=float,
                   help="NMS IoU threshold")
    p.add_argument("--out", help="also write the reports as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common],
                       help="per-frame latency of checkpoints on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--model", required=True, action="append",
                   help="checkpoint path (repeatable)")
    p.add_argument("--confidence-threshold", dest="confidence_threshold",
                   type=float, help="detection confidence threshold")
    p.add_argument("--nms-iou", dest="nms_iou", type=float,
                   help="NMS IoU threshold")
    p.add_argument("--warmup", type=int, default=5,
                   help="untimed warmup inferences (default 5)")
    p.add_argument("--limit", type=int, help="cap the number of frames")
    p.add_argument("--out", help="also write the reports as JSON here")
    p.set_defaults(func=cmd_bench)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("SATDET_LOG", "warning").lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warning": logging.WARNING, "error": logging.ERROR}.get(
        level_name, logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DataError) as e:
        print(f"satdet: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"satdet: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as e:
        print(f"satdet: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except SatdetError as e:
        print(f"satdet: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        print(f"satdet: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
