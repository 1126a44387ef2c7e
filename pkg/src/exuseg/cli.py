"""Command-line pipeline: prepare | train | predict | evaluate | gradcheck.

One JSON run configuration drives everything; ``--set key.path=value``
overrides individual fields so a desk-scale run and the full-scale
schedule differ only in config. Set EXUSEG_LOG=DEBUG (or WARNING, ...)
to change verbosity. Every command is deterministic given config and
seed: reruns produce byte-identical archives, checkpoints, and PNGs.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import gradcheck as gc
from . import inference as inf
from . import metrics as mx
from .errors import ConfigError
from .model import Model, ModelConfig, default_config
from .tensor import Rng
from .training import (
    TrainSchedule,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("exuseg")

DEFAULT_CONFIG = {
    "seed": 1234,
    "paths": {
        "images_dir": None,
        "masks_dir": None,
        "train_list": None,
        "test_list": None,
        "output_dir": "out",
    },
    "extraction": {"per_class": 2500},
    "model": None,  # null -> stock architecture
    "engine": {"dtype": "float64"},
    "schedule": {
        "shard_count": 5,
        "shard_size": 40000,
        "epochs_per_shard": 500,
        "streaks": 3,
        "batch_size": 50,
        "shuffle_seed": 0,
        "interleaved": False,
    },
    "optimizer": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "training": {"checkpoint_every": 1},
    "inference": {"mode": "valid", "batch": 512},
}

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def load_run_config(path=None, sets=(), seed=None, mode=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = _deep_merge(cfg, user)
    for assignment in sets:
        _apply_set(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    if mode is not None:
        cfg["inference"]["mode"] = mode
    return cfg


def _require_paths(cfg: dict, keys) -> dict:
    paths = {}
    missing = []
    for key in keys:
        value = cfg["paths"].get(key)
        if value is None:
            missing.append(key)
            continue
        p = Path(value)
        if key != "output_dir" and not p.exists():
            raise ConfigError(f"paths.{key} does not exist: {p}")
        paths[key] = p
    if missing:
        raise ConfigError(f"config is missing paths: {', '.join(missing)}")
    return paths


def _model_config(cfg: dict) -> ModelConfig:
    if cfg.get("model") is None:
        return default_config()
    return ModelConfig.from_dict(cfg["model"])


def _schedule(cfg: dict) -> TrainSchedule:
    return TrainSchedule.from_dict(cfg["schedule"])


def _read_list(path: Path) -> list[str]:
    stems = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            stems.append(line)
    return stems


def _find_file(directory: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- prepare


def _extract_split(stems, images_dir, masks_dir, per_class, rng):
    unpaired = []
    pairs = []
    for stem in stems:
        image_path = _find_file(images_dir, stem)
        mask_path = _find_file(masks_dir, stem)
        if image_path is None or mask_path is None:
            unpaired.append(stem)
        else:
            pairs.append((stem, image_path, mask_path))
    if unpaired:
        raise ConfigError(
            f"cannot pair image/mask for stems: {', '.join(unpaired)}"
        )
    parts = []
    for stem, image_path, mask_path in pairs:
        img = ds.load_image(image_path)
        mask = ds.load_mask(mask_path)
        if img.pixels.shape[:2] != mask.pixels.shape:
            raise ConfigError(
                f"{stem}: image extents {img.pixels.shape[:2]} do not match "
                f"mask extents {mask.pixels.shape}"
            )
        img = ds.resize_to_working(img)
        mask = ds.resize_mask(mask)
        parts.append(ds.extract_balanced(img, mask, per_class, rng))
    return parts


def cmd_prepare(cfg: dict) -> int:
    paths = _require_paths(
        cfg, ["images_dir", "masks_dir", "train_list", "test_list", "output_dir"]
    )
    out_dir = paths["output_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    per_class = int(cfg["extraction"]["per_class"])
    seed = int(cfg["seed"])
    rng = Rng(seed).split("extract")

    for split, list_key in (("train", "train_list"), ("test", "test_list")):
        stems = _read_list(paths[list_key])
        if not stems:
            raise ConfigError(f"{split} list {paths[list_key]} is empty")
        parts = _extract_split(stems, paths["images_dir"], paths["masks_dir"],
                               per_class, rng.split(split))
        provenance = {
            "split": split,
            "seed": seed,
            "per_class": per_class,
            "image_count": len(stems),
        }
        merged = ds.PatchSet.concat(parts, provenance=provenance)
        archive = out_dir / f"{split}_patches.exps"
        ds.save_patchset(merged, archive)
        sidecar = {
            "split": split,
            "seed": seed,
            "per_class": per_class,
            "sources": merged.sources,
            "class_counts": merged.class_counts,
            "records": len(merged),
            "warnings": merged.warnings,
        }
        _json_dump(sidecar, out_dir / f"{split}_patches.provenance.json")
        counts = merged.class_counts
        print(
            f"{split}: {len(merged)} patches from {len(stems)} images "
            f"({counts['background']} background, {counts['exudate']} exudate)"
            + (f"; {len(merged.warnings)} warnings" if merged.warnings else "")
        )
        for warning in merged.warnings:
            print(f"  warning: {warning}")
    return 0


# ------------------------------------------------------------------ train


def _csv_row(streak, shard, epoch, loss, acc) -> str:
    # column order: epoch, shard, streak, loss, train_accuracy
    return f"{epoch},{shard},{streak},{loss!r},{acc!r}\n"


def cmd_train(cfg: dict, resume_path=None, max_epochs=None) -> int:
    paths = _require_paths(cfg, ["output_dir"])
    out_dir = paths["output_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    archive = cfg["paths"].get("train_archive") or (out_dir / "train_patches.exps")
    archive = Path(archive)
    if not archive.exists():
        raise ConfigError(f"training archive not found: {archive}")

    patches = ds.load_patchset(archive)
    config = _model_config(cfg)
    schedule = _schedule(cfg)
    schedule.validate()
    config.validate()
    dtype = np.dtype(cfg["engine"]["dtype"])
    checkpoint_every = int(cfg["training"]["checkpoint_every"])
    ckpt_path = out_dir / "checkpoint.exsg"
    csv_path = out_dir / "metrics.csv"

    resume = None
    if resume_path is not None:
        resume = load_checkpoint(resume_path)
        log.info("resuming from %s at position %s", resume_path, resume.position)

    log.info(
        "plan: %d streaks x %d shards x %d epochs/shard = %d shard-epochs "
        "(%d reported epochs), batch %d over %d patches",
        schedule.streaks, schedule.shard_count, schedule.epochs_per_shard,
        schedule.total_shard_epochs, schedule.reported_epochs,
        schedule.batch_size, schedule.total_patches,
    )

    rng = Rng(int(cfg["seed"])).split("train")
    events = train(patches, config, schedule, rng, dtype=dtype,
                   adam_kwargs=dict(cfg["optimizer"]), resume=resume)

    csv_file = open(csv_path, "w")
    csv_file.write("epoch,shard,streak,loss,train_accuracy\n")
    if resume is not None:
        for row in resume.history:
            csv_file.write(_csv_row(*row))
    csv_file.flush()

    last_ckpt = resume
    ran = 0
    try:
        for event in events:
            ran += 1
            csv_file.write(_csv_row(event.streak, event.shard, event.epoch,
                                    event.loss, event.train_accuracy))
            csv_file.flush()
            last_ckpt = event.checkpoint
            print(
                f"streak {event.streak} shard {event.shard} "
                f"epoch {event.epoch}: loss {event.loss:.6f} "
                f"accuracy {event.train_accuracy:.4f}"
            )
            if ran % checkpoint_every == 0:
                save_checkpoint(event.checkpoint, ckpt_path)
            if max_epochs is not None and ran >= max_epochs:
                log.info("stopping after %d shard-epochs (--max-epochs)", ran)
                break
    finally:
        csv_file.close()

    if last_ckpt is not None and last_ckpt is not resume:
        save_checkpoint(last_ckpt, ckpt_path)
    print(f"trained {ran} shard-epochs; checkpoint: {ckpt_path}")
    return 0


# ---------------------------------------------------------------- predict


def cmd_predict(cfg: dict, checkpoint_path, image_paths) -> int:
    paths = _require_paths(cfg, ["output_dir"])
    ckpt_file = Path(checkpoint_path)
    if not ckpt_file.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_file}")
    ckpt = load_checkpoint(ckpt_file)
    model = ckpt.build_model()

    if not image_paths:
        p = _require_paths(cfg, ["images_dir", "test_list"])
        stems = _read_list(p["test_list"])
        image_paths = []
        for stem in stems:
            found = _find_file(p["images_dir"], stem)
            if found is None:
                raise ConfigError(f"test image not found for stem {stem!r}")
            image_paths.append(found)

    mode = cfg["inference"]["mode"]
    batch = int(cfg["inference"]["batch"])
    pred_dir = paths["output_dir"] / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    for path in image_paths:
        img = ds.resize_to_working(ds.load_image(path))
        pm = inf.predict_image(img, model, mode=mode, batch=batch)
        stem = Path(path).stem
        inf.write_mask(pm, pred_dir / f"{stem}_mask_{mode}.png")
        inf.write_probability(pm, pred_dir / f"{stem}_prob_{mode}.png")
        inf.overlay(img, pm, pred_dir / f"{stem}_overlay_{mode}.png")
        exudate = int(pm.pixels.sum())
        print(f"{stem}: {exudate} exudate pixels "
              f"({pm.pixels.shape[0]}x{pm.pixels.shape[1]} {mode} mask)")
    return 0


# --------------------------------------------------------------- evaluate


def _truth_for_mode(mask: ds.GroundTruthMask, mode: str) -> np.ndarray:
    resized = ds.resize_mask(mask).pixels
    if mode == "valid":
        return resized[ds.CENTER_LO : ds.CENTER_HI + 1,
                       ds.CENTER_LO : ds.CENTER_HI + 1]
    return resized


def cmd_evaluate(cfg: dict, pred_dir, truth_dir) -> int:
    paths = _require_paths(cfg, ["output_dir"])
    pred_dir = Path(pred_dir)
    truth_dir = Path(truth_dir)
    for d in (pred_dir, truth_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    mode = cfg["inference"]["mode"]

    truth_files = sorted(
        p for p in truth_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not truth_files:
        raise ConfigError(f"no mask files in {truth_dir}")

    errors = []
    per_image = {}
    matrices = []
    for truth_path in truth_files:
        stem = truth_path.stem
        pred_path = None
        for candidate in (f"{stem}_mask_{mode}.png", f"{stem}.png"):
            if (pred_dir / candidate).exists():
                pred_path = pred_dir / candidate
                break
        if pred_path is None:
            errors.append(f"{stem}: no prediction mask in {pred_dir}")
            continue
        truth = _truth_for_mode(ds.load_mask(truth_path), mode)
        pred = inf.read_mask_png(pred_path)
        if pred.shape != truth.shape:
            errors.append(
                f"{stem}: prediction extent {pred.shape} does not match "
                f"truth extent {truth.shape} in {mode} mode"
            )
            continue
        cm = mx.confusion(pred, truth)
        per_image[stem] = mx.report(cm)
        matrices.append(cm)

    if not matrices:
        for message in errors:
            print(f"error: {message}", file=sys.stderr)
        raise ConfigError("no valid prediction/truth pairs to evaluate")

    agg = mx.aggregate(matrices)
    out = {
        "mode": mode,
        "per_image": {stem: rep.to_dict() for stem, rep in per_image.items()},
        "aggregate": agg.to_dict(),
        "errors": errors,
    }
    report_path = paths["output_dir"] / "evaluation.json"
    paths["output_dir"].mkdir(parents=True, exist_ok=True)
    _json_dump(out, report_path)

    for stem, rep in per_image.items():
        print(f"{stem}: accuracy {rep.accuracy:.5f}")
    print()
    print("pooled over", agg.images, "images:")
    print(mx.format_report(agg.pooled))
    print()
    print(f"macro accuracy (mean per image):   {agg.macro_accuracy:.5f}")
    for message in errors:
        print(f"error: {message}", file=sys.stderr)
    print(f"report: {report_path}")
    return 1 if errors else 0


# --------------------------------------------------------------- gradcheck


def cmd_gradcheck(cfg: dict, coords: int = 6) -> int:
    config = _model_config(cfg)
    seed = int(cfg["seed"])

    print("standalone layer checks (tolerance "
          f"{gc.LAYER_TOL:g}, exhaustive finite differences):")
    results = gc.check_standalone_layers(seed=seed)
    failed = False
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"  {status}  {res.name:24s} rel err {res.error:.3e}")
        failed |= not res.passed

    print(f"end-to-end loss gradients (tolerance {gc.MODEL_TOL:g}, "
          f"{coords} sampled coordinates per tensor, batch 4):")
    model = Model(config, rng=Rng(seed).split("init"), dtype=np.float64)
    loss, layer_results = gc.check_model_gradients(
        model, Rng(seed).split("gradcheck"), coords_per_tensor=coords
    )
    print(f"  loss at check point: {loss:.6f}")
    for res in layer_results:
        status = "PASS" if res.passed else "FAIL"
        print(f"  {status}  {res.name:24s} worst rel err {res.error:.3e}")
        failed |= not res.passed

    print("gradcheck:", "FAIL" if failed else "PASS")
    return 1 if failed else 0


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exuseg",
        description="Patch-based hard-exudate segmentation pipeline.",
    )
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config field (dotted path; JSON value)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--mode", choices=["valid", "padded"],
                        help="override the inference mode")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", help="extract balanced patch archives")

    p_train = sub.add_parser("train", help="run the training schedule")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--max-epochs", type=int, default=None,
                         help="stop after this many shard-epochs")

    p_pred = sub.add_parser("predict", help="predict whole-image masks")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("images", nargs="*",
                        help="image files (default: config test list)")

    p_eval = sub.add_parser("evaluate", help="score predictions against truth")
    p_eval.add_argument("--pred-dir", required=True)
    p_eval.add_argument("--truth-dir", required=True)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_gc.add_argument("--coords", type=int, default=6,
                      help="sampled coordinates per parameter tensor")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("EXUSEG_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.sets, args.seed, args.mode)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume_path=args.resume,
                             max_epochs=args.max_epochs)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.images)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.pred_dir, args.truth_dir)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, coords=args.coords)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
