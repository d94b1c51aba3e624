"""Command-line front end: build training sets, train, predict, evaluate,
post-process, and synthesize desk-scale data.

Config resolution: explicit flags override --config JSON values, which
override built-in defaults; the seed additionally falls back to the
CRACKFPN_SEED environment variable, then 0. Every run logs its fully
resolved configuration. Exit codes: 0 success, 2 bad input, 3 unexpected
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .core_data import (
    BinaryMask,
    ManifestError,
    RasterImage,
    load_image,
    load_mask,
    read_manifest,
    save_image,
    save_mask,
)
from .eval_post import (
    PostprocessParams,
    dilate_threshold_extend,
    evaluate_dataset,
    read_metrics_csv,
    save_comparison_chart,
    write_metrics_csv,
    write_metrics_json,
)
from .fpn_net import CheckpointError, ENCODERS, ModelConfig, binarize, load_checkpoint
from .preprocess import AugmentConfig, SplitParams, build_resize_set, build_split_set
from .synth import SynthConfig, build_synth_set
from .tiled_infer import model_predictor, plan_tiles, predict_resize_back, predict_tiled
from .train_engine import TrainConfig, fit

log = logging.getLogger("crackfpn")

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# resize targets for the two downscale presets
PRESET_TARGETS = {"ts1": (1600, 2400), "ts2": (2112, 3168)}
PRESET_NAMES = {"ts1": "TS1", "ts2": "TS2", "ts3": "TS3", "ts4": "TS4", "custom": "custom"}

REQUIRED = {
    "preprocess": ("images", "labels", "out"),
    "train": ("manifest", "out"),
    "predict": ("checkpoint", "image", "out"),
    "evaluate": ("pred", "labels", "out"),
    "postprocess": ("mask", "image", "out"),
    "synthesize": ("out",),
}


class InputError(ValueError):
    """Bad user input: missing paths, unpaired ids, inconsistent flags."""


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = str(text).lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW (e.g. 480x640), got {text!r}") from exc


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="crackfpn",
        description="Crack segmentation: dataset construction, FPN training, "
        "tiled inference, and evaluation.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    table: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, help_: str, func) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON file of defaults; explicit flags win")
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: config, then $CRACKFPN_SEED, then 0)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        table[name] = p
        return p

    p = sub("preprocess", "build a training set from photo/label directories", cmd_preprocess)
    p.add_argument("--images", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--preset", default="ts1", choices=sorted(PRESET_NAMES))
    p.add_argument("--mode", choices=["resize", "split"], default=None,
                   help="required with --preset custom")
    p.add_argument("--target", type=_size, default=None,
                   help="HxW resize target (custom resize mode)")
    p.add_argument("--tile-h", type=int, default=480)
    p.add_argument("--tile-w", type=int, default=640)
    p.add_argument("--stride-r", type=int, default=320)
    p.add_argument("--stride-c", type=int, default=320)
    p.add_argument("--background-sample", type=int, default=3500)
    p.add_argument("--crack-threshold", type=int, default=127)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = sub("train", "train a segmentation model from a manifest", cmd_train)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--preset", default="custom",
                   choices=["model1", "model2", "model3", "model4", "custom"])
    p.add_argument("--encoder", default="se_resnext50_32x4d", choices=sorted(ENCODERS))
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--optimizer", default="adaptive_moments",
                   choices=["adaptive_moments", "sgd_momentum"])
    p.add_argument("--loss", default="dice", choices=["dice", "dice_plus_bce"])
    p.add_argument("--dice-smooth", type=float, default=1.0)
    p.add_argument("--crop", default="none", choices=["none", "random"])
    p.add_argument("--crop-h", type=int, default=480)
    p.add_argument("--crop-w", type=int, default=640)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--oversample-crack", action="store_true")
    p.add_argument("--stop-miou", type=float, default=None,
                   help="stop early once training mIoU reaches this value")
    p.add_argument("--workers", type=int, default=1)

    p = sub("predict", "predict a crack mask for one photo", cmd_predict)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--mode", default="tiled", choices=["tiled", "resize_back"])
    p.add_argument("--tile-h", type=int, default=480)
    p.add_argument("--tile-w", type=int, default=640)
    p.add_argument("--combine", default="mean", choices=["mean", "max"])
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--train-size", type=_size, default=None,
                   help="HxW the checkpoint was trained at (resize_back mode)")
    p.add_argument("--threshold", type=float, default=None,
                   help="override the checkpoint binarization threshold")
    p.add_argument("--dump-plan", type=Path, default=None,
                   help="write the tile plan as JSONL")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = sub("evaluate", "score predicted masks against labels", cmd_evaluate)
    p.add_argument("--pred", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--crack-threshold", type=int, default=127)
    p.add_argument("--compare", nargs="*", default=None, metavar="NAME=METRICS_CSV",
                   help="chart this run alongside previously written reports")

    p = sub("postprocess", "extend a predicted mask into adjacent dark pixels",
            cmd_postprocess)
    p.add_argument("--mask", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--intensity-threshold", type=int, default=100)

    p = sub("synthesize", "generate a synthetic crack dataset", cmd_synthesize)
    p.add_argument("--out", type=Path)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=_size, default=(960, 1280))
    p.add_argument("--crack-prob", type=float, default=1.0)
    p.add_argument("--max-cracks", type=int, default=3)

    return parser, table


def _resolve_args(argv) -> argparse.Namespace:
    parser, table = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise InputError("config file must hold a JSON object")
        sub = table[args.command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(overrides) - (set(actions) - {"help", "config"}))
        if unknown:
            raise InputError(f"unknown config keys for {args.command}: {unknown}")
        converted = {}
        for key, value in overrides.items():
            action = actions[key]
            if action.type is not None and isinstance(value, str):
                value = action.type(value)
            if action.choices is not None and value not in action.choices:
                raise InputError(
                    f"config key {key!r}: {value!r} not in {sorted(action.choices)}"
                )
            converted[key] = value
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)  # explicit flags still win
    if args.seed is None:
        env = os.environ.get("CRACKFPN_SEED")
        if env:
            try:
                args.seed = int(env)
            except ValueError as exc:
                raise InputError(f"CRACKFPN_SEED must be an integer, got {env!r}") from exc
        else:
            args.seed = 0
    for name in REQUIRED[args.command]:
        if getattr(args, name) is None:
            raise InputError(f"--{name.replace('_', '-')} is required (flag or config)")
    return args


def _log_resolved(args: argparse.Namespace, out_dir: Path | None) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "config", "verbose")
    }
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(
            json.dumps(resolved, indent=2, sort_keys=True) + "\n"
        )


def _pair_dirs(image_dir: Path, label_dir: Path) -> list[tuple[str, Path, Path]]:
    """Match files across two directories by stem, sorted by id."""
    for d, what in ((image_dir, "image"), (label_dir, "label")):
        if not d.is_dir():
            raise InputError(f"{what} directory not found: {d}")

    def index(d: Path) -> dict[str, Path]:
        out: dict[str, Path] = {}
        for p in sorted(d.iterdir()):
            if p.is_file() and p.suffix.lower() in IMAGE_EXTS:
                if p.stem in out:
                    raise InputError(f"duplicate id {p.stem!r} in {d}")
                out[p.stem] = p
        return out

    images = index(image_dir)
    labels = index(label_dir)
    if not images:
        raise InputError(f"no images found in {image_dir}")
    unlabeled = sorted(set(images) - set(labels))
    orphaned = sorted(set(labels) - set(images))
    if unlabeled or orphaned:
        raise InputError(
            f"unpaired ids: images without labels {unlabeled[:5]}, "
            f"labels without images {orphaned[:5]}"
        )
    return [(stem, images[stem], labels[stem]) for stem in sorted(images)]


def render_overlay(photo: RasterImage, mask: BinaryMask) -> RasterImage:
    """Photo with crack regions tinted red and outlined solid red."""
    region = mask.data.astype(bool)
    out = photo.data.copy()
    blended = (out[region].astype(np.uint16) + np.array([255, 0, 0], np.uint16)) // 2
    out[region] = blended.astype(np.uint8)
    interior = ndimage.binary_erosion(region, np.ones((3, 3), bool))
    out[region & ~interior] = (255, 0, 0)
    return RasterImage(out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    pairs = _pair_dirs(args.images, args.labels)
    _log_resolved(args, args.out)
    preset = PRESET_NAMES[args.preset]
    mode = args.mode
    if args.preset in PRESET_TARGETS:
        mode = "resize"
    elif args.preset in ("ts3", "ts4"):
        mode = "split"
    elif mode is None:
        raise InputError("--preset custom needs --mode resize|split")

    if mode == "resize":
        target = PRESET_TARGETS.get(args.preset, args.target)
        if target is None:
            raise InputError("custom resize mode needs --target HxW")
        manifest = build_resize_set(
            pairs, preset, target, args.out,
            seed=args.seed, crack_threshold=args.crack_threshold, workers=args.workers,
        )
        print(f"{len(manifest.entries)} pairs resized to "
              f"{target[0]}x{target[1]} -> {args.out}")
    else:
        background = args.background_sample if args.preset in ("ts4", "custom") else 0
        params = SplitParams(
            tile_h=args.tile_h, tile_w=args.tile_w,
            stride_r=args.stride_r, stride_c=args.stride_c,
            background_sample=background, seed=args.seed,
        )
        manifest = build_split_set(
            pairs, preset, params, args.out,
            crack_threshold=args.crack_threshold, workers=args.workers,
        )
        crack = sum(1 for e in manifest.entries if e["contains_crack"])
        print(f"{len(manifest.entries)} tiles ({crack} crack, "
              f"{len(manifest.entries) - crack} background) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    if not args.manifest.is_file():
        raise InputError(f"manifest not found: {args.manifest}")
    manifest = read_manifest(args.manifest)
    model_config = ModelConfig.tiny() if args.encoder == "tiny" else ModelConfig()
    config = TrainConfig(
        preset=args.preset,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        optimizer=args.optimizer,
        loss=args.loss,
        dice_smooth=args.dice_smooth,
        crop=args.crop,
        crop_h=args.crop_h,
        crop_w=args.crop_w,
        augment=None if args.no_augment else AugmentConfig(),
        seed=args.seed,
        oversample_crack=args.oversample_crack,
        stop_miou=args.stop_miou,
        model=model_config,
    )
    _log_resolved(args, args.out)
    torch.set_num_threads(max(1, args.workers))
    ckpt, history = fit(manifest, config, manifest_dir=args.manifest.parent,
                        out_dir=args.out)
    if history.records:
        last = history.records[-1]
        print(f"trained {len(history)} epochs; final loss {last.loss:.4f}, "
              f"train mIoU {last.train_miou:.4f} -> {args.out}")
    else:
        print(f"wrote initial checkpoint (epochs=0) -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    threshold = args.threshold if args.threshold is not None else model.config.threshold
    _log_resolved(args, args.out)
    torch.set_num_threads(max(1, args.workers))
    predictor = model_predictor(model)
    if args.mode == "tiled":
        plan = plan_tiles(image.height, image.width, args.tile_h, args.tile_w)
        log.info(
            "tiled inference: %d tile forwards (%d base + %d junction) on %dx%d",
            len(plan.tiles), len(plan.base), len(plan.junction),
            image.height, image.width,
        )
        if args.dump_plan is not None:
            with open(args.dump_plan, "w") as fh:
                header = {
                    "orig_h": plan.orig_h, "orig_w": plan.orig_w,
                    "padded_h": plan.padded_h, "padded_w": plan.padded_w,
                    "tile_h": plan.tile_h, "tile_w": plan.tile_w,
                    "tiles": len(plan.tiles),
                }
                fh.write(json.dumps(header, sort_keys=True) + "\n")
                for rec in plan.records():
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        prob = predict_tiled(image, predictor, plan=plan,
                             combine=args.combine, batch_size=args.batch_size)
    else:
        if args.train_size is None:
            raise InputError("resize_back mode needs --train-size HxW")
        prob = predict_resize_back(image, predictor, *args.train_size)
    mask = binarize(prob, threshold)
    stem = args.image.stem
    for sub in ("prob", "mask", "overlay"):
        (args.out / sub).mkdir(parents=True, exist_ok=True)
    save_mask(prob, args.out / "prob" / f"{stem}.png")
    save_mask(mask, args.out / "mask" / f"{stem}.png")
    save_image(render_overlay(image, mask), args.out / "overlay" / f"{stem}.png")
    frac = mask.crack_pixels() / mask.data.size
    print(f"{stem}: {mask.crack_pixels()} crack pixels "
          f"({100.0 * frac:.2f}% of frame) -> {args.out}")
    return 0


def _parse_compare(items: list[str]) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for item in items:
        name, _, path = item.partition("=")
        if not name or not path:
            raise InputError(f"--compare entries look like name=metrics.csv, got {item!r}")
        if name in out:
            raise InputError(f"duplicate --compare name {name!r}")
        p = Path(path)
        if not p.is_file():
            raise InputError(f"report not found: {p}")
        out[name] = p
    return out


def cmd_evaluate(args) -> int:
    pairs = _pair_dirs(args.pred, args.labels)
    _log_resolved(args, args.out)
    predictions = {}
    labels = {}
    for stem, pred_path, label_path in pairs:
        predictions[stem] = load_mask(pred_path, args.crack_threshold)
        labels[stem] = load_mask(label_path, args.crack_threshold)
    report = evaluate_dataset(predictions, labels)
    write_metrics_csv(report, args.out / "metrics.csv")
    write_metrics_json(report, args.out / "metrics.json")
    print(f"mIoU {report.miou:.4f}, mean Dice loss {report.mean_dice_loss:.4f} "
          f"over {report.count} images -> {args.out}")
    if args.compare is not None:
        charted = {"this-run": report}
        for name, path in _parse_compare(args.compare).items():
            charted[name] = read_metrics_csv(path)
        save_comparison_chart(charted, args.out / "comparison.png")
        print(f"comparison chart of {len(charted)} reports -> "
              f"{args.out / 'comparison.png'}")
    return 0


def cmd_postprocess(args) -> int:
    mask = load_mask(args.mask)
    photo = load_image(args.image)
    params = PostprocessParams(
        enabled=True,
        kernel=args.kernel,
        iterations=args.iterations,
        intensity_threshold=args.intensity_threshold,
    )
    _log_resolved(args, None)
    extended = dilate_threshold_extend(mask, photo, params)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(extended, args.out)
    added = extended.crack_pixels() - mask.crack_pixels()
    print(f"extended mask by {added} pixels -> {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    config = SynthConfig(
        height=args.size[0],
        width=args.size[1],
        count=args.count,
        seed=args.seed,
        crack_prob=args.crack_prob,
        max_cracks=args.max_cracks,
    )
    _log_resolved(args, args.out)
    ids = build_synth_set(args.out, config)
    print(f"{len(ids)} synthetic image/label pairs -> {args.out}")
    return 0


def main(argv=None) -> int:
    try:
        args = _resolve_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args) or 0
    except (InputError, FileNotFoundError, ManifestError, CheckpointError,
            ValueError) as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("unexpected failure")
        return 3


if __name__ == "__main__":
    sys.exit(main())
