"""Training-set construction: bilinear resizing, zero padding, stride-based
tile extraction, crack/background tile selection, and paired augmentation.

Resize pipelines shrink whole photos (presets TS1/TS2); split pipelines pad
each photo to a tile multiple and cut overlapping 480x640 windows at stride
320 (presets TS3/TS4).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core_data import (
    BinaryMask,
    DatasetManifest,
    ProbMask,
    RasterImage,
    TileRecord,
    check_pair,
    load_image,
    load_mask,
    save_image,
    save_mask,
    tile_entry,
    write_manifest,
)


@dataclass(frozen=True)
class SplitParams:
    """Window geometry and sampling knobs for the splitting pipelines."""

    tile_h: int = 480
    tile_w: int = 640
    stride_r: int = 320
    stride_c: int = 320
    background_sample: int = 3500
    seed: int = 0

    def __post_init__(self):
        if self.tile_h % 32 or self.tile_w % 32:
            raise ValueError("tile dims must be multiples of 32 (network constraint)")
        if not (1 <= self.stride_r <= self.tile_h) or not (1 <= self.stride_c <= self.tile_w):
            raise ValueError("strides must be in [1, tile dim]")
        if self.background_sample < 0:
            raise ValueError("background_sample must be >= 0")


@dataclass(frozen=True)
class AugmentConfig:
    """Per-transform application probabilities.

    Geometric transforms (flips, shift/scale/rotate, perspective) move image
    and mask with identical parameters; photometric ones touch the image only.
    """

    horizontal_flip: float = 0.5
    vertical_flip: float = 0.5
    shift_scale_rotate: float = 0.2
    blur: float = 0.2
    local_contrast_equalization: float = 0.2
    hue_saturation_shift: float = 0.2
    perspective: float = 0.2
    sharpen: float = 0.2
    random_brightness: float = 0.2

    def __post_init__(self):
        for name, p in self.__dict__.items():
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} probability {p} outside [0, 1]")


@dataclass(frozen=True)
class PaddedPair:
    """A zero-padded photo/mask pair plus the pre-padding extent."""

    image: RasterImage | None
    mask: BinaryMask | None
    orig_h: int
    orig_w: int

    @property
    def padded_h(self) -> int:
        ref = self.image if self.image is not None else self.mask
        return ref.height

    @property
    def padded_w(self) -> int:
        ref = self.image if self.image is not None else self.mask
        return ref.width


# ---------------------------------------------------------------------------
# bilinear resizing
# ---------------------------------------------------------------------------

def _bilinear_axis(src: int, dst: int):
    # half-pixel-center sampling: s = (d + 0.5) * src/dst - 0.5, clamped
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def _resize_field(arr: np.ndarray, target_h: int, target_w: int, chunk: int = 256) -> np.ndarray:
    """Resize an (H, W[, C]) field with 2x2-neighborhood bilinear weights.

    Math is float64 throughout: value = (1-fy) * ((1-fx) a + fx b)
    + fy * ((1-fx) c + fx d) over the four clamped neighbors.
    """
    h, w = arr.shape[:2]
    y_lo, y_hi, fy = _bilinear_axis(h, target_h)
    x_lo, x_hi, fx = _bilinear_axis(w, target_w)
    extra = (1,) * (arr.ndim - 2)
    fx = fx.reshape((1, target_w) + extra)
    out = np.empty((target_h, target_w) + arr.shape[2:], dtype=np.float64)
    for r0 in range(0, target_h, chunk):
        r1 = min(r0 + chunk, target_h)
        rows_lo = arr[y_lo[r0:r1]]
        rows_hi = arr[y_hi[r0:r1]]
        a = rows_lo[:, x_lo].astype(np.float64)
        b = rows_lo[:, x_hi].astype(np.float64)
        c = rows_hi[:, x_lo].astype(np.float64)
        d = rows_hi[:, x_hi].astype(np.float64)
        fyc = fy[r0:r1].reshape((r1 - r0, 1) + extra)
        out[r0:r1] = (a * (1.0 - fx) + b * fx) * (1.0 - fyc) + (c * (1.0 - fx) + d * fx) * fyc
    return out


def resize_bilinear(raster, target_h: int, target_w: int):
    """Resize a RasterImage, BinaryMask, or ProbMask to exactly the target dims.

    Masks are interpolated on the {0,1} field and re-binarized at 0.5 (ties
    count as crack). Resizing to the source dims is bit-exact.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {(target_h, target_w)}")
    if isinstance(raster, RasterImage):
        field = _resize_field(raster.data, target_h, target_w)
        return RasterImage(np.floor(field + 0.5).astype(np.uint8))
    if isinstance(raster, BinaryMask):
        field = _resize_field(raster.data, target_h, target_w)
        return BinaryMask((field >= 0.5).astype(np.uint8))
    if isinstance(raster, ProbMask):
        field = _resize_field(raster.data, target_h, target_w)
        return ProbMask(np.clip(field, 0.0, 1.0).astype(np.float32))
    raise TypeError(f"cannot resize {type(raster).__name__}")


# ---------------------------------------------------------------------------
# padding and tile extraction
# ---------------------------------------------------------------------------

def padded_extent(height: int, width: int, tile_h: int, tile_w: int) -> tuple[int, int]:
    """Smallest tile-multiple extent covering (height, width)."""
    return (-(-height // tile_h) * tile_h, -(-width // tile_w) * tile_w)


def _pad_array(arr: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    spec = ((0, pad_h - arr.shape[0]), (0, pad_w - arr.shape[1])) + ((0, 0),) * (arr.ndim - 2)
    return np.pad(arr, spec, mode="constant", constant_values=0)


def pad_to_tile_multiple(
    image: RasterImage | None,
    mask: BinaryMask | None,
    tile_h: int,
    tile_w: int,
) -> PaddedPair:
    """Zero-pad on the bottom and right edges up to the next tile multiple."""
    ref = image if image is not None else mask
    if ref is None:
        raise ValueError("need an image or a mask to pad")
    if image is not None and mask is not None:
        check_pair(image, mask)
    pad_h, pad_w = padded_extent(ref.height, ref.width, tile_h, tile_w)
    out_image = out_mask = None
    if image is not None:
        out_image = RasterImage(_pad_array(image.data, pad_h, pad_w))
    if mask is not None:
        out_mask = BinaryMask(_pad_array(mask.data, pad_h, pad_w))
    return PaddedPair(image=out_image, mask=out_mask, orig_h=ref.height, orig_w=ref.width)


def window_origins(extent: int, tile: int, stride: int) -> list[int]:
    """Window start offsets along one axis, clamping a final window to the
    far edge when (extent - tile) is not a stride multiple."""
    if extent < tile:
        raise ValueError(f"tile {tile} larger than padded extent {extent}")
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)
    return origins


def split_training_tiles(pair: PaddedPair, params: SplitParams, image_id: str) -> list[TileRecord]:
    """Enumerate stride-offset training windows over a padded pair.

    contains_crack is true iff the mask has at least one crack pixel inside
    the window; touches_padding is true iff the window extends past the
    original extent.
    """
    if pair.mask is None:
        raise ValueError("splitting needs the mask to flag crack tiles")
    mask = pair.mask.data
    h, w = mask.shape
    records = []
    for r in window_origins(h, params.tile_h, params.stride_r):
        for c in window_origins(w, params.tile_w, params.stride_c):
            window = mask[r : r + params.tile_h, c : c + params.tile_w]
            records.append(
                TileRecord(
                    image_id=image_id,
                    row_off=r,
                    col_off=c,
                    tile_h=params.tile_h,
                    tile_w=params.tile_w,
                    contains_crack=bool(window.any()),
                    touches_padding=bool(
                        r + params.tile_h > pair.orig_h or c + params.tile_w > pair.orig_w
                    ),
                )
            )
    return records


def select_crack_tiles(tiles: list[TileRecord]) -> list[TileRecord]:
    """Tiles with at least one crack pixel, order preserved."""
    return [t for t in tiles if t.contains_crack]


def sample_background_tiles(tiles: list[TileRecord], n: int, seed: int) -> list[TileRecord]:
    """Uniform sample of n background tiles without replacement, original
    order preserved; deterministic for a fixed seed."""
    background = [t for t in tiles if not t.contains_crack]
    if n > len(background):
        raise ValueError(f"asked for {n} background tiles, only {len(background)} exist")
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(background), size=n, replace=False).tolist())
    return [background[i] for i in picked]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(image: np.ndarray, mask: np.ndarray):
    return np.ascontiguousarray(image[:, ::-1]), np.ascontiguousarray(mask[:, ::-1])


def vflip(image: np.ndarray, mask: np.ndarray):
    return np.ascontiguousarray(image[::-1]), np.ascontiguousarray(mask[::-1])


def shift_scale_rotate(image, mask, shift_frac, scale, angle_deg):
    # one affine matrix for both rasters; nearest keeps the mask binary
    h, w = mask.shape
    m = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle_deg, scale)
    m[0, 2] += shift_frac[1] * w
    m[1, 2] += shift_frac[0] * h
    img = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    msk = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_NEAREST,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return img, msk


def perspective_warp(image, mask, corner_jitter):
    h, w = mask.shape
    src = np.float32([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]])
    dst = src + np.float32(corner_jitter) * np.float32([w, h])
    m = cv2.getPerspectiveTransform(src, dst)
    img = cv2.warpPerspective(image, m, (w, h), flags=cv2.INTER_LINEAR,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    msk = cv2.warpPerspective(mask, m, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return img, msk


def box_blur(image, k: int = 3):
    return cv2.blur(image, (k, k))


def clahe_equalize(image, clip: float = 2.0, grid: int = 8):
    lab = cv2.cvtColor(image, cv2.COLOR_RGB2LAB)
    lab[:, :, 0] = cv2.createCLAHE(clipLimit=clip, tileGridSize=(grid, grid)).apply(lab[:, :, 0])
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def hue_saturation_value_shift(image, h_shift: int, s_shift: int, v_shift: int):
    hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV).astype(np.int16)
    hsv[:, :, 0] = (hsv[:, :, 0] + h_shift) % 180
    hsv[:, :, 1] = np.clip(hsv[:, :, 1] + s_shift, 0, 255)
    hsv[:, :, 2] = np.clip(hsv[:, :, 2] + v_shift, 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


def sharpen(image, alpha: float):
    blurred = cv2.GaussianBlur(image, (0, 0), 1.0)
    boosted = image.astype(np.float32) + alpha * (image.astype(np.float32) - blurred.astype(np.float32))
    return np.clip(boosted, 0, 255).astype(np.uint8)


def brightness_shift(image, delta: int):
    return np.clip(image.astype(np.int16) + delta, 0, 255).astype(np.uint8)


def augment(image: RasterImage, mask: BinaryMask, config: AugmentConfig,
            rng: np.random.Generator) -> tuple[RasterImage, BinaryMask]:
    """Apply the configured transforms in a fixed order, geometric first.

    Every transform gate draws from rng even when its probability is 0, so a
    given generator state always yields the same decisions.
    """
    check_pair(image, mask)
    img = np.array(image.data)
    msk = np.array(mask.data)
    if rng.random() < config.horizontal_flip:
        img, msk = hflip(img, msk)
    if rng.random() < config.vertical_flip:
        img, msk = vflip(img, msk)
    if rng.random() < config.shift_scale_rotate:
        shift = rng.uniform(-0.0625, 0.0625, size=2)
        scale = float(rng.uniform(0.9, 1.1))
        angle = float(rng.uniform(-15.0, 15.0))
        img, msk = shift_scale_rotate(img, msk, shift, scale, angle)
    if rng.random() < config.perspective:
        jitter = rng.uniform(-0.05, 0.05, size=(4, 2))
        img, msk = perspective_warp(img, msk, jitter)
    if rng.random() < config.blur:
        img = box_blur(img, 3)
    if rng.random() < config.local_contrast_equalization:
        img = clahe_equalize(img)
    if rng.random() < config.hue_saturation_shift:
        img = hue_saturation_value_shift(
            img,
            int(rng.integers(-10, 11)),
            int(rng.integers(-30, 31)),
            int(rng.integers(-30, 31)),
        )
    if rng.random() < config.sharpen:
        img = sharpen(img, float(rng.uniform(0.2, 0.5)))
    if rng.random() < config.random_brightness:
        img = brightness_shift(img, int(rng.integers(-51, 52)))
    return RasterImage(img), BinaryMask(msk)


def augment_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for one augmentation stream, derived from the global seed
    plus stream coordinates so parallel order never changes results."""
    return np.random.default_rng(np.random.SeedSequence((seed,) + tuple(stream)))


# ---------------------------------------------------------------------------
# set-building pipelines (TS1..TS4)
# ---------------------------------------------------------------------------

def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def tile_basename(record: TileRecord) -> str:
    return f"r{record.row_off}_c{record.col_off}"


def build_resize_set(
    pairs: list[tuple[str, Path, Path]],
    preset: str,
    target: tuple[int, int],
    out_dir,
    seed: int = 0,
    crack_threshold: int = 127,
    workers: int = 1,
) -> DatasetManifest:
    """Resize every photo/label pair to `target` and emit PNGs + manifest.

    `pairs` is an ordered list of (image_id, image_path, mask_path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_h, target_w = target

    def one(pair):
        image_id, image_path, mask_path = pair
        image = load_image(image_path)
        mask = load_mask(mask_path, crack_threshold)
        check_pair(image, mask)
        small_img = resize_bilinear(image, target_h, target_w)
        small_msk = resize_bilinear(mask, target_h, target_w)
        img_rel = f"{image_id}.png"
        msk_rel = f"{image_id}_mask.png"
        save_image(small_img, out_dir / img_rel)
        save_mask(small_msk, out_dir / msk_rel)
        return {
            "image_id": image_id,
            "height": target_h,
            "width": target_w,
            "image": img_rel,
            "mask": msk_rel,
        }

    entries = _map_ordered(one, pairs, workers)
    manifest = DatasetManifest(
        preset=preset,
        mode="resize",
        params={"target_h": target_h, "target_w": target_w},
        entries=entries,
        seed=seed,
    )
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def build_split_set(
    pairs: list[tuple[str, Path, Path]],
    preset: str,
    params: SplitParams,
    out_dir,
    crack_threshold: int = 127,
    workers: int = 1,
) -> DatasetManifest:
    """Pad, split, select crack tiles (TS3) or crack + sampled background
    tiles (TS4), write the chosen tile PNG pairs, and emit the manifest.

    Background sampling is global across all images, per params.seed.
    """
    if preset not in ("TS3", "TS4", "custom"):
        raise ValueError(f"split pipeline does not build preset {preset!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def enumerate_one(pair):
        image_id, _, mask_path = pair
        mask = load_mask(mask_path, crack_threshold)
        padded = pad_to_tile_multiple(None, mask, params.tile_h, params.tile_w)
        return split_training_tiles(padded, params, image_id)

    per_image = _map_ordered(enumerate_one, pairs, workers)
    all_tiles = [t for tiles in per_image for t in tiles]

    chosen = set(select_crack_tiles(all_tiles))
    with_background = preset == "TS4" or (preset == "custom" and params.background_sample > 0)
    if with_background:
        # take every background tile when fewer exist than requested
        available = sum(1 for t in all_tiles if not t.contains_crack)
        n_background = min(params.background_sample, available)
        chosen |= set(sample_background_tiles(all_tiles, n_background, params.seed))

    def emit_one(pair_and_tiles):
        (image_id, image_path, mask_path), tiles = pair_and_tiles
        wanted = [t for t in tiles if t in chosen]
        if not wanted:
            return []
        image = load_image(image_path)
        mask = load_mask(mask_path, crack_threshold)
        padded = pad_to_tile_multiple(image, mask, params.tile_h, params.tile_w)
        tile_dir = out_dir / image_id
        tile_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for rec in wanted:
            rs = slice(rec.row_off, rec.row_off + rec.tile_h)
            cs = slice(rec.col_off, rec.col_off + rec.tile_w)
            stem = tile_basename(rec)
            img_rel = f"{image_id}/{stem}.png"
            msk_rel = f"{image_id}/{stem}_mask.png"
            save_image(RasterImage(padded.image.data[rs, cs]), out_dir / img_rel)
            save_mask(BinaryMask(padded.mask.data[rs, cs]), out_dir / msk_rel)
            entries.append(tile_entry(rec, img_rel, msk_rel))
        return entries

    nested = _map_ordered(emit_one, list(zip(pairs, per_image)), workers)
    entries = [e for group in nested for e in group]

    manifest_params = {
        "tile_h": params.tile_h,
        "tile_w": params.tile_w,
        "stride_r": params.stride_r,
        "stride_c": params.stride_c,
    }
    if with_background:
        manifest_params["background_sample"] = params.background_sample
    manifest = DatasetManifest(
        preset=preset,
        mode="split",
        params=manifest_params,
        entries=entries,
        seed=params.seed,
    )
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
