"""Domain types and raster/manifest I/O shared by the whole pipeline.

Masks are single-channel grids with 1 marking crack pixels and 0 background.
On disk they are 8-bit PNGs with crack stored as 255 so they can be eyeballed
next to the photos. Dataset manifests are JSON-Lines: one header record
followed by one record per sample or tile, in order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PRESETS = ("TS1", "TS2", "TS3", "TS4", "custom")

# preset -> required (target_h, target_w) of the resize pipelines
RESIZE_PRESET_TARGETS = {"TS1": (1600, 2400), "TS2": (2112, 3168)}

RESIZE_ENTRY_KEYS = ("image_id", "height", "width", "image", "mask")
SPLIT_ENTRY_KEYS = (
    "image_id",
    "row_off",
    "col_off",
    "tile_h",
    "tile_w",
    "contains_crack",
    "touches_padding",
    "image",
    "mask",
)


class ManifestError(ValueError):
    """Malformed or internally inconsistent dataset manifest."""


@dataclass(frozen=True)
class RasterImage:
    """An RGB photo as a read-only (H, W, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"empty extent {arr.shape[:2]}")
        if arr.dtype != np.uint8:
            raise ValueError(f"expected uint8 data, got {arr.dtype}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class BinaryMask:
    """A {0, 1} label or prediction grid as a read-only (H, W) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        if arr.ndim != 2:
            raise ValueError(f"expected (H, W) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"empty extent {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError(f"expected uint8 or bool data, got {arr.dtype}")
        if arr.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def crack_pixels(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ProbMask:
    """Per-pixel crack probabilities in [0, 1], stored float32."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"expected (H, W) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"empty extent {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            raise ValueError(f"expected float data, got {arr.dtype}")
        arr = arr.astype(np.float32, copy=False)
        if not np.isfinite(arr).all():
            raise ValueError("probabilities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TileRecord:
    """Provenance of one sub-image window in a padded frame."""

    image_id: str
    row_off: int
    col_off: int
    tile_h: int
    tile_w: int
    contains_crack: bool
    touches_padding: bool

    def __post_init__(self):
        if self.row_off < 0 or self.col_off < 0:
            raise ValueError("tile offsets must be non-negative")
        if self.tile_h < 1 or self.tile_w < 1:
            raise ValueError("tile dims must be positive")


def check_pair(image: RasterImage, mask: BinaryMask | ProbMask) -> None:
    """Raise if a photo and its mask do not share the same extent."""
    if (image.height, image.width) != (mask.height, mask.width):
        raise ValueError(
            f"image extent {(image.height, image.width)} != "
            f"mask extent {(mask.height, mask.width)}"
        )


@dataclass(frozen=True)
class DatasetManifest:
    """An assembled training set: preset, pipeline params, ordered entries.

    Preset invariants are enforced here, at construction, so a manifest that
    exists is a manifest that is usable.
    """

    preset: str
    mode: str
    params: dict
    entries: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ManifestError(f"unknown preset {self.preset!r}")
        if self.mode not in ("resize", "split"):
            raise ManifestError(f"unknown mode {self.mode!r}")
        if self.preset in RESIZE_PRESET_TARGETS:
            if self.mode != "resize":
                raise ManifestError(f"{self.preset} requires mode 'resize'")
            want = RESIZE_PRESET_TARGETS[self.preset]
            got = (self.params.get("target_h"), self.params.get("target_w"))
            if got != want:
                raise ManifestError(f"{self.preset} requires target {want}, got {got}")
        if self.preset in ("TS3", "TS4") and self.mode != "split":
            raise ManifestError(f"{self.preset} requires mode 'split'")
        if self.mode == "resize":
            need = {"target_h", "target_w"}
        else:
            need = {"tile_h", "tile_w", "stride_r", "stride_c"}
        missing = need - self.params.keys()
        if missing:
            raise ManifestError(f"params missing {sorted(missing)} for mode {self.mode!r}")
        if self.preset == "TS4" and "background_sample" not in self.params:
            raise ManifestError("TS4 requires params['background_sample']")
        entry_keys = RESIZE_ENTRY_KEYS if self.mode == "resize" else SPLIT_ENTRY_KEYS
        for i, entry in enumerate(self.entries):
            missing = set(entry_keys) - entry.keys()
            if missing:
                raise ManifestError(f"entry {i} missing keys {sorted(missing)}")
        if self.preset == "TS3" and any(not e["contains_crack"] for e in self.entries):
            raise ManifestError("TS3 admits crack tiles only")

    def __len__(self) -> int:
        return len(self.entries)


def tile_entry(record: TileRecord, image_rel: str, mask_rel: str) -> dict:
    """Manifest entry for one tile: record fields plus relative file paths."""
    entry = asdict(record)
    entry["image"] = image_rel
    entry["mask"] = mask_rel
    return entry


def record_from_entry(entry: dict) -> TileRecord:
    return TileRecord(
        image_id=entry["image_id"],
        row_off=entry["row_off"],
        col_off=entry["col_off"],
        tile_h=entry["tile_h"],
        tile_w=entry["tile_w"],
        contains_crack=bool(entry["contains_crack"]),
        touches_padding=bool(entry["touches_padding"]),
    )


def load_image(path) -> RasterImage:
    """Decode a PNG/JPEG photo; the file must be a 3-channel RGB raster."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode != "RGB":
                raise ValueError(f"{path}: expected RGB image, got mode {mode!r}")
            data = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise ValueError(f"{path}: cannot decode image ({exc})") from exc
    return RasterImage(data)


def load_mask(path, crack_threshold: int = 127) -> BinaryMask:
    """Decode a grayscale label file; pixels above crack_threshold become 1.

    The 127 default tolerates antialiased label edges while keeping strictly
    {0, 255} labels unchanged.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise ValueError(
                    f"{path}: expected single-channel grayscale mask, got mode {im.mode!r}"
                )
            gray = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise ValueError(f"{path}: cannot decode mask ({exc})") from exc
    return BinaryMask((gray > crack_threshold).astype(np.uint8))


def save_mask(mask: BinaryMask | ProbMask, path) -> None:
    """Write a mask as an 8-bit PNG: {0, 255} for binary, round(p*255) for probs."""
    if isinstance(mask, BinaryMask):
        payload = mask.data * np.uint8(255)
    elif isinstance(mask, ProbMask):
        # round half up so p = 0.5 -> 128
        payload = np.floor(mask.data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    else:
        raise TypeError(f"expected BinaryMask or ProbMask, got {type(mask).__name__}")
    Image.fromarray(payload, mode="L").save(Path(path), format="PNG")


def save_image(image: RasterImage, path) -> None:
    Image.fromarray(image.data, mode="RGB").save(Path(path), format="PNG")


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Serialize to JSON-Lines: a header record, then one record per entry."""
    header = {
        "preset": manifest.preset,
        "mode": manifest.mode,
        "params": manifest.params,
        "seed": manifest.seed,
        "count": len(manifest.entries),
    }
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in manifest.entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    header, entries = records[0], records[1:]
    for key in ("preset", "mode", "params", "seed", "count"):
        if key not in header:
            raise ManifestError(f"{path}: header missing {key!r}")
    if header["count"] != len(entries):
        raise ManifestError(
            f"{path}: header count {header['count']} != {len(entries)} entries"
        )
    return DatasetManifest(
        preset=header["preset"],
        mode=header["mode"],
        params=header["params"],
        entries=entries,
        seed=header["seed"],
    )
