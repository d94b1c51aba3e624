"""Synthetic crack imagery: textured concrete-like backgrounds with dark
polyline cracks and pixel-exact masks. Stands in for unavailable survey
photos so the whole pipeline can run and be tested at desk scale.

Every pair is generated from a (seed, index) stream, so a dataset is
byte-reproducible regardless of how many images are requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core_data import BinaryMask, RasterImage, save_image, save_mask


@dataclass(frozen=True)
class SynthConfig:
    height: int = 960
    width: int = 1280
    count: int = 10
    seed: int = 0
    crack_prob: float = 1.0
    max_cracks: int = 3

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("synthetic images must be at least 32x32")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0.0 <= self.crack_prob <= 1.0:
            raise ValueError("crack_prob must be in [0, 1]")
        if self.max_cracks < 1:
            raise ValueError("max_cracks must be >= 1")


def _texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Bright concrete-ish background: low-frequency blotches + grain."""
    base = rng.uniform(140.0, 200.0)
    coarse = rng.normal(0.0, 12.0, size=(max(2, height // 16), max(2, width // 16)))
    blotch = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_LINEAR)
    grain = rng.normal(0.0, 6.0, size=(height, width))
    tint = rng.uniform(-6.0, 6.0, size=3)
    field = (base + blotch + grain)[..., None] + tint[None, None, :]
    return np.clip(field, 0.0, 255.0).astype(np.uint8)


def _crack_points(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """A jittered random-walk polyline in (x, y) pixel coordinates."""
    x = rng.uniform(width * 0.1, width * 0.9)
    y = rng.uniform(height * 0.1, height * 0.9)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    steps = int(rng.integers(4, 9))
    scale = min(height, width)
    points = [(x, y)]
    for _ in range(steps):
        heading += rng.normal(0.0, 0.45)
        length = scale * rng.uniform(0.12, 0.25)
        x = float(np.clip(x + math.cos(heading) * length, 0, width - 1))
        y = float(np.clip(y + math.sin(heading) * length, 0, height - 1))
        points.append((x, y))
    return np.round(np.asarray(points)).astype(np.int32)


def synth_pair(height: int, width: int, rng: np.random.Generator,
               crack_prob: float = 1.0,
               max_cracks: int = 3) -> tuple[RasterImage, BinaryMask]:
    """One background plus zero or more cracks; image and mask are drawn
    with the same polylines and thickness, so the mask is exact."""
    image = _texture(height, width, rng)
    mask = np.zeros((height, width), dtype=np.uint8)
    n_cracks = 0
    if rng.random() < crack_prob:
        n_cracks = int(rng.integers(1, max_cracks + 1))
    for _ in range(n_cracks):
        points = _crack_points(height, width, rng)
        thickness = int(rng.integers(2, 6))
        shade = int(rng.integers(15, 60))
        cv2.polylines(image, [points], False, (shade, shade, shade),
                      thickness, cv2.LINE_8)
        cv2.polylines(mask, [points], False, 1, thickness, cv2.LINE_8)
    return RasterImage(image), BinaryMask(mask)


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def build_synth_set(out_dir, config: SynthConfig) -> list[str]:
    """Write images/<id>.png and labels/<id>.png pairs; returns the ids."""
    out_path = Path(out_dir)
    image_dir = out_path / "images"
    label_dir = out_path / "labels"
    image_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for index in range(config.count):
        image_id = f"syn_{index:04d}"
        image, mask = synth_pair(
            config.height,
            config.width,
            pair_rng(config.seed, index),
            crack_prob=config.crack_prob,
            max_cracks=config.max_cracks,
        )
        save_image(image, image_dir / f"{image_id}.png")
        save_mask(mask, label_dir / f"{image_id}.png")
        ids.append(image_id)
    return ids
