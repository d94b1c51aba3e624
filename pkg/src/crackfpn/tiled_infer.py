"""Whole-image prediction at native resolution: pad to a tile grid, run the
network per tile, and recombine — with extra junction-centered tiles so grid
seams are covered twice.

Recombination accumulates in float64; when overlapping tiles agree, the mean
equals the tile value bit-for-bit after the final float32 cast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core_data import ProbMask, RasterImage
from .fpn_net.model import CrackFPN
from .preprocess import pad_to_tile_multiple, padded_extent, resize_bilinear

COMBINE_MODES = ("mean", "max")


@dataclass(frozen=True)
class InferencePlan:
    """Tile origins over the padded frame for one image extent.

    ``base`` is the non-overlapping grid; ``junction`` tiles are centered on
    interior grid corners, offset by half a tile in both axes.
    """

    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    tile_h: int
    tile_w: int
    base: tuple[tuple[int, int], ...]
    junction: tuple[tuple[int, int], ...]

    @property
    def tiles(self) -> tuple[tuple[int, int], ...]:
        return self.base + self.junction

    def records(self) -> list[dict]:
        out = []
        for kind, origins in (("base", self.base), ("junction", self.junction)):
            for row_off, col_off in origins:
                out.append(
                    {
                        "kind": kind,
                        "row_off": row_off,
                        "col_off": col_off,
                        "tile_h": self.tile_h,
                        "tile_w": self.tile_w,
                    }
                )
        return out


def plan_tiles(height: int, width: int, tile_h: int = 480, tile_w: int = 640) -> InferencePlan:
    if height < 1 or width < 1:
        raise ValueError(f"image extent must be positive, got {(height, width)}")
    if tile_h % 32 or tile_w % 32:
        raise ValueError(f"tile dims {(tile_h, tile_w)} must be multiples of 32")
    padded_h, padded_w = padded_extent(height, width, tile_h, tile_w)
    rows = padded_h // tile_h
    cols = padded_w // tile_w
    base = tuple(
        (r * tile_h, c * tile_w) for r in range(rows) for c in range(cols)
    )
    junction = tuple(
        (r * tile_h - tile_h // 2, c * tile_w - tile_w // 2)
        for r in range(1, rows)
        for c in range(1, cols)
    )
    return InferencePlan(
        orig_h=height,
        orig_w=width,
        padded_h=padded_h,
        padded_w=padded_w,
        tile_h=tile_h,
        tile_w=tile_w,
        base=base,
        junction=junction,
    )


def coverage_counts(plan: InferencePlan) -> np.ndarray:
    """How many tiles touch each pixel of the padded frame."""
    counts = np.zeros((plan.padded_h, plan.padded_w), dtype=np.int32)
    for row_off, col_off in plan.tiles:
        counts[row_off : row_off + plan.tile_h, col_off : col_off + plan.tile_w] += 1
    return counts


def model_predictor(model: CrackFPN, batch_size_hint: int | None = None):
    """Wrap a network as a numpy batch-in / probability-out callable."""
    del batch_size_hint  # callers batch; kept for signature stability

    def predict(batch: np.ndarray) -> np.ndarray:
        if batch.ndim != 4 or batch.shape[3] != 3:
            raise ValueError(f"expected (N, H, W, 3) uint8 batch, got {batch.shape}")
        # copy: the batch may view read-only image data
        x = torch.from_numpy(np.array(batch)).permute(0, 3, 1, 2)
        x = x.float() / 255.0
        model.eval()
        with torch.no_grad():
            probs = model(x)
        return probs.squeeze(1).numpy().astype(np.float32)

    return predict


def _check_tile_output(probs: np.ndarray, n: int, tile_h: int, tile_w: int) -> None:
    if probs.shape != (n, tile_h, tile_w):
        raise ValueError(
            f"predictor returned {probs.shape}, expected {(n, tile_h, tile_w)}"
        )


def predict_tiled(
    image: RasterImage,
    predictor,
    tile_h: int = 480,
    tile_w: int = 640,
    *,
    combine: str = "mean",
    batch_size: int = 4,
    plan: InferencePlan | None = None,
) -> ProbMask:
    """Predict a full-resolution probability mask by running the predictor on
    every planned tile and recombining overlaps.

    predictor: callable mapping a (N, tile_h, tile_w, 3) uint8 batch to
    (N, tile_h, tile_w) float probabilities (see model_predictor).
    """
    if combine not in COMBINE_MODES:
        raise ValueError(f"combine must be one of {COMBINE_MODES}, got {combine!r}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if plan is None:
        plan = plan_tiles(image.height, image.width, tile_h, tile_w)
    elif (plan.orig_h, plan.orig_w) != (image.height, image.width):
        raise ValueError(
            f"plan was built for {(plan.orig_h, plan.orig_w)}, "
            f"image is {(image.height, image.width)}"
        )
    padded = pad_to_tile_multiple(image, None, plan.tile_h, plan.tile_w).image.data
    accum = np.zeros((plan.padded_h, plan.padded_w), dtype=np.float64)
    counts = np.zeros((plan.padded_h, plan.padded_w), dtype=np.int32)

    origins = plan.tiles
    for b0 in range(0, len(origins), batch_size):
        chunk = origins[b0 : b0 + batch_size]
        batch = np.stack(
            [padded[r : r + plan.tile_h, c : c + plan.tile_w] for r, c in chunk]
        )
        probs = np.asarray(predictor(batch), dtype=np.float64)
        _check_tile_output(probs, len(chunk), plan.tile_h, plan.tile_w)
        for tile_probs, (r, c) in zip(probs, chunk):
            window = (slice(r, r + plan.tile_h), slice(c, c + plan.tile_w))
            if combine == "mean":
                accum[window] += tile_probs
            else:
                np.maximum(accum[window], tile_probs, out=accum[window])
            counts[window] += 1
    if counts.min() < 1:
        raise RuntimeError("tile plan left pixels uncovered")
    field = accum / counts if combine == "mean" else accum
    field = field[: plan.orig_h, : plan.orig_w]
    return ProbMask(np.clip(field, 0.0, 1.0).astype(np.float32))


def predict_resize_back(
    image: RasterImage, predictor, target_h: int, target_w: int
) -> ProbMask:
    """Downscale, predict once, and resize the probability field back to the
    source dims. Counterpart of the resized training sets."""
    if target_h % 32 or target_w % 32:
        raise ValueError(f"target dims {(target_h, target_w)} must be multiples of 32")
    resized = resize_bilinear(image, target_h, target_w)
    probs = np.asarray(predictor(resized.data[None]), dtype=np.float32)
    _check_tile_output(probs, 1, target_h, target_w)
    small = ProbMask(np.clip(probs[0], 0.0, 1.0))
    return resize_bilinear(small, image.height, image.width)
