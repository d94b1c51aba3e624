"""Soft-Dice training: loss functions, the seeded step/epoch loop over
TS1..TS4 manifests, and experiment presets model1..model4.

Determinism contract: batch order depends only on (seed, epoch) and each
sample's augmentation stream only on (seed, epoch, index), so reruns with
the same config produce identical loss sequences.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core_data import DatasetManifest, load_image, load_mask
from .fpn_net.checkpoint import VERSION, Checkpoint, write_checkpoint
from .fpn_net.model import CrackFPN, ModelConfig
from .preprocess import AugmentConfig, augment

TRAIN_PRESETS = ("model1", "model2", "model3", "model4", "custom")

# model1/2 consume resized sets, model3/4 consume split sets
PRESET_MODES = {"model1": "resize", "model2": "resize", "model3": "split", "model4": "split"}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and data-handling knobs for one training run."""

    preset: str = "custom"
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "adaptive_moments"
    loss: str = "dice"
    dice_smooth: float = 1.0
    crop: str = "none"
    crop_h: int = 480
    crop_w: int = 640
    augment: AugmentConfig | None = AugmentConfig()
    seed: int = 0
    oversample_crack: bool = False
    stop_miou: float | None = None
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.preset not in TRAIN_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if self.optimizer not in ("adaptive_moments", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("dice", "dice_plus_bce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.crop not in ("none", "random"):
            raise ValueError(f"unknown crop mode {self.crop!r}")
        if self.crop == "random" and (self.crop_h % 32 or self.crop_w % 32):
            raise ValueError("crop dims must be multiples of 32")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_miou: float
    seconds: float
    rng_key: str


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        for value in (record.loss, record.train_miou, record.seconds):
            if not math.isfinite(value):
                raise ValueError(f"non-finite history value in epoch {record.epoch}")
        self.records.append(record)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "train_miou", "seconds"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, f"{r.loss:.8f}", f"{r.train_miou:.8f}", f"{r.seconds:.3f}"]
                )

    def __len__(self) -> int:
        return len(self.records)


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor,
                   eps: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), per sample, then
    averaged over the batch. Differentiable in pred; eps keeps the all-empty
    case defined (loss 0)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    intersection = (p * t).sum(dim=1)
    denom = p.sum(dim=1) + t.sum(dim=1)
    dice = (2.0 * intersection + eps) / (denom + eps)
    return (1.0 - dice).mean()


def training_loss(pred: torch.Tensor, target: torch.Tensor,
                  config: TrainConfig) -> torch.Tensor:
    loss = soft_dice_loss(pred, target, config.dice_smooth)
    if config.loss == "dice_plus_bce":
        clamped = pred.clamp(1e-7, 1.0 - 1e-7)
        loss = loss + torch.nn.functional.binary_cross_entropy(clamped, target)
    return loss


def batch_iou(pred_bin: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample IoU of binarized predictions; both-empty counts as 1."""
    p = pred_bin.reshape(pred_bin.shape[0], -1) > 0.5
    t = target.reshape(target.shape[0], -1) > 0.5
    intersection = (p & t).sum(dim=1).double()
    union = (p | t).sum(dim=1).double()
    return torch.where(union > 0, intersection / union.clamp(min=1.0),
                       torch.ones_like(intersection))


def make_optimizer(model: CrackFPN, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adaptive_moments":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=0.9)


def train_step(model: CrackFPN, optimizer: torch.optim.Optimizer,
               images: torch.Tensor, masks: torch.Tensor,
               config: TrainConfig) -> tuple[float, torch.Tensor]:
    """One forward/loss/backward/step; returns (loss, detached probabilities)."""
    if images.shape[2] % 32 or images.shape[3] % 32:
        raise ValueError(f"batch dims {tuple(images.shape[2:])} must be multiples of 32")
    optimizer.zero_grad(set_to_none=True)
    probs = model(images)
    loss = training_loss(probs, masks, config)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {loss.item()} (prob range "
            f"[{probs.min().item():.3g}, {probs.max().item():.3g}])"
        )
    loss.backward()
    optimizer.step()
    return float(loss.detach()), probs.detach()


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, index, 1)))


def _load_sample(manifest_dir: Path, entry: dict, config: TrainConfig, mode: str,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    image = load_image(manifest_dir / entry["image"])
    mask = load_mask(manifest_dir / entry["mask"])
    if mode == "resize" and config.crop == "random":
        h, w = image.height, image.width
        if h < config.crop_h or w < config.crop_w:
            raise ValueError(f"image {entry['image_id']} smaller than the crop window")
        r0 = int(rng.integers(0, h - config.crop_h + 1))
        c0 = int(rng.integers(0, w - config.crop_w + 1))
        from .core_data import BinaryMask, RasterImage  # local to avoid cycle noise

        image = RasterImage(image.data[r0 : r0 + config.crop_h, c0 : c0 + config.crop_w])
        mask = BinaryMask(mask.data[r0 : r0 + config.crop_h, c0 : c0 + config.crop_w])
    if config.augment is not None:
        image, mask = augment(image, mask, config.augment, rng)
    return image.data, mask.data


def _epoch_indices(n_entries: int, entries: list, config: TrainConfig,
                   epoch: int) -> np.ndarray:
    indices = np.arange(n_entries)
    if config.oversample_crack:
        crack = [i for i, e in enumerate(entries) if e.get("contains_crack")]
        background = n_entries - len(crack)
        if crack and background > len(crack):
            reps = background // len(crack) - 1
            indices = np.concatenate([indices] + [np.array(crack)] * reps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
    return shuffle_rng.permutation(indices)


def fit(manifest: DatasetManifest, config: TrainConfig, *, manifest_dir,
        out_dir=None) -> tuple[Checkpoint, TrainHistory]:
    """Train over shuffled epochs with on-the-fly augmentation; keeps the
    best-loss weights. Writes model.fpnckpt and history.csv under out_dir
    when given."""
    if not manifest.entries:
        raise ValueError("empty manifest")
    want_mode = PRESET_MODES.get(config.preset)
    if want_mode is not None and manifest.mode != want_mode:
        raise ValueError(
            f"preset {config.preset!r} needs a {want_mode} manifest, "
            f"got mode {manifest.mode!r} ({manifest.preset})"
        )
    manifest_dir = Path(manifest_dir)
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model = CrackFPN(config.model)
    optimizer = make_optimizer(model, config)
    history = TrainHistory()

    def snapshot(step: int) -> Checkpoint:
        params = {
            name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in model.state_dict().items()
        }
        return Checkpoint(
            version=VERSION,
            config=config.model,
            params=params,
            step=step,
            rng_state=torch.get_rng_state().numpy().tobytes(),
        )

    best = snapshot(step=0)
    best_loss = math.inf
    step = 0
    entries = manifest.entries
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = _epoch_indices(len(entries), entries, config, epoch)
        loss_sum = 0.0
        iou_sum = 0.0
        n_seen = 0
        model.train()
        for b0 in range(0, len(order), config.batch_size):
            batch_idx = order[b0 : b0 + config.batch_size]
            images = []
            masks = []
            for j, idx in enumerate(batch_idx):
                rng = _sample_rng(config.seed, epoch, int(b0 + j))
                img, msk = _load_sample(manifest_dir, entries[idx], config,
                                        manifest.mode, rng)
                images.append(img)
                masks.append(msk)
            try:
                image_batch = np.stack(images)
                mask_batch = np.stack(masks)
            except ValueError as exc:
                raise ValueError(
                    "cannot batch mixed tile sizes; rebuild the manifest with "
                    "uniform tiles or use crop=random"
                ) from exc
            x = torch.from_numpy(image_batch).permute(0, 3, 1, 2).float() / 255.0
            y = torch.from_numpy(mask_batch).unsqueeze(1).float()
            loss, probs = train_step(model, optimizer, x, y, config)
            step += 1
            bsz = len(batch_idx)
            loss_sum += loss * bsz
            iou_sum += float(batch_iou(probs > config.model.threshold, y).sum())
            n_seen += bsz
        epoch_loss = loss_sum / n_seen
        epoch_miou = iou_sum / n_seen
        history.append(
            EpochRecord(
                epoch=epoch,
                loss=epoch_loss,
                train_miou=epoch_miou,
                seconds=time.perf_counter() - started,
                rng_key=f"{config.seed}:{epoch}",
            )
        )
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = snapshot(step)
        if config.stop_miou is not None and epoch_miou >= config.stop_miou:
            break

    if out_path is not None:
        write_checkpoint(out_path / "model.fpnckpt", best)
        history.to_csv(out_path / "history.csv")
    return best, history
