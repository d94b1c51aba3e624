import csv
import math

import numpy as np
import pytest
import torch

from crackfpn.core_data import read_manifest, save_image, save_mask
from crackfpn.fpn_net import ModelConfig, read_checkpoint
from crackfpn.preprocess import build_resize_set
from crackfpn.synth import pair_rng, synth_pair
from crackfpn.train_engine import (
    EpochRecord,
    TrainConfig,
    TrainHistory,
    batch_iou,
    fit,
    make_optimizer,
    soft_dice_loss,
    train_step,
    training_loss,
)


class TestSoftDiceLoss:
    def test_perfect_match_is_zero(self):
        t = torch.zeros(1, 1, 4, 4)
        t[0, 0, :2, :2] = 1.0
        assert float(soft_dice_loss(t, t, eps=1.0)) == pytest.approx(0.0)

    def test_disjoint_quarter_masks(self):
        # 4 predicted + 4 true pixels, no overlap: 1 - 1/9 with eps=1
        p = torch.zeros(1, 1, 4, 4)
        t = torch.zeros(1, 1, 4, 4)
        p[0, 0, :2, :2] = 1.0
        t[0, 0, 2:, 2:] = 1.0
        assert float(soft_dice_loss(p, t, eps=1.0)) == pytest.approx(1.0 - 1.0 / 9.0)

    def test_both_empty_is_zero(self):
        z = torch.zeros(2, 1, 4, 4)
        assert float(soft_dice_loss(z, z, eps=1.0)) == pytest.approx(0.0)

    def test_batch_is_mean_of_per_sample(self):
        p = torch.zeros(2, 1, 2, 2)
        t = torch.zeros(2, 1, 2, 2)
        p[0] = 1.0
        t[0] = 1.0  # sample 0 perfect, sample 1 empty
        per0 = float(soft_dice_loss(p[:1], t[:1]))
        per1 = float(soft_dice_loss(p[1:], t[1:]))
        both = float(soft_dice_loss(p, t))
        assert both == pytest.approx((per0 + per1) / 2.0)

    def test_symmetry(self):
        rng = torch.Generator().manual_seed(0)
        p = torch.rand(3, 1, 6, 6, generator=rng)
        t = torch.rand(3, 1, 6, 6, generator=rng)
        assert float(soft_dice_loss(p, t)) == pytest.approx(float(soft_dice_loss(t, p)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        p = rng.random((1, 36))
        t = rng.random((1, 36))
        perm = rng.permutation(36)
        a = float(soft_dice_loss(torch.tensor(p), torch.tensor(t)))
        b = float(soft_dice_loss(torch.tensor(p[:, perm]), torch.tensor(t[:, perm])))
        assert a == pytest.approx(b, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-4
        for _ in range(5):
            p = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
            t = (rng.random((1, 1, 8, 8)) < 0.3).astype(np.float64)
            pt = torch.tensor(p, requires_grad=True)
            tt = torch.tensor(t)
            loss = soft_dice_loss(pt, tt)
            loss.backward()
            grad = pt.grad.numpy()
            for idx in [(0, 0, 2, 3), (0, 0, 7, 7), (0, 0, 0, 0)]:
                plus = p.copy()
                minus = p.copy()
                plus[idx] += h
                minus[idx] -= h
                fplus = float(soft_dice_loss(torch.tensor(plus), tt))
                fminus = float(soft_dice_loss(torch.tensor(minus), tt))
                numeric = (fplus - fminus) / (2 * h)
                assert grad[idx] == pytest.approx(numeric, rel=1e-3, abs=1e-8)

    def test_validation(self):
        z = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError):
            soft_dice_loss(z, torch.zeros(1, 1, 2, 3))
        with pytest.raises(ValueError):
            soft_dice_loss(z, z, eps=0.0)


def test_dice_plus_bce_adds_positive_term():
    rng = torch.Generator().manual_seed(2)
    p = torch.rand(2, 1, 4, 4, generator=rng)
    t = (torch.rand(2, 1, 4, 4, generator=rng) < 0.5).float()
    dice_only = training_loss(p, t, TrainConfig(loss="dice", model=ModelConfig.tiny()))
    combo = training_loss(p, t, TrainConfig(loss="dice_plus_bce", model=ModelConfig.tiny()))
    assert float(combo) > float(dice_only)


class TestBatchIoU:
    def test_half_overlap(self):
        p = torch.tensor([[[0, 1, 1, 0]]]).float()
        t = torch.tensor([[[0, 0, 1, 1]]]).float()
        assert float(batch_iou(p, t)[0]) == pytest.approx(1.0 / 3.0)

    def test_both_empty_counts_as_one(self):
        z = torch.zeros(1, 1, 4)
        assert float(batch_iou(z, z)[0]) == 1.0

    def test_per_sample(self):
        p = torch.stack([torch.ones(2, 2), torch.zeros(2, 2)]).unsqueeze(1)
        t = torch.ones(2, 1, 2, 2)
        ious = batch_iou(p, t)
        assert ious.tolist() == [1.0, 0.0]


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.epochs == 40
        assert c.batch_size == 8
        assert c.optimizer == "adaptive_moments"
        assert c.dice_smooth == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(preset="model9")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(loss="focal")
        with pytest.raises(ValueError):
            TrainConfig(crop="random", crop_h=100)

    def test_optimizer_factory(self):
        tiny = ModelConfig.tiny()
        from crackfpn.fpn_net import build_model

        model = build_model(tiny, seed=0)
        adam = make_optimizer(model, TrainConfig(model=tiny))
        sgd = make_optimizer(model, TrainConfig(optimizer="sgd_momentum", model=tiny))
        assert isinstance(adam, torch.optim.Adam)
        assert isinstance(sgd, torch.optim.SGD)


class TestTrainHistory:
    def test_append_enforces_epoch_order(self):
        h = TrainHistory()
        h.append(EpochRecord(0, 0.5, 0.1, 1.0, "0:0"))
        with pytest.raises(ValueError):
            h.append(EpochRecord(0, 0.4, 0.2, 1.0, "0:0"))

    def test_append_rejects_non_finite(self):
        h = TrainHistory()
        with pytest.raises(ValueError):
            h.append(EpochRecord(0, math.nan, 0.1, 1.0, "0:0"))

    def test_csv_layout(self, tmp_path):
        h = TrainHistory()
        h.append(EpochRecord(0, 0.5, 0.1, 1.25, "0:0"))
        h.append(EpochRecord(1, 0.25, 0.4, 1.5, "0:1"))
        h.to_csv(tmp_path / "h.csv")
        with open(tmp_path / "h.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "loss", "train_miou", "seconds"]
        assert rows[1][0] == "0" and float(rows[1][1]) == 0.5
        assert len(rows) == 3


def test_train_step_loss_decreases_on_fixed_batch():
    torch.manual_seed(0)
    from crackfpn.fpn_net import build_model

    config = TrainConfig(learning_rate=1e-3, model=ModelConfig.tiny())
    model = build_model(config.model, seed=0)
    opt = make_optimizer(model, config)
    image, mask = synth_pair(64, 96, pair_rng(0, 0))
    x = torch.from_numpy(image.data.copy()).permute(2, 0, 1).unsqueeze(0).float() / 255.0
    y = torch.from_numpy(mask.data.copy()).unsqueeze(0).unsqueeze(0).float()
    first, probs = train_step(model, opt, x, y, config)
    assert probs.shape == (1, 1, 64, 96)
    last = first
    for _ in range(10):
        last, _ = train_step(model, opt, x, y, config)
    assert last < first


def test_train_step_rejects_unaligned_batch():
    from crackfpn.fpn_net import build_model

    config = TrainConfig(model=ModelConfig.tiny())
    model = build_model(config.model, seed=0)
    opt = make_optimizer(model, config)
    with pytest.raises(ValueError):
        train_step(model, opt, torch.zeros(1, 3, 60, 96), torch.zeros(1, 1, 60, 96), config)


def _resize_manifest(tmp_path, count=4, h=64, w=96):
    image_dir = tmp_path / "images"
    label_dir = tmp_path / "labels"
    image_dir.mkdir()
    label_dir.mkdir()
    pairs = []
    for i in range(count):
        image, mask = synth_pair(h + 16, w + 16, pair_rng(5, i))
        save_image(image, image_dir / f"s{i}.png")
        save_mask(mask, label_dir / f"s{i}.png")
        pairs.append((f"s{i}", image_dir / f"s{i}.png", label_dir / f"s{i}.png"))
    out = tmp_path / "ts"
    build_resize_set(pairs, "custom", (h, w), out)
    return out


class TestFit:
    def make_config(self, **overrides):
        base = dict(
            epochs=2,
            batch_size=2,
            learning_rate=1e-3,
            augment=None,
            seed=4,
            model=ModelConfig.tiny(),
        )
        base.update(overrides)
        return TrainConfig(**base)

    def test_trains_and_writes_artifacts(self, tmp_path):
        ts = _resize_manifest(tmp_path)
        manifest = read_manifest(ts / "manifest.jsonl")
        out = tmp_path / "run"
        ckpt, history = fit(manifest, self.make_config(), manifest_dir=ts, out_dir=out)
        assert len(history) == 2
        assert (out / "model.fpnckpt").is_file()
        assert (out / "history.csv").is_file()
        assert read_checkpoint(out / "model.fpnckpt").config == ModelConfig.tiny()
        assert all(r.train_miou >= 0.0 for r in history.records)

    def test_rerun_is_deterministic(self, tmp_path):
        ts = _resize_manifest(tmp_path)
        manifest = read_manifest(ts / "manifest.jsonl")
        _, h1 = fit(manifest, self.make_config(), manifest_dir=ts)
        _, h2 = fit(manifest, self.make_config(), manifest_dir=ts)
        assert [(r.epoch, r.loss, r.train_miou) for r in h1.records] == \
            [(r.epoch, r.loss, r.train_miou) for r in h2.records]

    def test_augmented_rerun_is_deterministic(self, tmp_path):
        ts = _resize_manifest(tmp_path)
        manifest = read_manifest(ts / "manifest.jsonl")
        from crackfpn.preprocess import AugmentConfig

        config = self.make_config(epochs=1, augment=AugmentConfig())
        _, h1 = fit(manifest, config, manifest_dir=ts)
        _, h2 = fit(manifest, config, manifest_dir=ts)
        assert h1.records[0].loss == h2.records[0].loss

    def test_zero_epochs_gives_initial_checkpoint(self, tmp_path):
        ts = _resize_manifest(tmp_path, count=2)
        manifest = read_manifest(ts / "manifest.jsonl")
        out = tmp_path / "run0"
        ckpt, history = fit(manifest, self.make_config(epochs=0),
                            manifest_dir=ts, out_dir=out)
        assert len(history) == 0
        assert ckpt.step == 0
        assert (out / "model.fpnckpt").is_file()

    def test_preset_mode_mismatch(self, tmp_path):
        ts = _resize_manifest(tmp_path, count=2)
        manifest = read_manifest(ts / "manifest.jsonl")
        with pytest.raises(ValueError):
            fit(manifest, self.make_config(preset="model3"), manifest_dir=ts)

    def test_empty_manifest(self, tmp_path):
        from crackfpn.core_data import DatasetManifest

        manifest = DatasetManifest(
            preset="custom", mode="resize",
            params={"target_h": 64, "target_w": 96}, entries=[],
        )
        with pytest.raises(ValueError):
            fit(manifest, self.make_config(), manifest_dir=tmp_path)

    def test_random_crop_path(self, tmp_path):
        ts = _resize_manifest(tmp_path, count=2, h=96, w=128)
        manifest = read_manifest(ts / "manifest.jsonl")
        config = self.make_config(epochs=1, crop="random", crop_h=64, crop_w=96)
        _, history = fit(manifest, config, manifest_dir=ts)
        assert len(history) == 1

    def test_stop_miou_halts_early(self, tmp_path):
        ts = _resize_manifest(tmp_path, count=2)
        manifest = read_manifest(ts / "manifest.jsonl")
        # threshold 0 is reached immediately: exactly one epoch runs
        config = self.make_config(epochs=10, stop_miou=0.0)
        _, history = fit(manifest, config, manifest_dir=ts)
        assert len(history) == 1
