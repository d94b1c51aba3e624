"""End-to-end acceptance gates for the crack segmentation pipeline.

Each test prints one PASS/FAIL line; run `pytest tests/test_acceptance.py -s`
to see them.  Every expected value is either pinned survey-scale geometry or
checked against an independent brute-force oracle computed in this file.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from crackfpn.cli import main as cli_main
from crackfpn.core_data import BinaryMask, ProbMask, RasterImage, read_manifest, save_image, save_mask
from crackfpn.eval_post import PostprocessParams, dice_loss_metric, dilate_threshold_extend, iou
from crackfpn.fpn_net import ModelConfig, binarize, build_model
from crackfpn.preprocess import (
    SplitParams,
    build_resize_set,
    pad_to_tile_multiple,
    split_training_tiles,
)
from crackfpn.synth import pair_rng, synth_pair
from crackfpn.tiled_infer import plan_tiles, predict_tiled
from crackfpn.train_engine import TrainConfig, fit, make_optimizer, soft_dice_loss, train_step


@contextmanager
def gate(name):
    try:
        yield
    except BaseException:
        print(f"FAIL  {name}")
        raise
    else:
        print(f"PASS  {name}")


def test_01_padding_fidelity():
    with gate("1. padding fidelity (3264x4928 -> 3360x5120, 3864x5152 -> 4320x5760)"):
        rng = np.random.default_rng(0)
        for (h, w), (ph, pw) in [((3264, 4928), (3360, 5120)),
                                 ((3864, 5152), (4320, 5760))]:
            mask = BinaryMask((rng.random((h, w)) < 0.01).astype(np.uint8))
            padded = pad_to_tile_multiple(None, mask, 480, 640)
            assert padded.mask.data.shape == (ph, pw)
            np.testing.assert_array_equal(padded.mask.data[:h, :w], mask.data)
            assert padded.mask.data[h:, :].sum() == 0
            assert padded.mask.data[:, w:].sum() == 0


def oracle_stride_origins(extent, tile, stride):
    """Walk origins forward; clamp a last window to the far edge if needed."""
    origins, pos = [], 0
    while pos + tile <= extent:
        origins.append(pos)
        pos += stride
    if origins[-1] + tile < extent:
        origins.append(extent - tile)
    return origins


def test_02_tile_count_oracle():
    with gate("2. tile counts (training 150/221, inference 98/145)"):
        params = SplitParams(tile_h=480, tile_w=640, stride_r=320, stride_c=320,
                             background_sample=0, seed=0)
        for (h, w), want in [((3360, 5120), 150), ((4320, 5760), 221)]:
            mask = BinaryMask(np.zeros((h, w), dtype=np.uint8))
            pair = pad_to_tile_multiple(None, mask, 480, 640)
            tiles = split_training_tiles(pair, params, "probe")
            oracle = (len(oracle_stride_origins(h, 480, 320))
                      * len(oracle_stride_origins(w, 640, 320)))
            assert len(tiles) == want == oracle

        for (h, w), (want_base, want_junction) in [((3264, 4928), (56, 42)),
                                                   ((3864, 5152), (81, 64))]:
            plan = plan_tiles(h, w, 480, 640)
            rows = -(-h // 480)
            cols = -(-w // 640)
            assert len(plan.base) == want_base == rows * cols
            assert len(plan.junction) == want_junction == (rows - 1) * (cols - 1)
            assert len(plan.tiles) == want_base + want_junction


def test_03_tiling_round_trip():
    with gate("3. identity model round-trips bit-exactly through tiled inference"):
        rng = np.random.default_rng(1)

        def identity(batch):
            return batch[..., 0].astype(np.float32) / 255.0

        sizes = [(96, 128), (192, 256)] + [
            (int(rng.integers(50, 400)), int(rng.integers(50, 400)))
            for _ in range(18)
        ]
        for h, w in sizes:
            image = RasterImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
            out = predict_tiled(image, identity, 96, 128, combine="mean")
            np.testing.assert_array_equal(
                out.data, image.data[..., 0].astype(np.float32) / 255.0
            )


def test_04_fpn_shape_contract():
    with gate("4. full-preset pyramid shapes on (2,3,480,640)"):
        model = build_model(ModelConfig(), seed=0)
        model.eval()
        x = torch.rand(2, 3, 480, 640)
        with torch.no_grad():
            f = model.features(x)
            out = model.assemble_and_head((f.p2, f.p3, f.p4, f.p5), (480, 640))
        assert tuple(f.c2.shape) == (2, 256, 120, 160)
        assert tuple(f.c3.shape) == (2, 512, 60, 80)
        assert tuple(f.c4.shape) == (2, 1024, 30, 40)
        assert tuple(f.c5.shape) == (2, 2048, 15, 20)
        for i, p in enumerate((f.p2, f.p3, f.p4, f.p5)):
            assert p.shape[1] == 256
            assert tuple(p.shape[2:]) == (120 >> i, 160 >> i)
        for h in (f.h2, f.h3, f.h4, f.h5):
            assert tuple(h.shape) == (2, 256, 120, 160)
        assert tuple(out.shape) == (2, 1, 480, 640)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_05_dice_gradient_check():
    with gate("5. soft Dice gradient matches central differences (rel err <= 1e-3)"):
        rng = np.random.default_rng(2)
        h = 1e-4
        for _ in range(50):
            p = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
            t = (rng.random((1, 1, 8, 8)) < 0.3).astype(np.float64)
            pt = torch.tensor(p, requires_grad=True)
            tt = torch.tensor(t)
            soft_dice_loss(pt, tt).backward()
            grad = pt.grad.numpy()
            for i in range(8):
                for j in range(8):
                    plus, minus = p.copy(), p.copy()
                    plus[0, 0, i, j] += h
                    minus[0, 0, i, j] -= h
                    numeric = (
                        float(soft_dice_loss(torch.tensor(plus), tt))
                        - float(soft_dice_loss(torch.tensor(minus), tt))
                    ) / (2 * h)
                    assert abs(grad[0, 0, i, j] - numeric) <= \
                        1e-3 * abs(numeric) + 1e-7


def test_06_metric_oracles():
    with gate("6. IoU/Dice match brute-force counting on 1000 pairs; identity <= 1e-12"):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            p = (rng.random((16, 16)) < 0.3).astype(np.uint8)
            t = (rng.random((16, 16)) < 0.3).astype(np.uint8)
            inter = union = 0
            for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
                inter += 1 if (a and b) else 0
                union += 1 if (a or b) else 0
            total = int(p.sum()) + int(t.sum())
            pm, tm = BinaryMask(p), BinaryMask(t)
            j = iou(pm, tm)
            d = dice_loss_metric(pm, tm)
            assert j == (inter / union if union else 1.0)
            assert d == (1.0 - 2.0 * inter / total if total else 0.0)
            if union:
                assert abs((1.0 - d) - 2.0 * j / (1.0 + j)) <= 1e-12


def test_07_threshold_semantics():
    with gate("7. probability 0.5 is background; binarize monotone in threshold"):
        half = ProbMask(np.full((8, 8), 0.5, dtype=np.float32))
        assert binarize(half, 0.5).data.sum() == 0
        rng = np.random.default_rng(4)
        for _ in range(100):
            prob = ProbMask(rng.random((16, 16)).astype(np.float32))
            lo, hi = sorted(rng.uniform(0.0, 1.0, size=2).tolist())
            loose = binarize(prob, lo).data
            strict = binarize(prob, hi).data
            assert (strict <= loose).all()


def _write_synth_tiles(root, count, height, width, seed):
    image_dir = root / "images"
    label_dir = root / "labels"
    image_dir.mkdir(parents=True)
    label_dir.mkdir(parents=True)
    pairs = []
    for i in range(count):
        image, mask = synth_pair(height, width, pair_rng(seed, i))
        save_image(image, image_dir / f"syn_{i:04d}.png")
        save_mask(mask, label_dir / f"syn_{i:04d}.png")
        pairs.append((f"syn_{i:04d}", image_dir / f"syn_{i:04d}.png",
                      label_dir / f"syn_{i:04d}.png"))
    return pairs


def test_08_desk_scale_learning(tmp_path):
    with gate("8. tiny FPN reaches train mIoU >= 0.5 on 200 synthetic tiles; "
              "single-tile overfit loss < 0.1"):
        pairs = _write_synth_tiles(tmp_path / "data", 200, 160, 224, seed=42)
        ts = tmp_path / "ts"
        build_resize_set(pairs, "custom", (160, 224), ts)
        manifest = read_manifest(ts / "manifest.jsonl")
        config = TrainConfig(
            epochs=40, batch_size=8, learning_rate=1e-3, augment=None,
            seed=42, stop_miou=0.5, model=ModelConfig.tiny(),
        )
        start = time.monotonic()
        _, history = fit(manifest, config, manifest_dir=ts)
        elapsed = time.monotonic() - start
        best = max(r.train_miou for r in history.records)
        assert best >= 0.5, f"best train mIoU {best:.4f} after {len(history)} epochs"
        assert elapsed <= 600.0, f"training took {elapsed:.0f}s"

        torch.manual_seed(7)
        config = TrainConfig(learning_rate=1e-3, model=ModelConfig.tiny(), seed=7)
        model = build_model(config.model, seed=7)
        optimizer = make_optimizer(model, config)
        image, mask = synth_pair(160, 224, pair_rng(7, 0))
        x = torch.from_numpy(image.data.copy()).permute(2, 0, 1).unsqueeze(0).float() / 255.0
        y = torch.from_numpy(mask.data.copy()).unsqueeze(0).unsqueeze(0).float()
        best_loss = float("inf")
        for _ in range(200):
            loss, _ = train_step(model, optimizer, x, y, config)
            best_loss = min(best_loss, loss)
            if best_loss < 0.1:
                break
        assert best_loss < 0.1, f"single-tile loss only reached {best_loss:.4f}"


def _pipeline_run(root, seed):
    data = root / "data"
    ts = root / "ts"
    model = root / "model"
    pred = root / "pred"
    scores = root / "scores"

    def run(*argv):
        code = cli_main([str(a) for a in argv])
        assert code == 0, f"{argv[0]} exited {code}"

    run("synthesize", "--out", data, "--count", 3, "--size", "96x128",
        "--seed", seed)
    run("preprocess", "--images", data / "images", "--labels", data / "labels",
        "--out", ts, "--preset", "custom", "--mode", "resize",
        "--target", "64x96", "--seed", seed)
    run("train", "--manifest", ts / "manifest.jsonl", "--out", model,
        "--encoder", "tiny", "--epochs", 2, "--batch-size", 2,
        "--learning-rate", "1e-3", "--seed", seed)
    for i in range(3):
        run("predict", "--checkpoint", model / "model.fpnckpt",
            "--image", data / "images" / f"syn_{i:04d}.png", "--out", pred,
            "--tile-h", 64, "--tile-w", 96, "--seed", seed)
    run("evaluate", "--pred", pred / "mask", "--labels", data / "labels",
        "--out", scores, "--seed", seed)
    return scores / "metrics.csv", model / "model.fpnckpt"


def test_09_pipeline_determinism(tmp_path):
    with gate("9. same-seed pipeline reruns produce byte-identical metrics.csv"):
        metrics_a, ckpt_a = _pipeline_run(tmp_path / "a", 11)
        metrics_b, ckpt_b = _pipeline_run(tmp_path / "b", 11)
        assert metrics_a.read_bytes() == metrics_b.read_bytes()
        assert ckpt_a.read_bytes() == ckpt_b.read_bytes()


def test_10_postprocess_monotonicity():
    with gate("10. mask extension is a superset; iterations=0 is the identity"):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pred = BinaryMask((rng.random((24, 24)) < 0.08).astype(np.uint8))
            photo = RasterImage(rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8))
            params = PostprocessParams(
                enabled=True,
                kernel=int(rng.choice([3, 5])),
                iterations=int(rng.integers(1, 4)),
                intensity_threshold=int(rng.integers(0, 256)),
            )
            out = dilate_threshold_extend(pred, photo, params)
            assert (out.data >= pred.data).all()
            frozen = dilate_threshold_extend(
                pred, photo, PostprocessParams(enabled=True, iterations=0)
            )
            np.testing.assert_array_equal(frozen.data, pred.data)
