import numpy as np
import pytest

from crackfpn.core_data import BinaryMask, RasterImage


@pytest.fixture
def make_image():
    def make(h: int, w: int, seed: int = 0) -> RasterImage:
        rng = np.random.default_rng(seed)
        return RasterImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))

    return make


@pytest.fixture
def make_mask():
    def make(h: int, w: int, seed: int = 0, density: float = 0.2) -> BinaryMask:
        rng = np.random.default_rng(seed)
        return BinaryMask((rng.random((h, w)) < density).astype(np.uint8))

    return make
