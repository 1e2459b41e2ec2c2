"""Smoke test for the trus_seg extension module.

Build first:
    cargo build --release -p trus-seg-py --features extension-module
    cp target/release/libtrus_seg.so python/trus_seg.so
then run:
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import trus_seg


def test_metrics():
    dims = (2, 3, 3)
    a = np.zeros(dims, dtype=np.uint8)
    a[0, 1, 1] = 1
    b = a.copy()
    assert trus_seg.dice(a.ravel().tolist(), b.ravel().tolist(), dims) == 1.0
    b[1, 1, 1] = 1
    assert abs(trus_seg.dice(a.ravel().tolist(), b.ravel().tolist(), dims) - 2 / 3) < 1e-12
    d = trus_seg.hd95(a.ravel().tolist(), b.ravel().tolist(), dims, (2.0, 1.0, 1.0))
    assert d >= 0.0 and math.isfinite(d)
    t, p = trus_seg.paired_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t is None and p == 1.0


def test_losses():
    y = [1.0, 0.0, 0.0, 1.0]
    assert trus_seg.soft_dice_loss(y, y, [1, 2, 1, 2]) < 1e-5
    assert trus_seg.kd_loss([1.0, 2.0], [0.0, 0.0], [1, 2, 1, 1], 1) == 5.0


def test_model_and_phantoms():
    cfg = "[model]\nencoder_depth = 2\nbase_channels = 4\ninput_height = 16\ninput_width = 16\n"
    m = trus_seg.Model(cfg, seed=3)
    x = np.random.default_rng(0).random((2, 3, 16, 16), dtype=np.float32)
    probs, latent = m.forward(x.ravel().tolist(), 2)
    probs = np.array(probs).reshape(2, 2, 16, 16)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert len(latent) == 2 * int(np.prod(m.latent_shape()))
    with tempfile.TemporaryDirectory() as tmp:
        ids = trus_seg.generate_phantoms("A", 2, 7, tmp)
        assert len(ids) == 2 and all(i.startswith("A_7_") for i in ids)


if __name__ == "__main__":
    test_metrics()
    test_losses()
    test_model_and_phantoms()
    print("python smoke test passed")
