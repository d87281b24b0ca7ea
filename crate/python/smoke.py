"""Smoke test for the dlove Python module.

Build and install first:
    maturin develop -m crates/python/Cargo.toml
then run:
    python python/smoke.py
"""

import math
import os
import tempfile

import dlove

TINY = """
mode = "whitebox"
targets = ["mini"]

[[profiles]]
name = "mini"
cover_shape = [16, 16, 1]
watermark = { kind = "bits", n = 4 }
has_discriminator = false

[data]
train_count = 32
test_count = 8
attack_count = 4

[target_train]
epochs = 1
batch_size = 8

[attack]
max_iter = 30
"""


def main():
    a = dlove.Image.synthetic(16, 16, 1, seed=1)
    b = dlove.Image.synthetic(16, 16, 1, seed=2)
    assert a.shape == (16, 16, 1)
    assert dlove.mse(a, a) == 0.0
    assert dlove.psnr(a, a) == 100.0
    assert abs(dlove.ssim(a, a) - 1.0) < 1e-12
    assert dlove.mse(a, b) == dlove.mse(b, a)
    assert dlove.ber([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5

    target = dlove.Pipeline.build("redmark-like", seed=3, scale=0.5)
    assert target.cover_shape == (16, 16, 1)
    assert target.num_bits == 8
    target, history = target.train(128, 2, seed=4, test_count=16)
    assert len(history) == 2

    alpha = dlove.sample_bits(8, seed=5)
    beta = [1 - b for b in alpha]
    w = target.embed(a, alpha)
    assert len(target.extract_bits(w)) == 8

    r = dlove.attack_whitebox(target, w, alpha, beta, epsilon=0.05, max_iter=200)
    assert r.linf <= 0.05
    assert r.attacked.shape == w.shape
    print("whitebox:", r)

    surrogate = dlove.Pipeline.build("redmark-like", seed=6, scale=0.5)
    tuned, acc = surrogate.finetune_on(target, pairs=32, epochs=2, seed=7)
    assert acc is None or 0.0 <= acc <= 1.0
    r = dlove.attack_blackbox(tuned, target, w, alpha, beta, epsilon=0.05, max_iter=100)
    assert r.linf <= 0.05 and r.surrogate_success is not None
    print("blackbox:", r)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "target.ckpt")
        target.save(path)
        again = dlove.Pipeline.load(path)
        assert again.extract_logits(w) == target.extract_logits(w)
        png = os.path.join(d, "w.png")
        w.save(png)
        assert dlove.Image.load(png, channels=1).shape == w.shape

        cfg = os.path.join(d, "tiny.toml")
        with open(cfg, "w") as f:
            f.write(TINY)
        manifest = dlove.run_experiment(cfg, os.path.join(d, "run"))
        assert os.path.exists(os.path.join(d, "run", "report.csv"))
        assert "attack/mini" in manifest

    print("dlove", dlove.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
