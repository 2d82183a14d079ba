"""Smoke test for the avsc_py extension module.

Run after `maturin develop -m crates/python/Cargo.toml`, or directly: when
the module is not installed the script builds it with cargo and imports the
shared library from a temporary directory.
"""

import importlib
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        return importlib.import_module("avsc_py")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "avsc-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libavsc_py.so")
    if sys.platform == "darwin":
        lib = lib[:-3] + ".dylib"
    target = tempfile.mkdtemp(prefix="avsc_py_")
    shutil.copy(lib, os.path.join(target, "avsc_py.so"))
    sys.path.insert(0, target)
    return importlib.import_module("avsc_py")


def main():
    avsc = load_module()
    assert len(avsc.SCENE_CLASSES) == 10
    assert len(avsc.IMAGE_OPS) == 15

    n = 48000
    left = [0.5 * math.sin(2 * math.pi * 440 * t / n) for t in range(n)]
    right = [0.5 * math.sin(2 * math.pi * 660 * t / n) for t in range(n)]
    feats = avsc.extract_features(left, right)
    assert feats.shape == (39, 128, 6), feats.shape
    assert len(feats.to_list()) == 39 * 128 * 6

    masked, time_mask, freq_mask = avsc.spec_augment(feats, seed=3)
    assert masked.shape == feats.shape
    assert 0 <= time_mask[1] - time_mask[0] <= 4 and 0 <= freq_mask[1] - freq_mask[0] <= 13
    swapped, did = avsc.channel_confusion(feats, seed=1, prob=1.0)
    assert did
    assert avsc.channel_confusion(swapped, seed=1, prob=1.0)[0] == feats

    a = ([1.0, 2.0], [0.5], [1.0] + [0.0] * 9)
    b = ([3.0, 4.0], [0.1], [0.0, 1.0] + [0.0] * 8)
    audio, video, target = avsc.joint_mixup(a, b, 0.4)
    assert target[:2] == [0.4, 0.6] and abs(sum(target) - 1.0) < 1e-12
    assert avsc.joint_mixup(b, a, 0.6) == (audio, video, target)
    pairs = avsc.select_mixup_pairs(32, seed=0, fraction=1.0)
    assert len(pairs) == 32 and all(i != j for i, j, _ in pairs)

    pixels = bytes((x * 7 + y * 3) % 256 for y in range(16) for x in range(16) for _ in range(3))
    img = avsc.Image(16, 16, list(pixels))
    assert img.apply("Identity", 30) == img
    assert img.apply("Invert", 0).apply("Invert", 0) == img
    assert img.rand_augment(seed=5) == img.rand_augment(seed=5)
    try:
        img.apply("Blur", 5)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown op accepted")

    with tempfile.TemporaryDirectory() as tmp:
        manifest = avsc.synthesize(os.path.join(tmp, "corpus"), 2, seed=1)
        m = avsc.Manifest.load(manifest)
        assert len(m) == 20
        first, last = m.rows()[0]["frames"]
        assert 0 <= first <= last
        store = avsc.EmbeddingStore.load(os.path.join(tmp, "corpus", "embeddings.avem"))
        assert store.dim == 64 and len(store) >= 20

        config = os.path.join(tmp, "tiny.toml")
        with open(config, "w") as f:
            f.write(
                "epochs = 2\nbatch_size = 8\n[adam]\nlr = 1e-3\n"
                "[model.fcnn]\nblock_channels = [4, 8, 16, 32]\n"
            )
        ckpt = os.path.join(tmp, "model.ckpt")
        embeddings = os.path.join(tmp, "corpus", "embeddings.avem")
        logs = avsc.train(manifest, ckpt, config=config, embeddings=embeddings, seed=4)
        assert len(logs) == 2 and logs[0].startswith("epoch=0 ")
        report = avsc.evaluate(ckpt, manifest, embeddings=embeddings)
        assert 0.0 <= report["overall"] <= 1.0
        assert sum(map(sum, report["confusion"])) == 20
        assert avsc.run_cli(["synth", "--out", os.path.join(tmp, "x"), "--n-per-class", "0"]) == 2

    print("python smoke test passed")


if __name__ == "__main__":
    main()
