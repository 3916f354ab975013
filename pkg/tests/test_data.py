import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from qsegment.data import (
    Sample, adjust_brightness, augment, export_png, hflip, load_chase, rotate, synth_vessels, synthetic_index, vflip,
)


def fake_chase(root, n=28, hw=(50, 44)):
    """CHASE-style names: Image_NNx.jpg plus first and second observer masks."""
    rng = np.random.default_rng(0)
    root.mkdir(exist_ok=True)
    for i in range(n):
        stem = f"Image_{i // 2 + 1:02d}{'LR'[i % 2]}"
        Image.fromarray(rng.integers(0, 256, hw + (3,), dtype=np.uint8), "RGB").save(root / f"{stem}.jpg")
        m = (rng.random(hw) < 0.2).astype(np.uint8) * 255
        Image.fromarray(m, "L").save(root / f"{stem}_1stHO.png")
        Image.fromarray(255 - m, "L").save(root / f"{stem}_2ndHO.png")
    return root


def test_load_chase_split(tmp_path):
    root = fake_chase(tmp_path / "chase")
    idx = load_chase(root, (32, 32))
    assert (len(idx.train), len(idx.val)) == (20, 8)
    ids = [r.id for r in idx.train + idx.val]
    assert ids == sorted(ids) and ids[0] == "Image_01L" and ids[-1] == "Image_14R"
    assert not set(r.id for r in idx.train) & set(r.id for r in idx.val)
    s = idx.val_samples()[0]
    assert s.image.shape == (3, 32, 32) and s.mask.shape == (1, 32, 32)
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0.0, 1.0}
    # first observer, not second
    assert idx.train[0].mask_path.name == "Image_01L_1stHO.png"


def test_load_chase_deterministic(tmp_path):
    root = fake_chase(tmp_path / "chase")
    a, b = load_chase(root, (16, 16)), load_chase(root, (16, 16))
    assert [r.id for r in a.train] == [r.id for r in b.train]
    for x, y in zip(a.train_samples(), b.train_samples()):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()


def test_load_chase_missing_mask(tmp_path):
    root = fake_chase(tmp_path / "chase")
    (root / "Image_05R_1stHO.png").unlink()
    with pytest.raises(FileNotFoundError, match="Image_05R"):
        load_chase(root, (16, 16))


def test_load_chase_wrong_count_warns(tmp_path):
    root = fake_chase(tmp_path / "chase", n=14)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        idx = load_chase(root, (16, 16))
    assert caught and idx.warnings
    assert (len(idx.train), len(idx.val)) == (10, 4)


def test_load_chase_errors(tmp_path):
    with pytest.raises(ValueError):
        load_chase(tmp_path, (30, 32))
    with pytest.raises(FileNotFoundError):
        load_chase(tmp_path / "nope", (32, 32))
    root = fake_chase(tmp_path / "chase", n=2)
    (root / "Image_01L.jpg").write_bytes(b"not a jpeg")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        idx = load_chase(root, (16, 16))
    with pytest.raises(OSError, match="Image_01L"):
        idx.train_samples()


# augmentation -----------------------------------------------------------------


@pytest.fixture
def sample():
    return synth_vessels(11, 1, (32, 32))[0]


def test_double_flip_is_identity(sample):
    for f in (hflip, vflip):
        back = f(f(sample))
        assert back.image.tobytes() == sample.image.tobytes() and back.mask.tobytes() == sample.mask.tobytes()


def test_brightness_scalar_oracle(sample):
    for factor in (0.8, 1.0, 1.17, 1.2):
        out = adjust_brightness(sample, factor)
        assert out.image.min() >= 0 and out.image.max() <= 1
        for x, y in zip(sample.image.ravel()[::37], out.image.ravel()[::37]):
            assert y == min(max(np.float32(factor) * x, 0.0), 1.0)
        assert out.mask is sample.mask


def test_augment_reproducible(sample):
    a = augment(sample, np.random.default_rng(5))
    b = augment(sample, np.random.default_rng(5))
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_keeps_invariants(seed):
    s = synth_vessels(seed % 97, 1, (32, 32))[0]
    out = augment(s, np.random.default_rng(seed))
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    assert 0 <= out.image.min() and out.image.max() <= 1
    assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1))
def test_rotation_preserves_foreground(seed, deg):
    s = synth_vessels(seed, 1, (64, 64))[0]
    r = rotate(s, deg)
    before, after = s.mask.sum(), r.mask.sum()
    assert abs(after - before) / before <= 0.02


def test_geometry_shared_between_image_and_mask():
    # a mask equal to the thresholded image must stay equal after any draw
    rng = np.random.default_rng(0)
    mask = np.zeros((1, 32, 32), np.float32)
    mask[:, 8:20, 5:27] = 1
    s = Sample(np.repeat(mask, 3, axis=0), mask, "box")
    for _ in range(10):
        out = augment(s, rng, brightness=0.0, max_deg=0.0)
        np.testing.assert_array_equal(out.image[0] >= 0.5, out.mask[0] == 1)


# synthetic data -----------------------------------------------------------------


def test_synthetic_deterministic():
    a, b = synth_vessels(3, 2), synth_vessels(3, 2)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    assert synth_vessels(4, 1)[0].mask.tobytes() != a[0].mask.tobytes()


def test_synthetic_foreground_fraction():
    for seed in range(100):
        s = synth_vessels(seed, 1)[0]
        assert 0.02 <= s.mask.mean() <= 0.30
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_synthetic_index_split():
    idx = synthetic_index(1, hw=(32, 32))
    assert (len(idx.train), len(idx.val)) == (20, 8)
    with pytest.raises(ValueError):
        synth_vessels(0, 1, (30, 32))


def test_export_png_round_trip(tmp_path):
    samples = synth_vessels(2, 3, (32, 32))
    export_png(samples, tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        idx = load_chase(tmp_path, (32, 32))
    back = idx.train_samples() + idx.val_samples()
    for s, b in zip(samples, back):
        assert np.array_equal(s.mask, b.mask)
        assert np.max(np.abs(s.image - b.image)) <= 0.5 / 255 + 1e-6


def test_sample_invariants():
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 4, 4), np.float32), np.full((1, 4, 4), 0.5, np.float32), "x")
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 4, 4), np.float32), np.zeros((1, 4, 5), np.float32), "x")
    with pytest.raises(ValueError):
        Sample(np.full((3, 4, 4), 2.0, np.float32), np.zeros((1, 4, 4), np.float32), "x")
