import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upsr.core import (
    as_image,
    bicubic_resize,
    clamp01,
    cubic_kernel,
    make_rng,
    nearest_upsample,
    pixel_shuffle,
    pixel_unshuffle,
    read_png,
    split_rng,
    write_png,
)
from upsr.degradation import downsample


def test_as_image_promotes_2d():
    assert as_image(np.zeros((3, 4))).shape == (3, 4, 1)
    with pytest.raises(ValueError):
        as_image(np.zeros(5))
    with pytest.raises(ValueError):
        as_image(np.zeros((0, 3, 1)))


def test_unshuffle_block_layout():
    img = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    out = pixel_unshuffle(img, 2)
    assert out.shape == (2, 2, 4)
    # block (0,0) holds samples (0,0), (0,1), (1,0), (1,1)
    np.testing.assert_array_equal(out[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(out[1, 1], [10, 11, 14, 15])
    np.testing.assert_array_equal(pixel_shuffle(out, 2), img)


def test_factor_one_is_identity(rng):
    img = rng.random((5, 7, 3))
    np.testing.assert_array_equal(pixel_unshuffle(img, 1), img)
    np.testing.assert_array_equal(pixel_shuffle(img, 1), img)
    np.testing.assert_array_equal(nearest_upsample(img, 1), img)


def test_unshuffle_errors_name_axis():
    with pytest.raises(ValueError, match="height"):
        pixel_unshuffle(np.zeros((5, 4, 1)), 2)
    with pytest.raises(ValueError, match="width"):
        pixel_unshuffle(np.zeros((4, 5, 1)), 2)
    with pytest.raises(ValueError, match="channels"):
        pixel_shuffle(np.zeros((4, 4, 3)), 2)


def test_roundtrip_64x64(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    u = pixel_unshuffle(img, 2)
    assert u.shape == (32, 32, 12)
    np.testing.assert_array_equal(pixel_shuffle(u, 2), img)


def test_roundtrip_100_random_images(rng):
    for _ in range(100):
        r = int(rng.integers(1, 5))
        h, w, c = (int(v) for v in rng.integers(1, 6, 3))
        img = rng.standard_normal((h * r, w * r, c)).astype(np.float32)
        assert np.array_equal(pixel_shuffle(pixel_unshuffle(img, r), r), img)


@settings(max_examples=50, deadline=None)
@given(r=st.integers(1, 4), h=st.integers(1, 5), w=st.integers(1, 5), c=st.sampled_from([1, 3]),
       seed=st.integers(0, 2**32 - 1))
def test_roundtrip_property(r, h, w, c, seed):
    img = np.random.default_rng(seed).random((h * r, w * r, c))
    assert np.array_equal(pixel_shuffle(pixel_unshuffle(img, r), r), img)


def test_nearest_upsample():
    out = nearest_upsample(np.full((1, 1, 1), 0.5), 3)
    assert out.shape == (3, 3, 1)
    assert np.all(out == 0.5)


def test_nearest_upsample_block_mean_inverse(rng):
    img = rng.random((6, 5, 3))
    for r in (1, 2, 3, 4):
        up = nearest_upsample(img, r)
        # summing r*r equal values rounds in the last place
        np.testing.assert_allclose(downsample(up, r), img, rtol=1e-15, atol=0)
        assert np.isclose(up.sum(), r * r * img.sum())


def test_cubic_kernel_values():
    # a = -0.5: unit at 0, zero at the integers, small negative lobe
    assert cubic_kernel(0.0) == 1.0
    assert np.allclose(cubic_kernel([1.0, 2.0, 3.0]), 0.0)
    assert np.isclose(cubic_kernel(0.5), 0.5625)
    assert np.isclose(cubic_kernel(1.5), -0.0625)


def test_bicubic_constant():
    img = np.full((5, 7, 3), 0.3, dtype=np.float32)
    out = bicubic_resize(img, 11, 4)
    assert out.shape == (11, 4, 3)
    assert np.max(np.abs(out - 0.3)) < 1e-6


def test_bicubic_identity(rng):
    img = rng.random((9, 6, 3)).astype(np.float32)
    assert np.max(np.abs(bicubic_resize(img, 9, 6) - img)) < 1e-6


def test_bicubic_checkerboard_overshoots():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
    out = bicubic_resize(img, 4, 4)
    # independent evaluation: 1-D interpolation of [0, 1] at the four output
    # centres, combined through the bilinear identity c = fx + fy - 2 fx fy
    pos = (np.arange(4) + 0.5) / 2 - 0.5
    taps = np.arange(-2, 4)
    vals = np.clip(taps, 0, 1).astype(float)
    f = np.array([sum(cubic_kernel(p - k) * v for k, v in zip(taps, vals)) for p in pos])
    expected = f[:, None] + f[None, :] - 2 * f[:, None] * f[None, :]
    np.testing.assert_allclose(out[:, :, 0], expected, atol=1e-12)
    assert out.min() < 0 or out.max() > 1


def test_clamp01():
    x = np.array([1.2, -0.1, 0.5])
    np.testing.assert_array_equal(clamp01(x), [1.0, 0.0, 0.5])


def test_rng_streams():
    a = make_rng(7).standard_normal(10)
    b = make_rng(7).standard_normal(10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(make_rng(7, "a").standard_normal(10), make_rng(7, "b").standard_normal(10))
    kids = split_rng(make_rng(7), 2)
    assert not np.array_equal(kids[0].standard_normal(5), kids[1].standard_normal(5))


def test_rng_identical_across_processes():
    code = ("from upsr.core import make_rng; import sys;"
            "sys.stdout.write(make_rng(42, 'noise').standard_normal(64).tobytes().hex())")
    outs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                           check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1]
    assert outs[0] == make_rng(42, "noise").standard_normal(64).tobytes().hex()


def test_png_roundtrip(tmp_path, rng):
    img = (rng.integers(0, 256, (8, 6, 3)) / 255.0).astype(np.float32)
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), img)
    gray = (rng.integers(0, 256, (5, 5, 1)) / 255.0).astype(np.float32)
    write_png(tmp_path / "g.png", gray)
    assert read_png(tmp_path / "g.png").shape == (5, 5, 1)


def test_png_export_clips_and_rounds(tmp_path):
    img = np.array([[[1.4], [-0.2], [0.5]]], dtype=np.float32)
    write_png(tmp_path / "c.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "c.png")[0, :, 0] * 255, [255, 0, 128])
