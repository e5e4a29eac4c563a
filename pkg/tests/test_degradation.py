import numpy as np
import pytest

from upsr.core import make_rng
from upsr.degradation import (
    DegradationConfig,
    add_noise,
    degrade_pair,
    downsample,
    gaussian_blur,
    gaussian_kernel1d,
    jpeg_like,
    quant_table,
    synthetic_dataset,
    synthetic_image,
)


def test_kernel_is_normalised_and_symmetric():
    k = gaussian_kernel1d(1.3)
    assert len(k) == 2 * 4 + 1
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k[::-1])


def test_blur_of_impulse_matches_outer_kernel():
    img = np.zeros((21, 21, 1), np.float64)
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1.0)[..., 0]
    k = gaussian_kernel1d(1.0)
    r = len(k) // 2
    np.testing.assert_allclose(out[10 - r:11 + r, 10 - r:11 + r], np.outer(k, k), atol=1e-12)
    assert out.sum() == pytest.approx(1.0)


def test_blur_sigma_zero_is_identity(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)
    with pytest.raises(ValueError):
        gaussian_blur(img, -1.0)


def test_downsample_is_block_mean():
    img = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    out = downsample(img, 2)[..., 0]
    np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError, match="divisible"):
        downsample(np.zeros((5, 4, 1)), 2)


def test_noise_moments(rng):
    base = np.full((400, 400, 1), 0.5)
    out = add_noise(base, 0.05, rng) - base
    assert abs(out.mean()) < 4 * 0.05 / 400
    assert out.std() == pytest.approx(0.05, rel=0.01)


def test_quant_table_anchors():
    assert np.all(quant_table(100) == 1)
    assert quant_table(50)[0, 0] == 16
    assert np.all(quant_table(10) >= quant_table(90))


def test_jpeg_quality_100_is_nearly_lossless(rng):
    img = synthetic_image(64, rng, 1)
    err = np.abs(jpeg_like(img, 100) - img).mean()
    assert err < 1e-3


def test_jpeg_low_quality_adds_block_edges(rng):
    img = gaussian_blur(synthetic_image(64, rng, 1), 2.0)
    out = jpeg_like(img, 10)[..., 0]
    # jumps across 8-pixel block boundaries exceed jumps inside blocks
    d = np.abs(np.diff(out, axis=1))
    on = d[:, 7::8].mean()
    off = np.delete(d, np.s_[7::8], axis=1).mean()
    assert on > 1.5 * off


def test_degrade_pair_shapes_and_determinism():
    cfg = DegradationConfig(scale=4, jpeg=True, second_pass=True)
    hr = synthetic_image(32, make_rng(0))
    a = degrade_pair(hr, cfg, make_rng(5), return_params=True)
    b = degrade_pair(hr, cfg, make_rng(5), return_params=True)
    assert a[0].shape == (8, 8, 3) and a[1].shape == hr.shape
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[2] == b[2]
    assert 0 <= a[0].min() and a[0].max() <= 1


def test_identity_config_only_resamples(rng):
    hr = synthetic_image(16, rng)
    lr, _ = degrade_pair(hr, DegradationConfig.identity(scale=2), rng)
    np.testing.assert_allclose(lr, downsample(hr, 2), atol=1e-7)


@pytest.mark.parametrize("bad", [
    dict(scale=0), dict(blur_sigma=(2.0, 1.0)), dict(noise_sigma=(-0.1, 0.0)),
    dict(jpeg_quality=(0, 50)),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        DegradationConfig(**bad).validate()


def test_synthetic_dataset_is_seeded():
    cfg = DegradationConfig(scale=4)
    a = synthetic_dataset(3, 16, cfg, seed=9)
    b = synthetic_dataset(3, 16, cfg, seed=9)
    for (x, y), (u, v) in zip(a, b):
        np.testing.assert_array_equal(x, u)
        np.testing.assert_array_equal(y, v)
