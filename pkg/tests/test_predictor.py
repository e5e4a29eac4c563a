import numpy as np
import pytest

from upsr.denoiser import TinyNet
from upsr.predictor import identity_predictor, learned_predictor, smoothing_predictor


def step_image(n=32):
    img = np.zeros((n, n, 3), np.float32)
    img[:, n // 2:] = 1.0
    return img


def test_identity_returns_copy(rng):
    y0 = rng.random((8, 8, 3)).astype(np.float32)
    g = identity_predictor()(y0)
    np.testing.assert_array_equal(g, y0)
    assert g is not y0


def test_smoothing_residual_sits_on_edges():
    y0 = step_image()
    res = np.abs(smoothing_predictor(2)(y0) - y0).mean(axis=2)
    assert res[:, :10].max() < 1e-6 and res[:, -10:].max() < 1e-6
    assert res[:, 15:17].min() > 0.1


def test_smoothing_rejects_bad_radius():
    with pytest.raises(ValueError):
        smoothing_predictor(0)


def test_learned_predictor_role_and_channels(rng):
    with pytest.raises(ValueError, match="role"):
        learned_predictor(TinyNet(3, "denoiser"))
    m = TinyNet(3, "predictor", 1, hidden=4, n_layers=2).init(rng)
    p = learned_predictor(m)
    y0 = rng.random((8, 8, 3)).astype(np.float32)
    assert p(y0).shape == y0.shape
    with pytest.raises(ValueError, match="channels"):
        p(np.zeros((8, 8, 1), np.float32))


def test_zero_learned_predictor_is_identity(rng):
    m = TinyNet(3, "predictor", 1, hidden=4, n_layers=2)
    y0 = rng.random((8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(learned_predictor(m)(y0), y0)
