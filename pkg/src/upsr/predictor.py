"""The auxiliary SR estimator g(.) used for conditioning and for the uncertainty map.

All predictors take the already-upsampled ``y0`` and return an image of the
same shape.
"""

from __future__ import annotations

import numpy as np

from upsr.core import as_image
from upsr.degradation import gaussian_blur


class SRPredictor:
    name = "base"

    def predict(self, y0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, y0):
        return self.predict(y0)


class IdentityPredictor(SRPredictor):
    name = "identity"

    def predict(self, y0):
        return np.array(y0)


class SmoothingPredictor(SRPredictor):
    """Gaussian blur with ``sigma = radius / 2``.

    Not a real SR model: its residual against ``y0`` lights up edges and
    texture and vanishes on flat regions, which is what the weighting needs.
    """

    name = "smooth"

    def __init__(self, radius: int = 2):
        if radius < 1:
            raise ValueError(f"radius must be >= 1, got {radius}")
        self.radius = int(radius)

    def predict(self, y0):
        return gaussian_blur(np.asarray(y0), self.radius / 2.0)


class LearnedPredictor(SRPredictor):
    """Wraps a ``TinyNet`` trained with the ``predictor`` role."""

    name = "learned"

    def __init__(self, model):
        if model.role != "predictor":
            raise ValueError(f"model has role {model.role!r}, expected 'predictor'")
        self.model = model

    def predict(self, y0):
        y0 = as_image(y0)
        if y0.shape[2] != self.model.channels:
            raise ValueError(
                f"model expects {self.model.channels} channels, got {y0.shape[2]}")
        return self.model.forward([y0], 1)


def identity_predictor() -> IdentityPredictor:
    return IdentityPredictor()


def smoothing_predictor(radius: int = 2) -> SmoothingPredictor:
    return SmoothingPredictor(radius)


def learned_predictor(model) -> LearnedPredictor:
    return LearnedPredictor(model)
