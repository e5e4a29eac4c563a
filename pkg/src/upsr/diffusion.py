"""Weighted residual-shifting diffusion: forward, marginal, prior, reverse, full chain.

Every sampler accepts the weights either as a :class:`WeightMap` (broadcast
over channels) or as anything numpy can broadcast against the images, which
is how the scalar Monte Carlo checks drive them.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from upsr.core import as_image, check_same_shape, clamp01
from upsr.schedule import NoiseSchedule, alpha, eta
from upsr.uncertainty import (
    DEFAULT_BU,
    DEFAULT_PSI_MAX,
    build_weight_map,
    estimate_uncertainty,
)
from upsr.uncertainty import WeightMap

# Multiplies every sampled variance. Only ever changed by `variance_fault`, which
# the verification harness uses to prove its checks can fail.
_VARIANCE_FAULT = 1.0


@contextlib.contextmanager
def variance_fault(scale: float):
    global _VARIANCE_FAULT
    prev, _VARIANCE_FAULT = _VARIANCE_FAULT, float(scale)
    try:
        yield
    finally:
        _VARIANCE_FAULT = prev


def _std_scale() -> float:
    return math.sqrt(_VARIANCE_FAULT)


@dataclass
class DiffusionState:
    t: int
    x_t: np.ndarray


@dataclass
class WeightingConfig:
    b_u: float = DEFAULT_BU
    psi_max: float = DEFAULT_PSI_MAX
    smooth_radius: int = 0
    unw: bool = True

    def effective_b_u(self) -> float:
        return self.b_u if self.unw else 1.0


def _weights(w, like: np.ndarray) -> np.ndarray:
    if isinstance(w, WeightMap):
        if w.values.shape != like.shape[:2]:
            raise ValueError(f"shape mismatch: weights {w.values.shape} vs image {like.shape[:2]}")
        return w.broadcast()
    w = np.asarray(w)
    try:
        np.broadcast_shapes(w.shape, like.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: weights {w.shape} vs image {like.shape}") from None
    return w


def _out_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if dt.kind == "f" else np.dtype(np.float32)


def _gaussian(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.standard_normal(shape).astype(dtype, copy=False)


def forward_step(x_prev, x0, y0, s: NoiseSchedule, w, t: int, rng: np.random.Generator):
    """One forward transition ``x_{t-1} -> x_t``:
    ``x_prev + alpha_t (y0 - x0) + kappa * w * sqrt(alpha_t) * xi``."""
    x_prev, x0, y0 = (np.asarray(a) for a in (x_prev, x0, y0))
    check_same_shape(x_prev, x0, y0, names=("x_prev", "x0", "y0"))
    a_t = alpha(s, t)
    wt = _weights(w, x_prev)
    dtype = _out_dtype(x_prev, x0, y0)
    noise = _gaussian(rng, x_prev.shape, dtype)
    std = s.kappa * math.sqrt(a_t) * _std_scale()
    return (x_prev + a_t * (y0 - x0) + std * wt * noise).astype(dtype, copy=False)


def marginal_params(x0, y0, s: NoiseSchedule, w, t: int):
    """Mean and per-sample std of ``q(x_t | x0, y0)``."""
    x0, y0 = np.asarray(x0), np.asarray(y0)
    e_t = eta(s, t)
    mean = x0 + e_t * (y0 - x0)
    std = s.kappa * math.sqrt(e_t) * _weights(w, x0)
    return mean, std


def sample_marginal(x0, y0, s: NoiseSchedule, w, t: int, rng: np.random.Generator):
    """Jump straight to step ``t``: ``x0 + eta_t (y0 - x0) + kappa * w * sqrt(eta_t) * xi``."""
    x0, y0 = np.asarray(x0), np.asarray(y0)
    check_same_shape(x0, y0, names=("x0", "y0"))
    dtype = _out_dtype(x0, y0)
    if t == 0:
        eta(s, t)
        return x0.astype(dtype, copy=True)
    mean, std = marginal_params(x0, y0, s, w, t)
    noise = _gaussian(rng, x0.shape, dtype)
    return (mean + std * _std_scale() * noise).astype(dtype, copy=False)


def sample_initial_state(y0, s: NoiseSchedule, w, rng: np.random.Generator):
    """Inference prior ``y0 + kappa * w * sqrt(eta_T) * xi``.

    The ``(1 - eta_T)(x0 - y0)`` part of the true marginal is dropped because
    ``x0`` is unknown; it is at most ``1 - eta_T`` times the residual.
    """
    y0 = np.asarray(y0)
    dtype = _out_dtype(y0)
    std = s.kappa * math.sqrt(s.eta[s.T]) * _std_scale() * _weights(w, y0)
    noise = _gaussian(rng, y0.shape, dtype)
    return (y0 + std * noise).astype(dtype, copy=False)


def reverse_params(x_t, x0_hat, s: NoiseSchedule, w, t: int):
    """Mean and per-sample std of ``q(x_{t-1} | x_t, x0_hat, y0)``."""
    x_t, x0_hat = np.asarray(x_t), np.asarray(x0_hat)
    a_t = alpha(s, t)
    e_t, e_prev = eta(s, t), eta(s, t - 1)
    mean = (e_prev / e_t) * x_t + (a_t / e_t) * x0_hat
    std = s.kappa * math.sqrt(e_prev / e_t * a_t) * _std_scale() * _weights(w, x_t)
    return mean, std


def reverse_step(x_t, x0_hat, s: NoiseSchedule, w, t: int, rng: np.random.Generator):
    """One reverse transition ``x_t -> x_{t-1}``.

    At ``t = 1`` the mean is ``x0_hat`` and the variance is zero, so the
    result is ``x0_hat`` exactly and no random numbers are consumed.
    """
    x_t, x0_hat = np.asarray(x_t), np.asarray(x0_hat)
    check_same_shape(x_t, x0_hat, names=("x_t", "x0_hat"))
    dtype = _out_dtype(x_t, x0_hat)
    if t == 1:
        alpha(s, t)
        _weights(w, x_t)
        return x0_hat.astype(dtype, copy=True)
    mean, std = reverse_params(x_t, x0_hat, s, w, t)
    noise = _gaussian(rng, x_t.shape, dtype)
    return (mean + std * noise).astype(dtype, copy=False)


def prepare_conditioning(y0, predictor, cfg: WeightingConfig):
    """Run ``g`` once and derive ``(g_y0, uncertainty, weights)`` for a whole chain."""
    g_y0 = np.asarray(predictor.predict(y0))
    check_same_shape(y0, g_y0, names=("y0", "g(y0)"))
    u = estimate_uncertainty(y0, g_y0, cfg.smooth_radius)
    wmap = build_weight_map(u, cfg.effective_b_u(), cfg.psi_max)
    return g_y0, u, wmap


def run_reverse_chain(y0, predictor, denoiser, s: NoiseSchedule, cfg: WeightingConfig | None,
                      rng: np.random.Generator, on_step=None) -> np.ndarray:
    """Super-resolve ``y0`` (already at HR size) with ``s.T`` reverse steps.

    ``on_step(t, x_t, injected)`` is called for every produced state,
    ``injected`` being the sampled noise that went into it.
    """
    cfg = cfg or WeightingConfig()
    y0 = as_image(y0)
    g_y0, _, wmap = prepare_conditioning(y0, predictor, cfg)

    x = sample_initial_state(y0, s, wmap, rng)
    if on_step is not None:
        on_step(s.T, x, x - y0)
    for t in range(s.T, 0, -1):
        x0_hat = np.asarray(denoiser.denoise(x, y0, g_y0, t))
        if x0_hat.shape != x.shape:
            raise ValueError(f"denoiser returned shape {x0_hat.shape}, expected {x.shape}")
        if t > 1:
            mean, _ = reverse_params(x, x0_hat, s, wmap, t)
            x_next = reverse_step(x, x0_hat, s, wmap, t, rng)
            injected = x_next - mean
        else:
            x_next = reverse_step(x, x0_hat, s, wmap, t, rng)
            injected = np.zeros_like(x_next)
        x = x_next
        if on_step is not None:
            on_step(t - 1, x, injected)
    return clamp01(x)
