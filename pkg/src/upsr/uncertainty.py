"""Per-pixel uncertainty from an SR estimate and the noise weighting map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from upsr.core import check_same_shape, write_png

DEFAULT_BU = 0.4
DEFAULT_PSI_MAX = 0.05


@dataclass(frozen=True)
class UncertaintyMap:
    values: np.ndarray  # (H, W), >= 0

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class WeightMap:
    values: np.ndarray  # (H, W), in [b_u, 1]
    b_u: float
    psi_max: float

    @property
    def shape(self):
        return self.values.shape

    def broadcast(self) -> np.ndarray:
        """Values as ``(H, W, 1)`` so they multiply an image channel-wise."""
        return self.values[:, :, None]


def box_blur2d(values: np.ndarray, radius: int) -> np.ndarray:
    """Edge-clamped box filter of half-width ``radius``; 0 is a no-op."""
    if radius <= 0:
        return values
    size = 2 * radius + 1
    padded = np.pad(values.astype(np.float64), radius, mode="edge")
    csum = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    h, w = values.shape
    total = (csum[size:size + h, size:size + w] - csum[:h, size:size + w]
             - csum[size:size + h, :w] + csum[:h, :w])
    return (total / (size * size)).astype(values.dtype)


def estimate_uncertainty(y0, g_y0, smooth_radius: int = 0) -> UncertaintyMap:
    """Half the absolute residual ``|g(y0) - y0|``, averaged over channels."""
    y0 = np.asarray(y0)
    g_y0 = np.asarray(g_y0)
    check_same_shape(y0, g_y0, names=("y0", "g_y0"))
    resid = np.abs(g_y0.astype(np.float64) - y0.astype(np.float64))
    psi = 0.5 * resid.mean(axis=2)
    psi = box_blur2d(psi, smooth_radius)
    return UncertaintyMap(psi.astype(np.float32))


def _check_weight_params(b_u: float, psi_max: float) -> None:
    if not 0 < b_u <= 1:
        raise ValueError(f"b_u must lie in (0, 1], got {b_u}")
    if not psi_max > 0:
        raise ValueError(f"psi_max must be > 0, got {psi_max}")


def weight_coefficient(psi, b_u: float = DEFAULT_BU, psi_max: float = DEFAULT_PSI_MAX):
    """Piecewise-linear weight: ``b_u`` at zero rising to 1 at ``psi_max``, then flat.

    Works elementwise on arrays; returns a float for scalar input.
    """
    _check_weight_params(b_u, psi_max)
    psi_arr = np.asarray(psi, dtype=np.float64)
    if np.any(psi_arr < 0) or np.any(np.isnan(psi_arr)):
        raise ValueError("psi must be non-negative")
    out = np.where(psi_arr <= psi_max, (1.0 - b_u) / psi_max * psi_arr + b_u, 1.0)
    # the linear branch can land a hair above 1 at psi_max through rounding
    out = np.minimum(out, 1.0)
    return float(out) if out.ndim == 0 else out


def build_weight_map(u: UncertaintyMap, b_u: float = DEFAULT_BU,
                     psi_max: float = DEFAULT_PSI_MAX) -> WeightMap:
    values = weight_coefficient(u.values, b_u, psi_max)
    return WeightMap(np.asarray(values, dtype=np.float32), float(b_u), float(psi_max))


def uniform_weight_map(height: int, width: int, value: float = 1.0) -> WeightMap:
    """Constant map; ``value = 1`` turns the process back into isotropic noise."""
    return WeightMap(np.full((height, width), value, dtype=np.float32), value, DEFAULT_PSI_MAX)


def write_uncertainty_png(path, u: UncertaintyMap) -> None:
    """Grayscale heatmap, ``[0, max(psi)]`` mapped linearly onto ``[0, 255]``."""
    top = float(u.values.max())
    img = u.values / top if top > 0 else np.zeros_like(u.values)
    write_png(path, img[:, :, None])


def write_weight_png(path, w: WeightMap) -> None:
    """Grayscale heatmap, ``[b_u, 1]`` mapped linearly onto ``[0, 255]``."""
    span = 1.0 - w.b_u
    img = (w.values - w.b_u) / span if span > 0 else np.ones_like(w.values)
    write_png(path, img[:, :, None])
