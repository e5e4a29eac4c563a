"""Uncertainty-guided residual-shifting diffusion for image super-resolution."""

from upsr.core import (
    as_image,
    bicubic_resize,
    clamp01,
    make_rng,
    nearest_upsample,
    pixel_shuffle,
    pixel_unshuffle,
    read_png,
    write_png,
)
from upsr.schedule import NoiseSchedule, build_schedule
from upsr.uncertainty import (
    UncertaintyMap,
    WeightMap,
    build_weight_map,
    estimate_uncertainty,
    weight_coefficient,
)

__version__ = "0.1.0"
