"""Paired-data synthesis: blur -> area downsample -> noise -> JPEG-like, then bicubic back up."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from upsr.core import DTYPE, as_image, bicubic_resize, clamp01, make_rng, read_png, write_png

# IJG standard luminance quantisation table
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class DegradationConfig:
    scale: int = 4
    blur_sigma: tuple[float, float] = (0.2, 2.0)
    noise_sigma: tuple[float, float] = (0.0, 0.06)
    jpeg_quality: tuple[int, int] = (30, 95)
    jpeg: bool = False
    second_pass: bool = False
    seed: int = 0

    def __post_init__(self):
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        self.noise_sigma = tuple(float(v) for v in self.noise_sigma)
        self.jpeg_quality = tuple(int(v) for v in self.jpeg_quality)
        self.validate()

    def validate(self) -> None:
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        for name in ("blur_sigma", "noise_sigma", "jpeg_quality"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")
            if lo < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.jpeg_quality
        if not (1 <= lo and hi <= 100):
            raise ValueError(f"jpeg_quality must lie in [1, 100], got {(lo, hi)}")

    @classmethod
    def identity(cls, scale: int = 4, seed: int = 0) -> "DegradationConfig":
        """No blur, no noise, no compression: pure area downsampling."""
        return cls(scale=scale, blur_sigma=(0.0, 0.0), noise_sigma=(0.0, 0.0),
                   jpeg=False, second_pass=False, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros(img.shape, dtype=np.float64)
    for i, k in enumerate(kernel):
        out += k * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, edge clamped."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    out = _convolve_axis(_convolve_axis(img.astype(np.float64), k, 0), k, 1)
    return out.astype(img.dtype)


def downsample(img, scale: int) -> np.ndarray:
    """Area (block mean) downsampling."""
    img = np.asarray(img)
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    h, w, c = img.shape
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return img.copy()
    blocks = img.astype(np.float64).reshape(h // scale, scale, w // scale, scale, c)
    return blocks.mean(axis=(1, 3)).astype(img.dtype)


def add_noise(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    return (img + sigma * rng.standard_normal(img.shape)).astype(img.dtype)


def quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table; quality 100 gives all ones."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1, 255)


def jpeg_like(img, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantisation on every channel (no chroma subsampling)."""
    img = np.asarray(img)
    h, w, c = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    work = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="reflect"
                  if min(h, w) > 1 else "edge")
    H, W = work.shape[:2]
    q = quant_table(quality)
    blocks = (work * 255.0 - 128.0).reshape(H // 8, 8, W // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, c)
    return ((rec + 128.0) / 255.0)[:h, :w].astype(img.dtype)


def _uniform(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def degrade_pair(hr, cfg: DegradationConfig, rng: np.random.Generator,
                 return_params: bool = False):
    """Return ``(lr, y0)``; ``y0`` is ``lr`` bicubically upsampled to ``hr`` size.

    With ``return_params`` a dict of the drawn parameters is appended.
    """
    hr = as_image(hr)
    h, w, _ = hr.shape
    if h % cfg.scale or w % cfg.scale:
        raise ValueError(f"HR image {h}x{w} not divisible by scale {cfg.scale}")

    params = {"blur_sigma": _uniform(rng, cfg.blur_sigma),
              "noise_sigma": _uniform(rng, cfg.noise_sigma)}
    if cfg.jpeg:
        params["jpeg_quality"] = int(round(_uniform(rng, cfg.jpeg_quality)))
    if cfg.second_pass:
        params["blur_sigma2"] = 0.5 * _uniform(rng, cfg.blur_sigma)
        params["noise_sigma2"] = 0.5 * _uniform(rng, cfg.noise_sigma)

    x = gaussian_blur(hr, params["blur_sigma"])
    x = downsample(x, cfg.scale)
    x = add_noise(x, params["noise_sigma"], rng)
    if cfg.jpeg:
        x = jpeg_like(clamp01(x), params["jpeg_quality"])
    if cfg.second_pass:
        x = gaussian_blur(x, params["blur_sigma2"])
        x = add_noise(x, params["noise_sigma2"], rng)
    lr = clamp01(x).astype(DTYPE)
    y0 = clamp01(bicubic_resize(lr, h, w)).astype(DTYPE)
    if return_params:
        return lr, y0, params
    return lr, y0


# -- synthetic HR content -----------------------------------------------------


def synthetic_image(size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth test image: shaded background, flat shapes, textured patches."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0.2, 0.8, channels)
    grad = rng.uniform(-0.3, 0.3, (2, channels))
    img = base + yy[..., None] * grad[0] + xx[..., None] * grad[1]
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, channels)
        cy, cx = rng.uniform(0, 1, 2)
        rad = rng.uniform(0.08, 0.35)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        else:
            mask = (np.abs(yy - cy) < rad) & (np.abs(xx - cx) < rad * rng.uniform(0.3, 1.0))
        img[mask] = color
    if rng.random() < 0.7:
        cy, cx = rng.uniform(0.1, 0.9, 2)
        rad = rng.uniform(0.1, 0.3)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        freq = rng.uniform(8, 20)
        theta = rng.uniform(0, np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        amp = rng.uniform(0.2, 0.5)
        img[mask] = img[mask] * (1 - amp) + amp * stripes[mask][:, None]
    return np.clip(img, 0, 1).astype(DTYPE)


def synthetic_dataset(n: int, size: int, cfg: DegradationConfig, seed: int,
                      channels: int = 3) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` pairs ``(x0, y0)`` of generated HR content and its degraded version."""
    img_rng = make_rng(seed, "synthetic-hr")
    deg_rng = make_rng(seed, "synthetic-degrade")
    pairs = []
    for _ in range(n):
        hr = synthetic_image(size, img_rng, channels)
        _, y0 = degrade_pair(hr, cfg, deg_rng)
        pairs.append((hr, y0))
    return pairs


# -- batch mode ---------------------------------------------------------------

MANIFEST_FIELDS = ["filename", "seed", "blur_sigma", "noise_sigma", "jpeg_quality",
                   "blur_sigma2", "noise_sigma2"]


def degrade_directory(in_dir, out_dir, cfg: DegradationConfig) -> int:
    """Degrade every ``*.png`` in ``in_dir`` into ``out_dir/{lr,y0}`` plus ``manifest.csv``.

    Each file gets its own stream derived from ``cfg.seed`` and its name, so
    results do not depend on directory listing order.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    files = sorted(in_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no input images in {in_dir}")
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    (out_dir / "y0").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for path in files:
            hr = read_png(path)
            rng = make_rng(cfg.seed, f"degrade:{path.name}")
            lr, y0, params = degrade_pair(hr, cfg, rng, return_params=True)
            write_png(out_dir / "lr" / path.name, lr)
            write_png(out_dir / "y0" / path.name, y0)
            row = {"filename": path.name, "seed": cfg.seed}
            row.update({k: "" for k in MANIFEST_FIELDS[2:]})
            row.update(params)
            writer.writerow(row)
    return len(files)
