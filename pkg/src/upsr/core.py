"""Image container conventions, seeded randomness and resampling primitives.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}``. Samples are nominally in ``[0, 1]`` but diffusion states are
allowed to leave that range; only :func:`write_png` clips.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

DTYPE = np.float32


def as_image(data, dtype=DTYPE) -> np.ndarray:
    """Validate and return ``data`` as an ``(H, W, C)`` array.

    2-D input is promoted to a single-channel image.
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"image must be 2-D or 3-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"image dimensions must be >= 1, got {arr.shape}")
    return arr


def check_same_shape(*images: np.ndarray, names=None) -> None:
    shapes = [np.shape(im) for im in images]
    if any(s != shapes[0] for s in shapes):
        if names:
            desc = ", ".join(f"{n}={s}" for n, s in zip(names, shapes))
        else:
            desc = ", ".join(str(s) for s in shapes)
        raise ValueError(f"shape mismatch: {desc}")


# -- randomness ---------------------------------------------------------------


def _purpose_key(purpose: str) -> int:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, purpose: str | None = None) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    With ``purpose`` the stream is derived from ``(seed, sha256(purpose))`` so
    that adding a new consumer never shifts the draws of an existing one.
    """
    entropy = [int(seed) & (2**64 - 1)]
    if purpose is not None:
        entropy.append(_purpose_key(purpose))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``n`` independent child streams."""
    return list(rng.spawn(n))


# -- space <-> depth ----------------------------------------------------------


def pixel_unshuffle(img, r: int) -> np.ndarray:
    """Space-to-depth: ``(..., H, W, C) -> (..., H/r, W/r, C*r*r)``.

    Output channel ``c*r*r + i*r + j`` of pixel ``(y, x)`` holds input sample
    ``(y*r + i, x*r + j, c)``.
    """
    img = np.asarray(img)
    if r < 1:
        raise ValueError(f"factor must be >= 1, got {r}")
    *lead, h, w, c = img.shape
    if h % r:
        raise ValueError(f"height {h} not divisible by factor {r}")
    if w % r:
        raise ValueError(f"width {w} not divisible by factor {r}")
    n = len(lead)
    out = img.reshape(*lead, h // r, r, w // r, r, c)
    out = out.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(out.reshape(*lead, h // r, w // r, c * r * r))


def pixel_shuffle(img, r: int) -> np.ndarray:
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle`."""
    img = np.asarray(img)
    if r < 1:
        raise ValueError(f"factor must be >= 1, got {r}")
    *lead, h, w, c = img.shape
    if c % (r * r):
        raise ValueError(f"channels {c} not divisible by factor**2 = {r * r}")
    n = len(lead)
    cout = c // (r * r)
    out = img.reshape(*lead, h, w, cout, r, r)
    out = out.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(out.reshape(*lead, h * r, w * r, cout))


# -- resampling ---------------------------------------------------------------


def nearest_upsample(img, r: int) -> np.ndarray:
    if r < 1:
        raise ValueError(f"factor must be >= 1, got {r}")
    img = np.asarray(img)
    return np.repeat(np.repeat(img, r, axis=0), r, axis=1)


def cubic_kernel(x, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (Catmull-Rom for ``a = -0.5``)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _cubic_weights(n_in: int, n_out: int) -> np.ndarray:
    # dense (n_out, n_in) interpolation matrix, half-pixel centres, edge clamp
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = base + k
        wk = cubic_kernel(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wk)
    return mat


def bicubic_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize. The result is *not* clipped."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {(out_h, out_w)}")
    img = np.asarray(img)
    h, w, _ = img.shape
    wy = _cubic_weights(h, out_h)
    wx = _cubic_weights(w, out_w)
    out = np.einsum("ph,hwc,qw->pqc", wy, img.astype(np.float64), wx, optimize=True)
    return out.astype(img.dtype if img.dtype.kind == "f" else DTYPE)


def clamp01(img) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


# -- PNG ----------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return as_image(arr.astype(DTYPE) / 255.0)


def to_bytes(img) -> np.ndarray:
    return np.round(clamp01(np.asarray(img, dtype=np.float64)) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    from PIL import Image as PILImage

    data = to_bytes(as_image(img))
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0])
    elif data.shape[2] == 3:
        pil = PILImage.fromarray(data)
    else:
        raise ValueError(f"PNG export needs 1 or 3 channels, got {data.shape[2]}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
