"""Image metrics, the residual histogram and numerical oracles for the sampler."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from upsr.core import check_same_shape
from upsr.schedule import NoiseSchedule, alpha, eta

PSNR_CAP = 99.0


def psnr(a, b, cap: float | None = PSNR_CAP) -> float:
    """PSNR in dB for peak 1.0. Identical images give ``cap`` (``inf`` with ``cap=None``)."""
    a, b = np.asarray(a), np.asarray(b)
    check_same_shape(a, b, names=("a", "b"))
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0:
        return float("inf") if cap is None else cap
    return 10.0 * math.log10(1.0 / mse)


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, names=("a", "b"))
    return float(np.mean((a - b) ** 2))


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the first two axes
    n = len(g)
    h, w = img.shape[:2]
    tmp = sum(g[k] * img[k:h - n + 1 + k] for k in range(n))
    return sum(g[k] * tmp[:, k:w - n + 1 + k] for k in range(n))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, channels averaged."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, names=("a", "b"))
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < 11:
        raise ValueError(f"SSIM needs images of at least 11x11, got {a.shape[:2]}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gauss_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- residual histogram -------------------------------------------------------


@dataclass
class Histogram:
    bin_width: float
    lower: float
    upper: float
    counts: np.ndarray
    total: int
    overflow: int

    @property
    def edges(self) -> np.ndarray:
        return self.lower + self.bin_width * np.arange(len(self.counts) + 1)

    def modal_bin(self) -> int:
        return int(np.argmax(self.counts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        edges = self.edges
        for i, c in enumerate(self.counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
        w.writerow(["overflow", "", self.overflow])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Histogram":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        overflow = int(rows[-1][2])
        body = rows[:-1]
        lo = np.array([float(r[0]) for r in body])
        hi = np.array([float(r[1]) for r in body])
        counts = np.array([int(r[2]) for r in body], dtype=np.int64)
        return cls(float(hi[0] - lo[0]), float(lo[0]), float(hi[-1]), counts,
                   int(counts.sum()) + overflow, overflow)


def residual_histogram(pairs, bin_width: float = 0.01, cutoff: float = 0.4) -> Histogram:
    """Histogram of per-sample ``|y0 - x0|`` on ``[0, cutoff]``; larger values go to overflow."""
    if bin_width <= 0 or cutoff <= 0:
        raise ValueError("bin_width and cutoff must be positive")
    n_bins = int(round(cutoff / bin_width))
    counts = np.zeros(n_bins, dtype=np.int64)
    total = overflow = 0
    for y0, x0 in pairs:
        y0, x0 = np.asarray(y0), np.asarray(x0)
        check_same_shape(y0, x0, names=("y0", "x0"))
        r = np.abs(y0.astype(np.float64) - x0.astype(np.float64)).ravel()
        total += r.size
        inside = r <= cutoff
        overflow += int(r.size - inside.sum())
        idx = np.minimum((r[inside] / bin_width).astype(np.int64), n_bins - 1)
        counts += np.bincount(idx, minlength=n_bins)
    return Histogram(bin_width, 0.0, n_bins * bin_width, counts, total, overflow)


def is_long_tailed(h: Histogram) -> bool:
    """Counts never increase from the modal bin to the cutoff."""
    tail = h.counts[h.modal_bin():]
    return bool(np.all(np.diff(tail) <= 0))


# -- Monte Carlo moment check -------------------------------------------------


@dataclass
class MomentReport:
    target_mean: float
    target_std: float
    mean: float
    std: float
    n: int
    se_mean: float
    se_std: float
    mean_ok: bool
    std_ok: bool

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.std_ok

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v)
                for k, v in vars(self).items()} | {"passed": self.passed}

    CSV_FIELDS = ("target_mean", "target_std", "mean", "std", "n", "se_mean", "se_std",
                  "mean_ok", "std_ok")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        w.writerow([getattr(self, f) for f in self.CSV_FIELDS])
        return buf.getvalue()


class NonFiniteSamples(ArithmeticError):
    pass


def mc_moment_check(sample_fn, target_mean: float, target_std: float, n: int = 1_000_000,
                    std_rtol: float | None = None) -> MomentReport:
    """Draw ``n`` samples from ``sample_fn(n)`` and compare the first two moments.

    Mean passes if it is within 4 standard errors (``4 * target_std / sqrt(n)``);
    std passes within ``max(1%, 4 / sqrt(2n))`` relative. A zero target std
    requires an exact match.
    """
    if n < 1000:
        raise ValueError(f"need n >= 1000 samples, got {n}")
    x = np.asarray(sample_fn(n), dtype=np.float64).ravel()
    if x.size != n:
        raise ValueError(f"sample_fn returned {x.size} samples, expected {n}")
    bad = ~np.isfinite(x)
    if bad.any():
        raise NonFiniteSamples(f"{int(bad.sum())} of {n} samples are non-finite "
                               f"(first at index {int(np.argmax(bad))})")
    m = float(x.mean())
    sd = float(x.std(ddof=1))
    se_mean = target_std / math.sqrt(n)
    se_std = target_std / math.sqrt(2 * n)
    rtol = std_rtol if std_rtol is not None else max(0.01, 4 / math.sqrt(2 * n))
    if target_std == 0:
        mean_ok = abs(m - target_mean) <= 1e-12 * max(1.0, abs(target_mean))
        std_ok = sd == 0
    else:
        mean_ok = abs(m - target_mean) < 4 * se_mean
        std_ok = abs(sd - target_std) / target_std < rtol
    return MomentReport(target_mean, target_std, m, sd, n, se_mean, se_std, mean_ok, std_ok)


# -- brute-force reverse posterior --------------------------------------------


def normal_pdf(x, mean, std):
    z = (np.asarray(x) - mean) / std
    return np.exp(-0.5 * z * z) / (std * math.sqrt(2 * math.pi))


@dataclass
class GridDensity:
    grid: np.ndarray
    density: np.ndarray
    norm_error: float  # |integral of the unnormalised product / Z - 1| after normalising

    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.density, self.grid))

    def std(self) -> float:
        m = self.mean()
        return math.sqrt(float(np.trapezoid((self.grid - m) ** 2 * self.density, self.grid)))


def bayes_grid_posterior(x_t: float, x0: float, y0: float, s: NoiseSchedule, w: float, t: int,
                         n_points: int = 4096, span: float = 10.0) -> GridDensity:
    """``q(x_{t-1} | x_t, x0, y0)`` by multiplying the forward transition and the
    marginal at ``t - 1`` on a grid and normalising with the trapezoid rule.

    Both factors are written out from their Gaussian definitions here rather
    than reusing the samplers, so the result is an independent reference. The
    grid covers ``span`` posterior standard deviations either side, located
    from the product's own moments.
    """
    if not 2 <= t <= s.T:
        raise ValueError(f"grid posterior needs 2 <= t <= T, got t={t}")
    a_t, e_prev = alpha(s, t), eta(s, t - 1)
    sd_fwd = s.kappa * w * math.sqrt(a_t)
    sd_marg = s.kappa * w * math.sqrt(e_prev)
    marg_mean = x0 + e_prev * (y0 - x0)
    shift = a_t * (y0 - x0)

    # locate the product with precision-weighted moments, then lay out the grid
    prec = 1 / sd_fwd ** 2 + 1 / sd_marg ** 2
    centre = ((x_t - shift) / sd_fwd ** 2 + marg_mean / sd_marg ** 2) / prec
    width = 1 / math.sqrt(prec)
    grid = np.linspace(centre - span * width, centre + span * width, n_points)

    # log-domain product keeps tiny widths from underflowing
    log_fwd = -0.5 * ((x_t - (grid + shift)) / sd_fwd) ** 2
    log_marg = -0.5 * ((grid - marg_mean) / sd_marg) ** 2
    logp = log_fwd + log_marg
    p = np.exp(logp - logp.max())
    z = np.trapezoid(p, grid)
    dens = p / z
    norm_error = abs(float(np.trapezoid(dens, grid)) - 1.0)
    if norm_error > 1e-6:
        warnings.warn(f"grid too coarse: normalisation error {norm_error:.2e}", RuntimeWarning)
    return GridDensity(grid, dens, norm_error)


def tv_distance(grid, p, q) -> float:
    """Total variation ``0.5 * integral |p - q|`` on a common grid."""
    return 0.5 * float(np.trapezoid(np.abs(np.asarray(p) - np.asarray(q)), grid))


# -- finite differences -------------------------------------------------------


class KinkCrossed(ArithmeticError):
    """A finite-difference stencil straddled a non-differentiable point."""


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``f()`` with respect to array ``x``.

    ``x`` is perturbed in place and restored. ``f`` returns either a scalar or
    ``(scalar, signature)``; in the second form the signature (for instance the
    sign pattern of every ReLU input) must not change across a stencil,
    otherwise :class:`KinkCrossed` is raised since the difference quotient
    would not approximate a derivative there.
    """
    x = np.asarray(x)

    def call():
        r = f()
        return (r[0], np.asarray(r[1])) if isinstance(r, tuple) else (r, None)

    _, base_sig = call()
    g = np.zeros(x.shape, dtype=np.float64)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp, sp = call()
        x[i] = old - eps
        fm, sm = call()
        x[i] = old
        if base_sig is not None and not (np.array_equal(sp, base_sig) and np.array_equal(sm, base_sig)):
            raise KinkCrossed(f"signature changed when perturbing index {i}")
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom)
