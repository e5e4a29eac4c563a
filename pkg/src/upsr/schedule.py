"""Shift/noise schedule: eta_0..eta_T, alpha_t = eta_t - eta_{t-1}, kappa."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kappa: float
    eta1: float
    etaT: float
    p: float
    eta: np.ndarray  # length T + 1, eta[0] == 0

    def eta_at(self, t: int) -> float:
        return eta(self, t)

    def alpha_at(self, t: int) -> float:
        return alpha(self, t)

    @property
    def alphas(self) -> np.ndarray:
        return np.diff(self.eta)

    def to_dict(self) -> dict:
        return {"T": self.T, "kappa": self.kappa, "eta1": self.eta1,
                "etaT": self.etaT, "p": self.p}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "eta", "alpha"])
        for t in range(self.T + 1):
            a = "" if t == 0 else repr(float(self.eta[t] - self.eta[t - 1]))
            writer.writerow([t, repr(float(self.eta[t])), a])
        return buf.getvalue()


def build_schedule(T: int = 5, kappa: float = 2.0, eta1: float = 0.001,
                   etaT: float = 0.9999, p: float = 0.3) -> NoiseSchedule:
    """Geometric schedule in sqrt(eta) with a power-law time warp.

    ``sqrt(eta_t) = sqrt(eta1) * (sqrt(etaT)/sqrt(eta1)) ** (((t-1)/(T-1)) ** p)``
    for ``t = 1..T``; ``p < 1`` front-loads the growth.
    """
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValueError(f"T must be an integer >= 1, got {T!r}")
    if not kappa > 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    if not (0 < eta1 < etaT <= 1):
        raise ValueError(f"need 0 < eta1 < etaT <= 1, got eta1={eta1}, etaT={etaT}")
    if not p > 0:
        raise ValueError(f"p must be > 0, got {p}")

    eta = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        eta[1] = etaT
    else:
        frac = (np.arange(T, dtype=np.float64) / (T - 1)) ** p
        ratio = math.sqrt(etaT) / math.sqrt(eta1)
        eta[1:] = (math.sqrt(eta1) * ratio ** frac) ** 2
        # pin the endpoints against rounding in pow/sqrt
        eta[1], eta[T] = eta1, etaT
    if np.any(np.diff(eta) <= 0):
        raise ValueError("schedule is not strictly increasing for these parameters")
    eta.setflags(write=False)
    return NoiseSchedule(int(T), float(kappa), float(eta1), float(etaT), float(p), eta)


def eta(s: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise IndexError(f"step {t} outside 0..{s.T}")
    return float(s.eta[t])


def alpha(s: NoiseSchedule, t: int) -> float:
    if not 1 <= t <= s.T:
        raise IndexError(f"step {t} outside 1..{s.T}")
    return float(s.eta[t] - s.eta[t - 1])


def sigma_max(s: NoiseSchedule) -> float:
    return s.kappa * math.sqrt(s.eta[s.T])
