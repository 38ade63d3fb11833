"""Small statistics helpers shared by the experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ExpFit:
    """``y ~ exp(intercept - rate * t)`` fitted by least squares on ``log y``."""

    rate: float
    intercept: float
    r2: float
    n: int


def exp_fit(t, y) -> ExpFit:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(y) & (y > 0)
    if keep.sum() < 2:
        raise ValidationError("need at least two positive points for an exponential fit")
    t, ly = t[keep], np.log(y[keep])
    slope, icpt = np.polyfit(t, ly, 1)
    resid = ly - (slope * t + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return ExpFit(float(-slope), float(icpt), r2, int(t.size))


def batch_means(x, n_batches: int = 20) -> tuple:
    """Mean and batch-means standard error of a correlated series."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 * n_batches:
        raise ValidationError("series too short for the requested number of batches")
    m = x.size // n_batches
    b = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(x.mean()), float(b.std(ddof=1) / math.sqrt(n_batches))


def batch_means_variance(x, dt: float, n_batches: int = 20) -> float:
    """Estimate ``lim (1/T) E (int_0^T (x - m) dt)^2`` from one sampled path."""
    x = np.asarray(x, dtype=float)
    m = x.size // n_batches
    if m < 2:
        raise ValidationError("series too short for the requested number of batches")
    b = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(m * dt * b.var(ddof=1))


def power_law_fit(x, y) -> tuple:
    """Slope and intercept of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    slope, icpt = np.polyfit(lx, ly, 1)
    return float(slope), float(icpt)
