"""Bounded Lipschitz test functionals of finitely many modes.

Each observable works on coefficient arrays with arbitrary leading batch
dimensions and provides its (almost-everywhere) gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .spectral import mode_index, space


@dataclass(frozen=True)
class Constant:
    c: float = 1.0

    def value(self, u: np.ndarray) -> np.ndarray:
        return np.full(np.shape(u)[:-1], float(self.c))

    def grad(self, u: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(u, dtype=float))

    def describe(self) -> dict:
        return {"kind": "constant", "c": self.c}


@dataclass(frozen=True)
class CappedLowModes:
    """``Phi(U) = min(1, |P_N U| / delta)``."""

    delta: float = 1.0
    N: int = 2

    def __post_init__(self):
        if not self.delta > 0 or self.N < 1:
            raise ValidationError("need delta > 0 and N >= 1")

    def _mask(self, u):
        return space(np.shape(u)[-1] // 2).projector_mask(self.N)

    def value(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        r = np.linalg.norm(np.where(self._mask(u), u, 0.0), axis=-1)
        return np.minimum(1.0, r / self.delta)

    def grad(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        p = np.where(self._mask(u), u, 0.0)
        r = np.linalg.norm(p, axis=-1, keepdims=True)
        active = (r < self.delta) & (r > 0)
        return np.where(active, p / (self.delta * np.where(r > 0, r, 1.0)), 0.0)

    def describe(self) -> dict:
        return {"kind": "capped_low_modes", "delta": self.delta, "N": self.N}


@dataclass(frozen=True)
class ClippedMode:
    """``Phi(U) = clip(<U, ebar_k> / delta, -1, 1)``."""

    k: int = 1
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0 or self.k == 0:
            raise ValidationError("need delta > 0 and k != 0")

    def value(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.clip(u[..., mode_index(self.k, u.shape[-1] // 2)] / self.delta, -1.0, 1.0)

    def grad(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        i = mode_index(self.k, u.shape[-1] // 2)
        g = np.zeros_like(u)
        g[..., i] = np.where(np.abs(u[..., i]) < self.delta, 1.0 / self.delta, 0.0)
        return g

    def describe(self) -> dict:
        return {"kind": "clipped_mode", "k": self.k, "delta": self.delta}


_KINDS = {"constant": Constant, "capped_low_modes": CappedLowModes, "clipped_mode": ClippedMode}


def from_descriptor(desc: dict):
    """Build an observable from ``{"kind": ..., **params}``."""
    desc = dict(desc)
    kind = desc.pop("kind", None)
    if kind not in _KINDS:
        raise ValidationError(f"unknown observable kind {kind!r}; choose from {sorted(_KINDS)}")
    try:
        return _KINDS[kind](**desc)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for observable {kind!r}: {exc}") from None
