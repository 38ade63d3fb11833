"""Mean-zero fields on the torus R/2piZ in a real sine/cosine basis.

A field with ``n`` modes is a length ``2n`` coefficient vector in the
unit-normalized basis ``ebar_k = e_k / sqrt(pi)`` with ``e_k = sin(kz)`` for
``k > 0`` and ``e_k = cos(|k|z)`` for ``k < 0``.  Entries are stored in
ascending wavenumber order::

    position:   0     1    ...  n-1   n   n+1  ...  2n-1
    k:         -n   -n+1   ...  -1    1    2   ...   n

so the coefficient vector is an orthonormal representation: the Euclidean
norm of the coefficients equals the L2(T) norm of the function.

Array-level routines accept arbitrary leading batch dimensions; the
``SpectralField`` wrapper is the value type used at API boundaries.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import ResolutionError, ValidationError

SQRT_PI = math.sqrt(math.pi)

__all__ = [
    "SQRT_PI",
    "SpectralField",
    "GridField",
    "SobolevIndex",
    "Space",
    "space",
    "wavenumbers",
    "mode_index",
    "basis",
    "to_grid",
    "to_spectral",
    "apply_A",
    "norm",
    "inner",
    "project",
    "cubic",
    "multiply",
    "default_grid_size",
]


def wavenumbers(n_modes: int) -> np.ndarray:
    """Wavenumber ``k`` at each coefficient position."""
    return np.concatenate([np.arange(-n_modes, 0), np.arange(1, n_modes + 1)])


def mode_index(k: int, n_modes: int) -> int:
    """Coefficient position of wavenumber ``k``."""
    if k == 0 or abs(k) > n_modes:
        raise ValidationError(f"mode {k} not representable with {n_modes} modes")
    return k + n_modes if k < 0 else k + n_modes - 1


def default_grid_size(n_modes: int) -> int:
    """Smallest power of two >= 4n+1 (exact dealiasing of a cubic)."""
    return 1 << (4 * n_modes).bit_length()


class Space:
    """Transforms and diagonal operators for a fixed ``(n_modes, grid_size)``.

    Use :func:`space` to get a cached instance.
    """

    def __init__(self, n_modes: int, grid_size: int | None = None):
        if n_modes < 1:
            raise ValidationError("n_modes must be positive")
        self.n_modes = int(n_modes)
        self.grid_size = int(grid_size) if grid_size is not None else default_grid_size(n_modes)
        if self.grid_size < 2 * self.n_modes + 1:
            raise ResolutionError(
                f"grid of {self.grid_size} points cannot resolve {n_modes} modes")
        self.dim = 2 * self.n_modes
        self.k = wavenumbers(self.n_modes)
        self.gamma = (self.k ** 2).astype(float)
        self.points = 2.0 * np.pi * np.arange(self.grid_size) / self.grid_size
        # forward: coefficient -> rfft bin, see to_grid_array
        self._fwd = 0.5 * self.grid_size / SQRT_PI
        self._inv = 2.0 * SQRT_PI / self.grid_size

    def __repr__(self):
        return f"Space(n_modes={self.n_modes}, grid_size={self.grid_size})"

    @property
    def dealiased(self) -> bool:
        return self.grid_size >= 4 * self.n_modes + 1

    def to_grid_array(self, c: np.ndarray) -> np.ndarray:
        n = self.n_modes
        c = np.asarray(c, dtype=float)
        spec = np.zeros(c.shape[:-1] + (self.grid_size // 2 + 1,), dtype=complex)
        # cosine part lives at positions n-1 ... 0 (frequencies 1 ... n)
        spec[..., 1:n + 1].real = c[..., n - 1::-1]
        spec[..., 1:n + 1].imag = -c[..., n:]
        spec *= self._fwd
        return sfft.irfft(spec, n=self.grid_size, axis=-1, overwrite_x=True)

    def to_spectral_array(self, g: np.ndarray, return_mean: bool = False):
        n = self.n_modes
        spec = sfft.rfft(np.asarray(g, dtype=float), axis=-1)
        out = np.empty(spec.shape[:-1] + (2 * n,))
        out[..., :n] = spec[..., n:0:-1].real
        out[..., n:] = -spec[..., 1:n + 1].imag
        out *= self._inv
        if return_mean:
            return out, spec[..., 0].real / self.grid_size
        return out

    def cubic_array(self, c: np.ndarray) -> np.ndarray:
        g = self.to_grid_array(c)
        return self.to_spectral_array(g * g * g)

    def multiply_array(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.to_spectral_array(self.to_grid_array(a) * self.to_grid_array(b))

    def projector_mask(self, n: int) -> np.ndarray:
        if not 1 <= n <= self.n_modes:
            raise ValidationError(f"projection level {n} outside 1..{self.n_modes}")
        return np.abs(self.k) <= n


@lru_cache(maxsize=64)
def space(n_modes: int, grid_size: int | None = None) -> Space:
    return Space(n_modes, grid_size)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Coefficients of a mean-zero field, see the module docstring for layout."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size == 0 or c.size % 2:
            raise ValidationError("coefficient vector must be 1-D with even length")
        if not np.all(np.isfinite(c)):
            raise ValidationError("non-finite coefficients")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def n_modes(self) -> int:
        return self.coeffs.size // 2

    @classmethod
    def zeros(cls, n_modes: int) -> "SpectralField":
        return cls(np.zeros(2 * n_modes))

    @classmethod
    def from_modes(cls, n_modes: int, modes: dict) -> "SpectralField":
        """Build from ``{k: coefficient}`` (coefficients w.r.t. ``ebar_k``)."""
        c = np.zeros(2 * n_modes)
        for k, v in modes.items():
            c[mode_index(int(k), n_modes)] = v
        return cls(c)

    def coeff(self, k: int) -> float:
        return float(self.coeffs[mode_index(k, self.n_modes)])

    def __add__(self, other):
        return SpectralField(self.coeffs + _coeffs(other))

    def __sub__(self, other):
        return SpectralField(self.coeffs - _coeffs(other))

    def __mul__(self, scalar):
        return SpectralField(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(-self.coeffs)

    def __eq__(self, other):
        return isinstance(other, SpectralField) and np.array_equal(self.coeffs, other.coeffs)

    def __repr__(self):
        return f"SpectralField(n_modes={self.n_modes})"


def _coeffs(f) -> np.ndarray:
    return f.coeffs if isinstance(f, SpectralField) else np.asarray(f, dtype=float)


def basis(k: int, n_modes: int) -> SpectralField:
    """The unit vector ``ebar_k``."""
    return SpectralField.from_modes(n_modes, {k: 1.0})


@dataclass(frozen=True, eq=False)
class GridField:
    """Samples at ``z_j = 2 pi j / M``."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 1:
            raise ValidationError("grid samples must be 1-D")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def size(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class SobolevIndex:
    """``family='H'``: weights (1+k^2)^sigma.  ``family='V'``: weights (k^2)^sigma."""

    sigma: float = 0.0
    family: str = "H"

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValidationError("sigma must be finite and non-negative")
        if self.family not in ("H", "V"):
            raise ValidationError("family must be 'H' or 'V'")

    def weights(self, gamma: np.ndarray) -> np.ndarray:
        base = 1.0 + gamma if self.family == "H" else gamma
        return base ** self.sigma


def to_grid(f: SpectralField, grid_size: int | None = None) -> GridField:
    sp = space(f.n_modes, grid_size)
    if not sp.dealiased:
        raise ResolutionError(f"grid size must be >= {4 * f.n_modes + 1}")
    return GridField(sp.to_grid_array(f.coeffs))


def to_spectral(g: GridField, n_modes: int, tol: float = 1e-12) -> SpectralField:
    if g.size < 4 * n_modes + 1:
        raise ResolutionError(
            f"{g.size} samples inconsistent with {n_modes} modes (need >= {4 * n_modes + 1})")
    if not np.all(np.isfinite(g.samples)):
        raise ValidationError("non-finite grid samples")
    c, mean = space(n_modes, g.size).to_spectral_array(g.samples, return_mean=True)
    scale = max(1.0, float(np.max(np.abs(g.samples))))
    if abs(mean) > tol * scale:
        warnings.warn(f"discarding mode-0 content {mean:.3e} (fields are mean-zero)",
                      RuntimeWarning, stacklevel=2)
    return SpectralField(c)


def apply_A(f: SpectralField) -> SpectralField:
    """``A = -Laplacian``: coefficient at k times k^2."""
    return SpectralField(f.coeffs * space(f.n_modes).gamma)


def norm(f, idx: SobolevIndex | None = None) -> float:
    c = _coeffs(f)
    if idx is None or idx.sigma == 0:
        return float(np.sqrt(np.dot(c, c)))
    gamma = space(c.size // 2).gamma
    return float(np.sqrt(np.dot(idx.weights(gamma), c * c)))


def inner(f, g) -> float:
    return float(np.dot(_coeffs(f), _coeffs(g)))


def project(f: SpectralField, n: int, side: str = "P") -> SpectralField:
    """``side='P'`` keeps 0<|k|<=n, ``side='Q'`` keeps |k|>n."""
    mask = space(f.n_modes).projector_mask(n)
    if side in ("P", "P_N"):
        return SpectralField(np.where(mask, f.coeffs, 0.0))
    if side in ("Q", "Q_N"):
        return SpectralField(np.where(mask, 0.0, f.coeffs))
    raise ValidationError(f"unknown projection side {side!r}")


def cubic(f: SpectralField) -> SpectralField:
    """Coefficients of U^3 truncated to the field's modes, alias-free."""
    return SpectralField(space(f.n_modes).cubic_array(f.coeffs))


def multiply(f: SpectralField, g: SpectralField) -> SpectralField:
    if f.n_modes != g.n_modes:
        raise ValidationError("mode counts differ")
    return SpectralField(space(f.n_modes).multiply_array(f.coeffs, g.coeffs))
