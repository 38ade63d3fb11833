"""Forced-mode closure, the mode-generation hypothesis, and trig bracket algebra.

Trigonometric monomials are written ``cos(k z + m pi/2)`` with ``m`` in {0, 1};
``m = 1`` is ``-sin(kz)``.  A :class:`TrigPoly` keeps them in canonical form
with ``k >= 0`` (``k = 0`` only for the constant ``cos 0 = 1``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import RecombinationError, ResolutionError, ValidationError
from .spectral import SQRT_PI, SpectralField, mode_index, space

UNREACHED = None


@dataclass(frozen=True)
class ModeSet:
    modes: tuple

    def __init__(self, modes):
        ms = tuple(sorted({int(k) for k in modes}))
        if 0 in ms:
            raise ValidationError("mode sets cannot contain 0")
        object.__setattr__(self, "modes", ms)

    def __iter__(self):
        return iter(self.modes)

    def __len__(self):
        return len(self.modes)

    def __contains__(self, k):
        return k in self.modes

    @property
    def symmetric(self) -> bool:
        s = set(self.modes)
        return all(-k in s for k in s)


def znext(prev, z0) -> ModeSet:
    """``{k + l + m : k in prev, l, m in z0} \\ {0}``."""
    z0 = list(z0)
    pair = {a + b for a in z0 for b in z0}
    out = {k + s for k in prev for s in pair}
    out.discard(0)
    return ModeSet(out)


@dataclass
class HypothesisReport:
    symmetric: bool
    finite: bool
    coverage: dict
    cutoff: int
    depth_limit: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.symmetric and self.finite and all(
            v is not UNREACHED for v in self.coverage.values())

    @property
    def unreached(self) -> list:
        return sorted(k for k, v in self.coverage.items() if v is UNREACHED)

    def failures(self) -> list:
        out = []
        if not self.symmetric:
            out.append("symmetry: k in Z0 does not imply -k in Z0")
        if not self.finite:
            out.append("finiteness: Z0 is not finite")
        if self.unreached:
            out.append(f"coverage: {len(self.unreached)} modes unreached "
                       f"within depth {self.depth_limit} (first: {self.unreached[0]})")
        return out

    def to_record(self) -> dict:
        return {
            "passed": self.passed,
            "symmetric": self.symmetric,
            "finite": self.finite,
            "cutoff": self.cutoff,
            "depth_limit": self.depth_limit,
            "coverage": {str(k): ("UNREACHED" if v is UNREACHED else v)
                         for k, v in sorted(self.coverage.items())},
            "failures": self.failures(),
        }


def check_hypothesis(z0, cutoff: int, n_max: int) -> HypothesisReport:
    """Finite certificate for the mode-generation hypothesis up to ``|k| <= cutoff``.

    Coverage maps each ``0 < |k| <= cutoff`` to the first ``n <= n_max`` with
    ``k`` in ``Z_n``, or ``UNREACHED``.
    """
    z0 = ModeSet(z0)
    if len(z0) == 0:
        raise ValidationError("Z0 is empty")
    if cutoff < 1 or n_max < 1:
        raise ValidationError("cutoff and n_max must be >= 1")
    targets = [k for k in range(-cutoff, cutoff + 1) if k != 0]
    coverage = {k: UNREACHED for k in targets}
    current = z0
    for n in range(n_max + 1):
        if n > 0:
            current = znext(current, z0)
        for k in current:
            if abs(k) <= cutoff and coverage[k] is UNREACHED:
                coverage[k] = n
        if all(v is not UNREACHED for v in coverage.values()):
            break
    return HypothesisReport(symmetric=z0.symmetric, finite=True, coverage=coverage,
                            cutoff=cutoff, depth_limit=n_max)


@dataclass(frozen=True)
class BracketTerm:
    """``cos(freq z + phase pi/2)``."""

    freq: int
    phase: int = 0

    def __post_init__(self):
        if self.phase not in (0, 1):
            raise ValidationError("phase must be 0 or 1")


def _monomial(k: int, p: int):
    """Canonical ``(k, m), sign`` for ``cos(kz + p pi/2)`` with any integer p."""
    p %= 4
    sign = 1.0
    if p >= 2:
        sign, p = -1.0, p - 2
    if k < 0:
        # cos(-|k|z + p pi/2) = cos(|k|z - p pi/2); for p=1 that is -cos(|k|z + pi/2)
        k = -k
        if p == 1:
            sign = -sign
    if k == 0 and p == 1:
        return None, 0.0
    return (k, p), sign


class TrigPoly:
    """Finite real combination of ``cos(kz + m pi/2)``, canonical ``k >= 0``."""

    def __init__(self, terms=None, tol: float = 0.0):
        self.terms = {}
        for (k, m), c in (terms or {}).items():
            self._add(k, m, c)
        if tol:
            self.terms = {key: c for key, c in self.terms.items() if abs(c) > tol}

    def _add(self, k, p, c):
        key, sign = _monomial(k, p)
        if key is None or c == 0:
            return
        v = self.terms.get(key, 0.0) + sign * c
        if v == 0.0:
            self.terms.pop(key, None)
        else:
            self.terms[key] = v

    @classmethod
    def monomial(cls, term: BracketTerm, coeff: float = 1.0) -> "TrigPoly":
        return cls({(term.freq, term.phase): coeff})

    def __add__(self, other):
        out = TrigPoly(self.terms)
        for (k, m), c in other.terms.items():
            out._add(k, m, c)
        return out

    def __sub__(self, other):
        return self + other * -1.0

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return TrigPoly({key: c * other for key, c in self.terms.items()})
        out = TrigPoly()
        for (k1, m1), c1 in self.terms.items():
            for (k2, m2), c2 in other.terms.items():
                # cos a cos b = (cos(a+b) + cos(a-b)) / 2
                c = 0.5 * c1 * c2
                out._add(k1 + k2, m1 + m2, c)
                out._add(k1 - k2, m1 - m2, c)
        return out

    __rmul__ = __mul__

    def coefficient(self, k: int, m: int = 0) -> float:
        return self.terms.get((k, m), 0.0)

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.zeros_like(z)
        for (k, m), c in self.terms.items():
            out += c * np.cos(k * z + 0.5 * np.pi * m)
        return out

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def to_field(self, n_modes: int) -> SpectralField:
        """Project onto H (the constant term is dropped)."""
        c = np.zeros(2 * n_modes)
        for (k, m), v in self.terms.items():
            if k == 0:
                continue
            if k > n_modes:
                raise ResolutionError(f"frequency {k} exceeds {n_modes} modes")
            if m == 0:
                c[mode_index(-k, n_modes)] += SQRT_PI * v
            else:  # cos(kz + pi/2) = -sin(kz)
                c[mode_index(k, n_modes)] -= SQRT_PI * v
        return SpectralField(c)

    def __repr__(self):
        body = " + ".join(f"{c:.6g}*cos({k}z+{m}pi/2)" for (k, m), c in sorted(self.terms.items()))
        return f"TrigPoly({body or '0'})"


def product_to_sum(a: BracketTerm, b: BracketTerm) -> TrigPoly:
    return TrigPoly.monomial(a) * TrigPoly.monomial(b)


def _cos_field(k: int, m: int, n_modes: int) -> SpectralField:
    if k == 0:
        raise ValidationError("cos(0z + m pi/2) is not a mean-zero field")
    return TrigPoly({(k, m): 1.0}).to_field(n_modes)


def bracket_I(k: int, m: int, u: SpectralField) -> SpectralField:
    """``[F(u), f] = A f + 3 u^2 f - f`` for ``f = cos(kz + m pi/2)``."""
    n = u.n_modes
    if 3 * abs(k) > n:
        raise ResolutionError(f"|k|={abs(k)} needs at least {3 * abs(k)} modes")
    if m not in (0, 1):
        raise ValidationError("phase must be 0 or 1")
    f = _cos_field(k, m, n)
    sp = space(n)
    ug = sp.to_grid_array(u.coeffs)
    lin = (sp.gamma - 1.0) * f.coeffs
    return SpectralField(lin + sp.to_spectral_array(3.0 * ug * ug * sp.to_grid_array(f.coeffs)))


def bracket_J(k: int, l: int, m: int, mp: int, u: SpectralField) -> SpectralField:
    """``6 u cos(kz + m pi/2) cos(lz + m' pi/2)`` projected onto the field's modes."""
    n = u.n_modes
    prod = product_to_sum(BracketTerm(k, m), BracketTerm(l, mp))
    sp = space(n)
    pg = 6.0 * prod.evaluate(sp.points)
    return SpectralField(sp.to_spectral_array(sp.to_grid_array(u.coeffs) * pg))


def bracket_K(k: int, l: int, j: int, m: int, mp: int, mpp: int) -> TrigPoly:
    """``6 cos(kz + m pi/2) cos(lz + m' pi/2) cos(jz + m'' pi/2)``, independent of u."""
    return (product_to_sum(BracketTerm(k, m), BracketTerm(l, mp))
            * TrigPoly.monomial(BracketTerm(j, mpp))) * 6.0


PHASE_TRIPLES = tuple(itertools.product((0, 1), repeat=3))


@dataclass
class Recombination:
    freqs: tuple
    cos_coeffs: np.ndarray    # over PHASE_TRIPLES, reproduces cos((k+l+j)z)
    sin_coeffs: np.ndarray    # over PHASE_TRIPLES, reproduces sin((k+l+j)z)
    residual: float
    rank: int

    def combination(self, which: str = "cos") -> TrigPoly:
        coeffs = self.cos_coeffs if which == "cos" else self.sin_coeffs
        out = TrigPoly()
        for c, ph in zip(coeffs, PHASE_TRIPLES):
            if c != 0.0:
                out = out + bracket_K(*self.freqs, *ph) * float(c)
        return out


def solve_recombination(k: int, l: int, j: int, tol: float = 1e-10) -> Recombination:
    """Coefficients over the 8 phase triples reproducing cos/sin((k+l+j)z).

    Least squares on the canonical monomial basis; raises
    :class:`RecombinationError` if the best fit misses by more than ``tol``.
    """
    polys = [bracket_K(k, l, j, *ph) for ph in PHASE_TRIPLES]
    total = k + l + j
    target_cos = TrigPoly({(total, 0): 1.0})
    # sin(x) = cos(x - pi/2) = -cos(x + pi/2)
    target_sin = TrigPoly({(total, 1): -1.0})
    keys = sorted(set().union(*(p.terms for p in polys), target_cos.terms, target_sin.terms))
    index = {key: i for i, key in enumerate(keys)}
    mat = np.zeros((len(keys), len(polys)))
    for col, p in enumerate(polys):
        for key, c in p.terms.items():
            mat[index[key], col] = c
    rhs = np.zeros((len(keys), 2))
    for col, t in enumerate((target_cos, target_sin)):
        for key, c in t.terms.items():
            rhs[index[key], col] = c
    sol, _, rank, _ = np.linalg.lstsq(mat, rhs, rcond=None)
    residual = float(np.max(np.abs(mat @ sol - rhs))) if keys else 0.0
    if residual > tol:
        raise RecombinationError(
            f"no exact recombination for ({k},{l},{j}): residual {residual:.3e}")
    return Recombination((k, l, j), sol[:, 0], sol[:, 1], residual, int(rank))


def recombination_residual(rec: Recombination) -> float:
    """Max coefficient error of the expanded combinations against their targets."""
    total = sum(rec.freqs)
    err_c = rec.combination("cos") - TrigPoly({(total, 0): 1.0})
    err_s = rec.combination("sin") - TrigPoly({(total, 1): -1.0})
    return max(err_c.max_abs_coeff(), err_s.max_abs_coeff())


def closure_depths(z0, cutoff: int, n_max: int) -> list:
    """Sets ``Z_0 ... Z_n`` restricted to ``|k| <= cutoff`` (for reporting)."""
    z0 = ModeSet(z0)
    sets = [z0]
    for _ in range(n_max):
        sets.append(znext(sets[-1], z0))
    return [ModeSet(k for k in s if abs(k) <= cutoff) for s in sets]


__all__ = [
    "UNREACHED", "ModeSet", "znext", "HypothesisReport", "check_hypothesis",
    "BracketTerm", "TrigPoly", "product_to_sum", "bracket_I", "bracket_J", "bracket_K",
    "PHASE_TRIPLES", "Recombination", "solve_recombination", "recombination_residual",
    "closure_depths",
]
