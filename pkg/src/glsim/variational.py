"""Tangent, adjoint and second-variation propagation along a stored trajectory.

All three are exact derivatives (or transposes) of the discrete step in
:mod:`glsim.sde`, so duality and finite-difference checks against the
nonlinear solver hold at the level of the discretization, not just in the
``dt -> 0`` limit.  The tangent map of one step is

    xi -> E xi - h * P(3 U_i^2 xi)

with ``U_i`` the state at the start of the step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .sde import Trajectory
from .spectral import SpectralField, _coeffs


@dataclass(frozen=True)
class TangentState:
    xi: SpectralField
    s: float
    t: float


@dataclass(frozen=True)
class AdjointState:
    phi: SpectralField
    s: float
    t: float


def _vec(x, dim: int) -> np.ndarray:
    v = np.array(_coeffs(x), dtype=float)
    if v.shape[-1] != dim:
        raise ValidationError(f"vector of length {v.shape[-1]} does not match dimension {dim}")
    return v


def tangent_steps(traj: Trajectory, i: int, j: int, xi: np.ndarray, callback=None) -> np.ndarray:
    """Apply the tangent steps ``i .. j-1`` to ``xi`` (any leading batch shape).

    ``callback(step, value)`` is called with the state after each step.
    """
    st = traj.stepper()
    states = traj.full_states()
    x = np.array(xi, dtype=float)
    for r in range(i, j):
        x = st.tangent_step(st.weight(states[r]), x)
        if callback is not None:
            callback(r + 1, x)
    return x


def adjoint_steps(traj: Trajectory, i: int, j: int, phi: np.ndarray) -> np.ndarray:
    """Transpose of :func:`tangent_steps` on the same window."""
    st = traj.stepper()
    states = traj.full_states()
    x = np.array(phi, dtype=float)
    for r in range(j - 1, i - 1, -1):
        x = st.adjoint_step(st.weight(states[r]), x)
    return x


def propagate_tangent(traj: Trajectory, s: float, t: float, xi) -> SpectralField:
    """``J_{s,t} xi``."""
    i, j = traj.window(s, t)
    return SpectralField(tangent_steps(traj, i, j, _vec(xi, 2 * traj.n_modes)))


def propagate_adjoint(traj: Trajectory, s: float, t: float, phi) -> SpectralField:
    """``K_{s,t} phi = J_{s,t}^T phi`` (discrete adjoint)."""
    i, j = traj.window(s, t)
    return SpectralField(adjoint_steps(traj, i, j, _vec(phi, 2 * traj.n_modes)))


def tangent_matrix(traj: Trajectory, s: float, t: float) -> np.ndarray:
    """Dense ``J_{s,t}`` (columns are images of the basis vectors)."""
    i, j = traj.window(s, t)
    D = 2 * traj.n_modes
    # rows of the batch are the propagated basis vectors, i.e. J^T
    return tangent_steps(traj, i, j, np.eye(D)).T


def propagate_second(traj: Trajectory, s: float, t: float, xi, xi2) -> SpectralField:
    """Second variation ``J^{(2)}_{s,t}(xi, xi2)`` with zero initial value."""
    i, j = traj.window(s, t)
    D = 2 * traj.n_modes
    a, b = _vec(xi, D), _vec(xi2, D)
    st = traj.stepper()
    states = traj.full_states()
    sig = np.zeros(D)
    for r in range(i, j):
        u = states[r]
        w = st.weight(u)
        sig = st.second_step(u, w, a, b, sig)
        a = st.tangent_step(w, a)
        b = st.tangent_step(w, b)
    return SpectralField(sig)


def malliavin_derivative(traj: Trajectory, s: float, T: float, j: int) -> SpectralField:
    """``D^j_s U_T = J_{s,T} G theta_j`` for channel ``j`` (an index into the forced modes)."""
    q = traj.forcing.size
    if not (isinstance(j, (int, np.integer)) and 0 <= j < q):
        raise ValidationError(f"channel index {j!r} outside 0..{q - 1}")
    g = np.zeros(2 * traj.n_modes)
    g[traj.forcing.indices(traj.n_modes)[j]] = traj.forcing.amps[j]
    return propagate_tangent(traj, s, T, g)


def tangent_norm_series(traj: Trajectory, s: float, t: float, xi) -> np.ndarray:
    """``|J_{s,r} xi|`` at every step ``r`` of the window, starting with ``|xi|``."""
    i, j = traj.window(s, t)
    x = _vec(xi, 2 * traj.n_modes)
    out = [np.linalg.norm(x, axis=-1)]
    tangent_steps(traj, i, j, x, callback=lambda _, v: out.append(np.linalg.norm(v, axis=-1)))
    return np.array(out)
