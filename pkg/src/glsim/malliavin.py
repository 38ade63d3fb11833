"""Noise-to-state operators, the Malliavin matrix and its floor on low-mode cones.

Controls ``v`` live on the step grid ``r_i`` of a window ``[s, t]`` and the
noise space carries the trapezoidal inner product ``<v, v'> = sum_i w_i v_i . v'_i``.
With that choice

    A v      = sum_i w_i J_{r_i,t} G v_i
    (A* phi)_i = G^T K_{r_i,t} phi
    M        = A A* = sum_i w_i (J_{r_i,t} G)(J_{r_i,t} G)^T

hold exactly at the discrete level.  ``M`` is assembled with one backward
sweep of the discrete adjoint started from the identity, so the cost is one
trajectory replay on ``2n`` vectors at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ValidationError
from .sde import Stepper, Trajectory
from .spectral import _coeffs, space


def trapezoid_weights(n_intervals: int, dt: float) -> np.ndarray:
    w = np.full(n_intervals + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    if n_intervals == 0:
        w[:] = 0.0
    return w


@dataclass
class NoiseSpacePath:
    """A function on the step grid with values in R^{|Z0|}."""

    times: np.ndarray
    values: np.ndarray     # (n_nodes, q)
    weights: np.ndarray    # trapezoid weights

    def inner(self, other: "NoiseSpacePath") -> float:
        return float(np.sum(self.weights[:, None] * self.values * other.values))

    def norm(self) -> float:
        return math.sqrt(max(self.inner(self), 0.0))


@dataclass
class MalliavinMatrix:
    s: float
    t: float
    entries: np.ndarray
    quadrature: str = "trapezoid"

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("Malliavin matrix must be square")
        self.entries = 0.5 * (m + m.T)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def quad(self, phi) -> float:
        p = _coeffs(phi)
        return float(p @ self.entries @ p)


def _weight(st: Stepper, u: np.ndarray):
    w = st.weight(u)
    return None if w is None else w[..., None, :]


def sweep(st: Stepper, states: np.ndarray, noise: np.ndarray | None = None) -> dict:
    """One backward adjoint sweep from the identity over the window of ``states``.

    ``states`` has shape ``(n + 1, *batch, D)`` (nodes first).  Returns a dict
    with the Malliavin matrices ``M`` of shape ``(*batch, D, D)``, the dense
    tangent ``J`` of the whole window and, when the step increments ``noise``
    of shape ``(n, *batch, q)`` are given, ``S = sum_i J_{r_i,t} G dW_i`` so
    that the Ito integral of ``v = A* y`` is ``y . S``.
    """
    n = states.shape[0] - 1
    D = states.shape[-1]
    batch = states.shape[1:-1]
    w = trapezoid_weights(n, st.dt)
    V = np.broadcast_to(np.eye(D), batch + (D, D)).copy()
    M = np.zeros(batch + (D, D))
    S = np.zeros(batch + (D,)) if noise is not None else None
    for i in range(n, -1, -1):
        if i < n:
            V = st.adjoint_step(_weight(st, states[i]), V)
        B = V[..., st.idx] * st.beta            # J_{r_i,t} G  (D x q)
        M += w[i] * np.einsum("...iq,...jq->...ij", B, B)
        if S is not None and i < n:
            S += np.einsum("...iq,...q->...i", B, noise[i])
    return {"M": 0.5 * (M + np.swapaxes(M, -1, -2)), "J": V, "S": S}


def sweep_M(st: Stepper, states: np.ndarray) -> np.ndarray:
    """Malliavin matrices for the window spanned by ``states``, see :func:`sweep`."""
    return sweep(st, states)["M"]


def assemble_M(traj: Trajectory, s: float, t: float) -> MalliavinMatrix:
    i, j = traj.window(s, t)
    return MalliavinMatrix(s, t, sweep_M(traj.stepper(), traj.full_states()[i:j + 1]))


def assemble_batch(stepper: Stepper, states: np.ndarray) -> np.ndarray:
    """Ensemble version of :func:`assemble_M` on ``(n + 1, P, D)`` node states."""
    return sweep_M(stepper, states)


def assemble_factor(traj: Trajectory, s: float, t: float) -> np.ndarray:
    """Columns ``sqrt(w_i) J_{r_i,t} G theta_j`` built by forward tangent solves.

    Independent of the adjoint sweep; ``F @ F.T`` is the Malliavin matrix.
    Cost grows quadratically in the window length, so keep windows short.
    """
    i0, j0 = traj.window(s, t)
    st = traj.stepper()
    states = traj.full_states()
    n = j0 - i0
    D = 2 * traj.n_modes
    q = traj.forcing.size
    w = trapezoid_weights(n, traj.dt)
    X = np.zeros((n + 1, q, D))
    G = np.zeros((q, D))
    G[np.arange(q), st.idx] = st.beta
    X[0] = G
    for r in range(n):
        X[:r + 1] = st.tangent_step(st.weight(states[i0 + r]), X[:r + 1])
        X[r + 1] = G
    cols = np.sqrt(w)[:, None, None] * X
    return cols.reshape(-1, D).T


def apply_Astar(traj: Trajectory, s: float, t: float, phi) -> NoiseSpacePath:
    """``r -> G^T K_{r,t} phi`` on the step grid of ``[s, t]``."""
    i0, j0 = traj.window(s, t)
    st = traj.stepper()
    states = traj.full_states()
    n = j0 - i0
    p = np.array(_coeffs(phi), dtype=float)
    vals = np.empty((n + 1, traj.forcing.size))
    for r in range(n, -1, -1):
        if r < n:
            p = st.adjoint_step(st.weight(states[i0 + r]), p)
        vals[r] = st.beta * p[st.idx]
    return NoiseSpacePath(traj.dt * np.arange(i0, j0 + 1), vals, trapezoid_weights(n, traj.dt))


def apply_control_operator(traj: Trajectory, s: float, t: float, v) -> np.ndarray:
    """``A_{s,t} v = sum_i w_i J_{r_i,t} G v_i`` for node values ``v`` of shape (n+1, q)."""
    i0, j0 = traj.window(s, t)
    vals = v.values if isinstance(v, NoiseSpacePath) else np.asarray(v, dtype=float)
    n = j0 - i0
    if vals.shape != (n + 1, traj.forcing.size):
        raise ValidationError(f"control must have shape {(n + 1, traj.forcing.size)}")
    st = traj.stepper()
    states = traj.full_states()
    w = trapezoid_weights(n, traj.dt)
    y = st.inject(np.zeros(2 * traj.n_modes), vals[0], w[0])
    for r in range(n):
        y = st.tangent_step(st.weight(states[i0 + r]), y)
        y = st.inject(y, vals[r + 1], w[r + 1])
    return y


def quad_form_via_adjoint(traj: Trajectory, phi, T: float, s: float = 0.0) -> float:
    """``sum_l beta_l^2 int_s^T <ebar_l, K_{r,T} phi>^2 dr`` at the trapezoid rule."""
    a = apply_Astar(traj, s, T, phi)
    return a.inner(a)


def quad_QN(phi, N: int) -> float:
    """Low-mode mass ``sum_{0<|k|<=N} <phi, ebar_k>^2``."""
    p = _coeffs(phi)
    mask = space(p.size // 2).projector_mask(N)
    return float(np.sum(p[mask] ** 2))


def numerical_rank(M, threshold: float = 1e-8) -> int:
    """Number of eigenvalues above ``threshold * max(lambda_max, tiny)``."""
    m = M.entries if isinstance(M, MalliavinMatrix) else np.asarray(M)
    ev = np.linalg.eigvalsh(m)
    top = max(float(ev[-1]), np.finfo(float).tiny)
    return int(np.sum(ev > threshold * top))


@dataclass(frozen=True)
class ConeSpec:
    """``S_{alpha,N}``: unit vectors with ``|P_N phi|^2 >= alpha``."""

    alpha: float
    N: int

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValidationError("alpha must lie in (0, 1]")
        if self.N < 1:
            raise ValidationError("N must be a positive integer")

    def contains(self, phi, tol: float = 1e-12) -> bool:
        p = _coeffs(phi)
        return quad_QN(p, self.N) >= self.alpha * float(p @ p) - tol


@dataclass
class FloorReport:
    floor: float                  # min(dual bound, refined sampling minimum), >= 0
    dual_bound: float             # exact inf by S-lemma duality
    sampled_min: float            # best Rayleigh quotient found by sampling + refinement
    subspace_min: float           # lambda_min of M on range(P_N), an upper bound
    n_samples: int
    refinement_iters: int
    rayleigh: np.ndarray = field(repr=False)
    cone: ConeSpec = None
    frequency: dict = field(default_factory=dict)


def _project_cone(phi: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    p = np.where(mask, phi, 0.0)
    q = phi - p
    np2, nq2 = p @ p, q @ q
    tot = np2 + nq2
    if np2 >= alpha * tot:
        return phi / math.sqrt(tot)
    if np2 == 0.0:
        p = mask / math.sqrt(mask.sum())
        np2 = 1.0
    if nq2 == 0.0:
        return p / math.sqrt(np2)
    return math.sqrt(alpha) * p / math.sqrt(np2) + math.sqrt(1 - alpha) * q / math.sqrt(nq2)


def _dual_floor(m: np.ndarray, mask: np.ndarray, alpha: float) -> float:
    """``max_{mu >= 0} lambda_min(M - mu P_N) + mu alpha``.

    Equals the infimum of the Rayleigh quotient over the cone when D >= 3
    (S-lemma: the joint range of two quadratic forms on the sphere is convex).
    """
    P = np.diag(mask.astype(float))
    if alpha >= 1.0:
        sub = m[np.ix_(mask, mask)]
        return float(np.linalg.eigvalsh(sub)[0])
    if mask.all():
        return float(np.linalg.eigvalsh(m)[0])
    top = float(np.max(np.abs(np.linalg.eigvalsh(m)))) + 1e-300
    hi = top / (1.0 - alpha) * (1.0 + 1e-9)

    def neg(mu):
        return -(np.linalg.eigvalsh(m - mu * P)[0] + mu * alpha)

    res = minimize_scalar(neg, bounds=(0.0, hi), method="bounded",
                          options={"xatol": 1e-12 * max(hi, 1.0)})
    return float(max(-res.fun, -neg(0.0)))


def spectral_floor(M, cone: ConeSpec, budget: int = 256, rng=None,
                   refine_iters: int = 50) -> FloorReport:
    """Infimum of ``<M phi, phi>`` over the cone.

    ``budget`` is the number of random cone samples; each is refined by
    projected gradient descent on the Rayleigh quotient.  The sampled minimum is
    an upper bound on the true infimum; the dual bound is the exact value.
    """
    if budget <= 0:
        raise ValidationError("budget must be positive")
    m = M.entries if isinstance(M, MalliavinMatrix) else np.asarray(M, dtype=float)
    m = 0.5 * (m + m.T)
    D = m.shape[0]
    if cone.N > D // 2:
        raise ValidationError(f"cone level N={cone.N} exceeds resolution {D // 2}")
    rng = np.random.default_rng(0) if rng is None else rng
    mask = space(D // 2).projector_mask(cone.N)
    alpha = cone.alpha

    dual = _dual_floor(m, mask, alpha)
    sub = m[np.ix_(mask, mask)]
    evals, evecs = np.linalg.eigh(sub)
    subspace_min = float(evals[0])

    scale = float(np.max(np.abs(np.linalg.eigvalsh(m)))) + 1e-300
    step = 0.5 / scale
    quotients = np.empty(budget)
    for b in range(budget):
        if b == 0:
            phi = np.zeros(D)
            phi[mask] = evecs[:, 0]
        else:
            phi = _project_cone(rng.standard_normal(D), mask, alpha)
        for _ in range(refine_iters):
            rq = phi @ m @ phi
            grad = 2.0 * (m @ phi - rq * phi)
            phi = _project_cone(phi - step * grad, mask, alpha)
        quotients[b] = phi @ m @ phi
    sampled = float(quotients.min())
    floor = max(0.0, min(dual, sampled))
    return FloorReport(floor, dual, sampled, subspace_min, budget, refine_iters, quotients, cone)


def resolvent_checks(M, beta: float, factor: np.ndarray | None = None,
                     slack: float = 1e-8) -> dict:
    """Operator bounds for ``M = A A*`` and ``beta > 0`` with ``1 + slack`` tolerance.

    When ``factor`` (a matrix ``F`` with ``F F^T = M``, e.g. from
    :func:`assemble_factor`) is supplied, the ``A``-norms are computed from
    ``F`` directly instead of from the eigenvalues of ``M``.
    """
    if not beta > 0:
        raise ValidationError("beta must be positive")
    m = M.entries if isinstance(M, MalliavinMatrix) else np.asarray(M, dtype=float)
    ev, Q = np.linalg.eigh(0.5 * (m + m.T))
    ev = np.clip(ev, 0.0, None)
    inv_sqrt = (Q / np.sqrt(ev + beta)) @ Q.T
    if factor is None:
        a_norm = math.sqrt(float(np.max(ev / (ev + beta))))
        a_star_norm = a_norm
    else:
        a_star_norm = float(np.linalg.norm(factor.T @ inv_sqrt, 2))
        a_norm = float(np.linalg.norm(inv_sqrt @ factor, 2))
    values = {
        "Astar_Rinvsqrt": (a_star_norm, 1.0),
        "Rinvsqrt_A": (a_norm, 1.0),
        "Rinvsqrt": (float(1.0 / math.sqrt(ev[0] + beta)), beta ** -0.5),
        "Rinv": (float(1.0 / (ev[0] + beta)), 1.0 / beta),
    }
    report = {k: {"value": v, "bound": b, "holds": bool(v <= b * (1 + slack))}
              for k, (v, b) in values.items()}
    report["all_hold"] = all(r["holds"] for r in report.values())
    return report


def epsilon_statistics(floors, eps_grid) -> dict:
    """Empirical ``r(eps) = P(floor < eps)`` for each ``eps`` in the grid."""
    vals = np.array([f.floor if isinstance(f, FloorReport) else float(f) for f in floors])
    if vals.size == 0:
        raise ValidationError("empty ensemble")
    eps = np.sort(np.asarray(eps_grid, dtype=float))
    r = np.array([np.mean(vals < e) for e in eps])
    return {"eps": eps, "r": r, "n": int(vals.size)}
