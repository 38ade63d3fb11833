"""Iterative control of the tangent residual.

Time is cut into unit blocks.  On the control block ``[n, n+1]`` (``n`` even)
the control is

    v = A*_{n,n+1} (M + beta I)^{-1} J_{n,n+1} rho_n

and on the rest block ``[n+1, n+2]`` it vanishes.  Because ``A A* = M`` holds
exactly on the step grid, the residual ``rho_t = J_{0,t} xi - A_{0,t} v`` obeys

    rho_{n+1} = R^beta J_{n,n+1} rho_n,      R^beta = beta (M + beta I)^{-1}
    rho_{n+2} = J_{n+1,n+2} rho_{n+1}
              = J Q_N R^beta J rho_n  +  J P_N R^beta J rho_n  =  rho^H + rho^L.

Everything below is written for a batch of independent members; the
single-trajectory functions are thin wrappers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExhausted, ValidationError
from .malliavin import NoiseSpacePath, apply_Astar, sweep
from .sde import EnsembleIntegrator, ForcingSpec, SolverConfig, Trajectory
from .seeding import derive_seeds
from .spectral import space
from .stats import exp_fit

DEFAULT_DELTA = 2.0 ** -9


def block_steps(dt: float) -> int:
    """Steps per unit block; the step grid must divide the block exactly."""
    r = 1.0 / dt
    nb = int(round(r))
    if abs(r - nb) > 1e-9 * r:
        raise ValidationError(f"dt={dt} does not divide the unit block")
    return nb


@dataclass
class BlockOps:
    """Operators of one control/rest block pair, batched over members.

    ``M``: Malliavin matrix of the control block; ``Jc``, ``Jr``: dense
    tangents of the control and rest blocks; ``S``: see :func:`malliavin.sweep`.
    """

    M: np.ndarray
    Jc: np.ndarray
    Jr: np.ndarray
    S: np.ndarray | None = None


def block_ops(stepper, states: np.ndarray, noise: np.ndarray | None = None) -> BlockOps:
    """``states``: ``(2 nb + 1, *batch, D)`` nodes spanning ``[n, n+2]``."""
    nb = (states.shape[0] - 1) // 2
    if states.shape[0] != 2 * nb + 1:
        raise ValidationError("block states must span two whole blocks")
    ctrl = sweep(stepper, states[:nb + 1], None if noise is None else noise[:nb])
    rest = sweep_J(stepper, states[nb:])
    return BlockOps(ctrl["M"], ctrl["J"], rest, ctrl["S"])


def sweep_J(stepper, states: np.ndarray) -> np.ndarray:
    """Dense tangent over the window of ``states`` (no Malliavin matrix)."""
    D = states.shape[-1]
    V = np.broadcast_to(np.eye(D), states.shape[1:-1] + (D, D)).copy()
    for i in range(states.shape[0] - 2, -1, -1):
        w = stepper.weight(states[i])
        V = stepper.adjoint_step(None if w is None else w[..., None, :], V)
    return V


def _solve(M: np.ndarray, beta: float, rhs: np.ndarray) -> np.ndarray:
    D = M.shape[-1]
    return np.linalg.solve(M + beta * np.eye(D), rhs[..., None])[..., 0]


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", A, x)


@dataclass
class Split:
    rho_mid: np.ndarray      # rho_{n+1}
    rho_next: np.ndarray     # rho_{n+2}
    rho_H: np.ndarray
    rho_L: np.ndarray
    y: np.ndarray            # v = A* y on the control block


def split_residual(ops: BlockOps, rho: np.ndarray, beta: float, N: int) -> Split:
    if not beta > 0:
        raise ValidationError("beta must be positive")
    mask = space(rho.shape[-1] // 2).projector_mask(N)
    jr = _mv(ops.Jc, rho)
    y = _solve(ops.M, beta, jr)
    mid = beta * y                               # R^beta J rho
    rho_L = _mv(ops.Jr, np.where(mask, mid, 0.0))
    rho_H = _mv(ops.Jr, np.where(mask, 0.0, mid))
    return Split(mid, rho_H + rho_L, rho_H, rho_L, y)


def low_ratio(ops: BlockOps, rho: np.ndarray, beta: float, N: int) -> np.ndarray:
    """``(|rho^L| / |rho_n|)^8`` per member."""
    sp = split_residual(ops, rho, beta, N)
    den = np.linalg.norm(rho, axis=-1)
    return (np.linalg.norm(sp.rho_L, axis=-1) / np.where(den > 0, den, 1.0)) ** 8


@dataclass
class BetaChoice:
    beta: float
    ratio: float
    accepted: bool
    trials: list = field(default_factory=list)   # (beta, ratio) pairs, in scan order

    def to_record(self) -> dict:
        return {"beta": self.beta, "ratio": self.ratio, "accepted": self.accepted,
                "trials": [list(t) for t in self.trials]}


def choose_beta(ops: BlockOps, rho: np.ndarray, N: int, delta: float = DEFAULT_DELTA,
                budget: int = 16, beta_max: float = 1.0, factor: float = 0.5,
                raise_on_failure: bool = True) -> BetaChoice:
    """Scan ``beta_max * factor**i`` for ``i < budget`` from the top.

    Returns the first (largest, least control effort) trial whose ensemble
    mean of ``(|rho^L| / |rho_n|)^8`` over the members in ``ops`` is at most
    ``delta``.  When none qualifies, raises :class:`BudgetExhausted` carrying
    the best trial, or returns it with ``accepted=False``.
    """
    if budget < 1:
        raise ValidationError("trial budget must be at least 1")
    if not (0 < factor < 1) or not beta_max > 0:
        raise ValidationError("need beta_max > 0 and 0 < factor < 1")
    trials = []
    for i in range(budget):
        b = beta_max * factor ** i
        r = float(np.mean(low_ratio(ops, rho, b, N)))
        trials.append((b, r))
        if r <= delta:
            return BetaChoice(b, r, True, trials)
    b, r = min(trials, key=lambda p: p[1])
    choice = BetaChoice(b, r, False, trials)
    if raise_on_failure:
        raise BudgetExhausted(
            f"no beta in {budget} trials reached ratio <= {delta:g} (best {r:.3e} at beta={b:.3e})",
            report=choice.to_record())
    return choice


def choose_cutoff(Jc: np.ndarray, threshold: float = DEFAULT_DELTA) -> int:
    """Smallest ``N`` with ``E|Q_N J|^8 < threshold * E|J|^8`` over the batch."""
    D = Jc.shape[-1]
    ref = float(np.mean(np.linalg.norm(Jc, ord=2, axis=(-2, -1)) ** 8))
    sp = space(D // 2)
    for N in range(1, D // 2):
        q = np.where(sp.projector_mask(N)[:, None], 0.0, Jc)
        if float(np.mean(np.linalg.norm(q, ord=2, axis=(-2, -1)) ** 8)) < threshold * ref:
            return N
    return D // 2


# -- single-trajectory interface ------------------------------------------------

def _block_states(traj: Trajectory, n: int, span: int) -> tuple:
    nb = block_steps(traj.dt)
    i0 = n * nb
    if n < 0 or i0 + span * nb > traj.n_steps:
        raise ValidationError(f"block starting at {n} lies outside the trajectory")
    return traj.full_states()[i0:i0 + span * nb + 1], traj.noise[i0:i0 + span * nb], i0


def control_segment(traj: Trajectory, n: int, rho, beta: float) -> NoiseSpacePath:
    """``v = A* (M + beta)^{-1} J rho`` on ``[n, n+1]``."""
    if not beta > 0:
        raise ValidationError("beta must be positive")
    states, _, _ = _block_states(traj, n, 1)
    ops = sweep(traj.stepper(), states)
    y = _solve(ops["M"], beta, _mv(ops["J"], np.asarray(rho, dtype=float)))
    return apply_Astar(traj, float(n), float(n + 1), y)


def residual_update(traj: Trajectory, n: int, rho, beta: float, N: int) -> Split:
    states, _, _ = _block_states(traj, n, 2)
    ops = block_ops(traj.stepper(), states)
    return split_residual(ops, np.asarray(rho, dtype=float), beta, N)


def integrate_residual(traj: Trajectory, n: int, rho, v: NoiseSpacePath, span: int = 2):
    """Step the residual equation directly over ``span`` blocks from ``n``.

    ``v`` holds node values on the control block ``[n, n+1]``; it is zero on
    the rest of the window.  Uses the trapezoid rule that defines ``A``, so
    the result must agree with :func:`residual_update` to roundoff.  Returns
    residuals at every step.
    """
    states, _, _ = _block_states(traj, n, span)
    st = traj.stepper()
    nb = block_steps(traj.dt)
    half = 0.5 * traj.dt
    r = np.array(rho, dtype=float)
    out = [r]
    for i in range(span * nb):
        left = v.values[i] if i < nb else None
        right = v.values[i + 1] if i < nb else None
        if left is not None:
            r = st.inject(r, left, -half)
        r = st.tangent_step(st.weight(states[i]), r)
        if right is not None:
            r = st.inject(r, right, -half)
        out.append(r)
    return np.array(out)


# -- ensemble decay experiment -------------------------------------------------

@dataclass
class ControlLedger:
    """Per-member control state accumulated block by block."""

    xi: np.ndarray
    rho: list = field(default_factory=list)        # rho at integer times, (P, D) each
    betas: list = field(default_factory=list)      # BetaChoice per control block
    y: list = field(default_factory=list)          # v = A* y on each control block
    rho_H: list = field(default_factory=list)
    rho_L: list = field(default_factory=list)
    ito: list = field(default_factory=list)        # running int v . dW at even times
    noise_sums: list = field(default_factory=list)
    N: int | None = None

    def ito_recomputed(self) -> np.ndarray:
        """Ito integral recomputed from the stored ``y`` and noise sums."""
        acc = np.zeros(self.xi.shape[:-1])
        for y, s in zip(self.y, self.noise_sums):
            acc = acc + np.einsum("...i,...i->...", y, s)
        return acc


@dataclass
class DecayReport:
    n: np.ndarray
    mean_rho8: np.ndarray
    ci_rho8: np.ndarray
    two_step_ratio: float
    times: np.ndarray
    mean_rho2: np.ndarray
    gamma0: float
    r2: float
    ito_mean_abs: np.ndarray
    ito_mean: np.ndarray
    betas: list
    N: int
    ensemble: int
    non_increasing_after_2: bool
    ledger: ControlLedger = field(repr=False, default=None)

    def table(self) -> dict:
        return {"n": self.n, "mean_rho8": self.mean_rho8, "ci95_rho8": self.ci_rho8,
                "ito_mean_abs": self.ito_mean_abs, "ito_mean": self.ito_mean}


def default_xi(n_modes: int, N: int = 4) -> np.ndarray:
    """Unit vector with equal weight on every mode ``|k| <= N``."""
    mask = space(n_modes).projector_mask(min(N, n_modes))
    return mask / math.sqrt(mask.sum())


def decay_experiment(cfg: SolverConfig, forcing: ForcingSpec, xi=None, n_max: int = 8,
                     ensemble: int = 128, U0=None, master_seed: int | None = None,
                     delta: float = DEFAULT_DELTA, budget: int = 16, beta_max: float = 1.0,
                     N: int | None = None, keep_ledger: bool = False,
                     strict: bool = False) -> DecayReport:
    """Monte Carlo estimate of ``E|rho_n|^8`` for even ``n <= n_max``.

    Members are independent paths from ``U0`` (default 0).  ``N`` defaults to
    :func:`choose_cutoff` on the first block and is then frozen; ``beta`` is
    chosen per block by :func:`choose_beta` over the whole ensemble.  Blocks
    where the trial budget is exhausted use the best trial and are flagged in
    the ``betas`` list, or raise :class:`BudgetExhausted` when ``strict``.
    """
    if n_max < 2 or n_max % 2:
        raise ValidationError("n_max must be a positive even integer")
    nb = block_steps(cfg.dt)
    D = 2 * cfg.n_modes
    xi = default_xi(cfg.n_modes) if xi is None else np.asarray(xi, dtype=float)
    if xi.shape != (D,):
        raise ValidationError("xi has the wrong dimension")
    u0 = np.zeros(D) if U0 is None else np.asarray(U0, dtype=float)
    seeds = derive_seeds(cfg.seed if master_seed is None else master_seed, ensemble, "control")
    ens = EnsembleIntegrator(u0, cfg.with_(T=float(n_max)), forcing, seeds)
    rho = np.broadcast_to(xi, (ensemble, D)).copy()
    led = ControlLedger(np.array(rho))
    led.rho.append(rho)
    ito = np.zeros(ensemble)
    led.ito.append(ito)
    for n in range(0, n_max, 2):
        states, noise = ens.advance(2 * nb, record=1, keep_noise=True)
        ops = block_ops(ens.stepper, states, noise)
        if led.N is None:
            led.N = choose_cutoff(ops.Jc) if N is None else int(N)
        choice = choose_beta(ops, rho, led.N, delta, budget, beta_max, raise_on_failure=strict)
        sp = split_residual(ops, rho, choice.beta, led.N)
        ito = ito + np.einsum("pi,pi->p", sp.y, ops.S)
        led.betas.append(choice)
        led.y.append(sp.y)
        led.noise_sums.append(ops.S)
        led.rho_H.append(sp.rho_H)
        led.rho_L.append(sp.rho_L)
        led.rho.extend([sp.rho_mid, sp.rho_next])
        led.ito.append(ito)
        rho = sp.rho_next

    norms = np.array([np.linalg.norm(r, axis=-1) for r in led.rho])     # (n_max + 1, P)
    even = norms[::2]
    r8 = even ** 8
    mean8 = r8.mean(axis=1)
    ci8 = 1.96 * r8.std(axis=1, ddof=1) / math.sqrt(ensemble)
    ns = np.arange(0, n_max + 1, 2)
    fit8 = exp_fit(ns, mean8)
    times = np.arange(n_max + 1, dtype=float)
    mean2 = (norms ** 2).mean(axis=1)
    fit2 = exp_fit(times, mean2)
    itos = np.array(led.ito)
    return DecayReport(
        ns, mean8, ci8, math.exp(-2.0 * fit8.rate), times, mean2, fit2.rate, fit2.r2,
        np.abs(itos).mean(axis=1), itos.mean(axis=1),
        [c.to_record() for c in led.betas], led.N, ensemble,
        bool(np.all(np.diff(mean8[1:]) <= 0)), led if keep_ledger else None)


# -- gradient estimate probe ---------------------------------------------------

@dataclass
class GradientReport:
    lhs: float               # |grad P_t Phi(U0)| by central differences
    lhs_se: float
    lhs_adjoint: float       # same quantity from E[J^T grad Phi(U_t)]
    rhs: float
    rhs_se: float
    C: float
    gamma0: float
    mean_phi_sq: float
    mean_grad_sq: float
    precision_ok: bool
    ensemble: int
    eps: float

    def holds(self) -> bool:
        return self.lhs <= self.rhs


def gradient_probe(phi, U0, t: float, cfg: SolverConfig, forcing: ForcingSpec,
                   ensemble: int = 128, gamma0: float | None = None, C: float = 1.0,
                   eps: float = 1e-4, rel_precision: float = 0.2,
                   master_seed: int | None = None) -> GradientReport:
    """Both sides of ``|grad P_t Phi| <= C (sqrt(P_t Phi^2) + e^{-g t} sqrt(P_t |grad Phi|^2))``.

    The left side uses central differences of ``E Phi(U_t)`` in every
    coordinate direction with common noise; the pathwise adjoint estimate
    ``E[K_{0,t} grad Phi(U_t)]`` is reported as a cross-check.
    ``precision_ok`` is False when the Monte Carlo error of the left side
    exceeds ``rel_precision`` times its value (and the absolute precision
    ``rel_precision * rhs``).  ``gamma0`` defaults to a fit from a short
    decay experiment.
    """
    u0 = np.asarray(U0.coeffs if hasattr(U0, "coeffs") else U0, dtype=float)
    D = u0.size
    if gamma0 is None:
        gamma0 = decay_experiment(cfg, forcing, n_max=4, ensemble=32,
                                  master_seed=cfg.seed + 1).gamma0
    nsteps = int(round(t / cfg.dt))
    seeds = derive_seeds(cfg.seed if master_seed is None else master_seed, ensemble, "gradient")
    # rows: [base] + [+e_i] + [-e_i], each repeated over the ensemble with shared noise
    starts = np.concatenate([u0[None], u0 + eps * np.eye(D), u0 - eps * np.eye(D)])
    n_start = starts.shape[0]
    init = np.repeat(starts, ensemble, axis=0)
    ens = EnsembleIntegrator(init, cfg.with_(T=t), forcing, seeds * n_start)
    base = np.empty((nsteps + 1, ensemble, D))
    base[0] = ens.state[:ensemble]

    def keep_base(step, u):
        base[step] = u[:ensemble]

    ens.advance(nsteps, callback=keep_base)
    final = ens.state.reshape(n_start, ensemble, D)
    vals = phi.value(final)                             # (n_start, P)
    diffs = (vals[1:D + 1] - vals[D + 1:]) / (2 * eps)  # (D, P)
    g = diffs.mean(axis=1)
    g_se = diffs.std(axis=1, ddof=1) / math.sqrt(ensemble)
    lhs = float(np.linalg.norm(g))
    lhs_se = float(np.linalg.norm(g_se))

    st = ens.stepper
    lam = phi.grad(base[-1])
    for i in range(nsteps - 1, -1, -1):
        lam = st.adjoint_step(st.weight(base[i]), lam)
    lhs_adj = float(np.linalg.norm(lam.mean(axis=0)))

    phi_sq = vals[0] ** 2
    grad_sq = np.sum(phi.grad(base[-1]) ** 2, axis=-1)
    a, b = math.sqrt(phi_sq.mean()), math.sqrt(grad_sq.mean())
    decay = math.exp(-gamma0 * t)
    rhs = C * (a + decay * b)
    se_a = phi_sq.std(ddof=1) / math.sqrt(ensemble) / (2 * a) if a > 0 else 0.0
    se_b = grad_sq.std(ddof=1) / math.sqrt(ensemble) / (2 * b) if b > 0 else 0.0
    rhs_se = C * math.hypot(se_a, decay * se_b)
    ok = lhs_se <= rel_precision * max(lhs, rhs)
    return GradientReport(lhs, lhs_se, lhs_adj, rhs, rhs_se, C, gamma0, float(phi_sq.mean()),
                          float(grad_sq.mean()), bool(ok), ensemble, eps)
