"""Long-time experiments: coupling decay, transport distances, LLN and CLT.

The synchronous coupling drives both copies with the same increments and
evolves their difference ``D = V - U`` directly,

    D' = E D - h * P(D (3U^2 + 3UD + D^2)),

which is the exact difference of the two discrete steps but avoids the
cancellation of subtracting two nearly equal states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats
from scipy.integrate import trapezoid
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .sde import EnsembleIntegrator, ForcingSpec, SolverConfig, Trajectory
from .seeding import derive_seeds
from .spectral import space
from .stats import batch_means, batch_means_variance, exp_fit, power_law_fit


@dataclass(frozen=True)
class MetricSpec:
    """``d(x, y) = min(1, |x - y| / delta)``."""

    delta: float = 1.0

    def __post_init__(self):
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValidationError("delta must be positive")

    def d(self, dist):
        return np.minimum(1.0, np.asarray(dist, dtype=float) / self.delta)


@dataclass
class MixingReport:
    times: np.ndarray
    mean_d: np.ndarray
    mean_dist: np.ndarray
    rate: float
    intercept: float
    r2: float
    monotone: bool
    max_step_growth: float     # max over steps and pairs of |D'|/|D| - 1
    n_pairs: int
    fit_window: tuple


def _difference_step(st, u: np.ndarray, dlt: np.ndarray) -> np.ndarray:
    out = st.E * dlt
    if st.nonlinear:
        sp = st.sp
        ug, dg = sp.to_grid_array(u), sp.to_grid_array(dlt)
        out -= st.h * sp.to_spectral_array(dg * (3.0 * ug * ug + 3.0 * ug * dg + dg * dg))
    return out


def synchronous_coupling(U0, V0, cfg: SolverConfig, forcing: ForcingSpec,
                         metric: MetricSpec = MetricSpec(), n_pairs: int = 64,
                         record_every: float = 0.1, master_seed: int | None = None,
                         fit_window: tuple | None = None, tol: float = 1e-10) -> MixingReport:
    """Mean ``d(U_t, V_t)`` over ``n_pairs`` pairs, each pair sharing one noise path.

    ``U0`` and ``V0`` are single states or per-pair arrays.  Pathwise
    monotonicity of ``|U_t - V_t|`` is checked at every step with relative
    tolerance ``tol``.  The exponential fit uses ``fit_window`` (default: the
    whole horizon) restricted to times where the mean distance is positive.
    """
    D = 2 * cfg.n_modes
    u0 = np.broadcast_to(np.asarray(U0, dtype=float), (n_pairs, D))
    v0 = np.broadcast_to(np.asarray(V0, dtype=float), (n_pairs, D))
    seeds = derive_seeds(cfg.seed if master_seed is None else master_seed, n_pairs, "coupling")
    ens = EnsembleIntegrator(u0, cfg, forcing, seeds)
    st = ens.stepper
    every = max(1, int(round(record_every / cfg.dt)))
    dlt = np.array(v0 - u0)
    dist = np.linalg.norm(dlt, axis=-1)
    times, md, mdist = [0.0], [metric.d(dist).mean()], [dist.mean()]
    growth = -np.inf
    n_steps = cfg.n_steps
    done = 0
    while done < n_steps:
        span = min(every, n_steps - done)
        for _ in range(span):
            new = _difference_step(st, ens.state, dlt)
            ens.advance(1)
            nd = np.linalg.norm(new, axis=-1)
            pos = dist > 0
            if np.any(pos):
                growth = max(growth, float(np.max(nd[pos] / dist[pos] - 1.0)))
            if np.any(nd[~pos] > 0):
                growth = np.inf
            dlt, dist = new, nd
        done += span
        times.append(done * cfg.dt)
        md.append(metric.d(dist).mean())
        mdist.append(dist.mean())
    times, md, mdist = np.array(times), np.array(md), np.array(mdist)
    lo, hi = fit_window if fit_window is not None else (0.0, times[-1])
    sel = (times >= lo) & (times <= hi) & (md > 0)
    if sel.sum() >= 3:
        fit = exp_fit(times[sel], md[sel])
        rate, icpt, r2 = fit.rate, fit.intercept, fit.r2
    else:
        rate, icpt, r2 = math.inf, -math.inf, 1.0
    growth = 0.0 if growth == -np.inf else growth
    return MixingReport(times, md, mdist, rate, icpt, r2, bool(growth <= tol), float(growth),
                        n_pairs, (lo, hi))


@dataclass
class WassersteinReport:
    value: float               # optimal transport of the capped cost on low modes
    coupling_upper: float | None
    n: int
    modes: int | None


def wasserstein_d(A, B, metric: MetricSpec = MetricSpec(), modes: int | None = 4,
                  paired: bool = False) -> WassersteinReport:
    """Empirical ``W_d`` between sample sets ``A`` and ``B`` (rows are states).

    The cost is ``d`` evaluated on ``P_modes`` of the difference (``modes=None``
    for all modes).  With ``paired=True`` the rows are jointly coupled and
    the mean full-state ``d`` over pairs is reported as an upper bound.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValidationError("empty ensemble")
    if A.shape != B.shape:
        raise ValidationError("ensembles must have equal size and resolution")
    if modes is not None:
        mask = space(A.shape[1] // 2).projector_mask(min(modes, A.shape[1] // 2))
        a, b = A[:, mask], B[:, mask]
    else:
        a, b = A, B
    diff = a[:, None, :] - b[None, :, :]
    cost = metric.d(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))
    r, c = linear_sum_assignment(cost)
    value = float(cost[r, c].mean())
    upper = float(metric.d(np.linalg.norm(A - B, axis=1)).mean()) if paired else None
    return WassersteinReport(value, upper, A.shape[0], modes)


def time_average(values, dt: float) -> np.ndarray:
    """Running average ``(1/t) int_0^t Phi`` of samples taken every ``dt``.

    The trapezoid rule is used; the ``t = 0`` entry is the first sample.
    """
    x = np.asarray(values, dtype=float)
    out = np.empty_like(x)
    out[0] = x[0]
    if x.size > 1:
        integral = np.cumsum(0.5 * (x[1:] + x[:-1])) * dt
        out[1:] = integral / (dt * np.arange(1, x.size))
    return out


def trajectory_average(traj: Trajectory, phi) -> np.ndarray:
    return time_average(phi.value(traj.full_states()), traj.dt)


def _observe_runs(U0s, cfg: SolverConfig, forcing, phi, seeds, burn_in: float = 0.0):
    """Integrate one path per row of ``U0s`` and return ``Phi`` at every step."""
    P = len(seeds)
    ens = EnsembleIntegrator(U0s, cfg.with_(T=cfg.T + burn_in), forcing, seeds)
    nb = int(round(burn_in / cfg.dt))
    if nb:
        ens.advance(nb)
    n = cfg.n_steps
    vals = np.empty((n + 1, P))
    vals[0] = phi.value(ens.state)

    def rec(step, u):
        vals[step - nb] = phi.value(u)

    ens.advance(n, callback=rec)
    return vals


@dataclass
class LLNReport:
    averages: tuple
    errors: tuple
    difference: float
    tolerance: float
    agree: bool
    times: np.ndarray
    running: np.ndarray          # (n_times, 2) running averages, subsampled
    tail_variance_slope: float   # log-log slope of running-average variance vs T
    T: float


def blocked_variance_slope(x, dt: float, lengths=None) -> float:
    """Slope of ``log Var(block mean)`` against ``log(block length)``; about -1."""
    x = np.asarray(x, dtype=float)
    total = x.size * dt
    if lengths is None:
        lengths = total / np.array([160, 80, 40, 20])
    var = []
    for L in lengths:
        m = int(round(L / dt))
        k = x.size // m
        b = x[: k * m].reshape(k, m).mean(axis=1)
        var.append(b.var(ddof=1))
    return power_law_fit(lengths, var)[0]


def lln_experiment(U0a, U0b, cfg: SolverConfig, forcing: ForcingSpec, phi,
                   master_seed: int | None = None, n_batches: int = 20,
                   record_every: float = 1.0) -> LLNReport:
    """Time averages up to ``cfg.T`` from two initial states and independent noise."""
    D = 2 * cfg.n_modes
    starts = np.stack([np.broadcast_to(np.asarray(U0a, dtype=float), (D,)),
                       np.broadcast_to(np.asarray(U0b, dtype=float), (D,))])
    seeds = derive_seeds(cfg.seed if master_seed is None else master_seed, 2, "lln")
    vals = _observe_runs(starts, cfg, forcing, phi, seeds)
    avgs, errs, running = [], [], []
    for p in range(2):
        m, se = batch_means(vals[:, p], n_batches)
        avgs.append(m)
        errs.append(se)
        running.append(time_average(vals[:, p], cfg.dt))
    diff = abs(avgs[0] - avgs[1])
    tol = 2.0 * math.hypot(errs[0], errs[1])
    every = max(1, int(round(record_every / cfg.dt)))
    running = np.stack(running, axis=1)[::every]
    slope = float(np.mean([blocked_variance_slope(vals[:, p], cfg.dt) for p in range(2)]))
    return LLNReport(tuple(avgs), tuple(errs), diff, tol, bool(diff <= tol),
                     np.arange(running.shape[0]) * every * cfg.dt, running, slope, cfg.T)


@dataclass
class CLTReport:
    phi: dict
    m_hat: float
    m_hat_se: float
    samples: np.ndarray
    sigma2: float
    sigma2_se: float
    ks_stat: float | None
    ks_pvalue: float | None
    degenerate: bool
    reps: int
    T: float
    seeds: dict = field(default_factory=dict)


def clt_experiment(cfg: SolverConfig, forcing: ForcingSpec, phi, reps: int = 200,
                   U0=None, burn_in: float = 10.0, mean_paths: int | None = None,
                   master_seed: int | None = None, batch_length: float = 10.0,
                   degenerate_tol: float = 1e-14) -> CLTReport:
    """Samples of ``T^{-1/2} int_0^T (Phi(U_t) - m_hat) dt`` with ``T = cfg.T``.

    ``m_hat`` and ``sigma^2`` come from an independent ensemble of
    ``mean_paths`` runs (default ``reps``) of the same length, the latter
    by batch means with batches of ``batch_length`` time units.
    """
    if reps < 100:
        raise ValidationError("reps must be at least 100")
    D = 2 * cfg.n_modes
    u0 = np.zeros(D) if U0 is None else np.asarray(U0, dtype=float)
    master = cfg.seed if master_seed is None else master_seed
    mean_paths = reps if mean_paths is None else mean_paths
    s_ref = derive_seeds(master, mean_paths, "clt-reference")
    s_rep = derive_seeds(master, reps, "clt-samples")
    ref = _observe_runs(u0, cfg, forcing, phi, s_ref, burn_in)
    path_means = np.array([time_average(ref[:, p], cfg.dt)[-1] for p in range(mean_paths)])
    m_hat = float(path_means.mean())
    m_se = float(path_means.std(ddof=1) / math.sqrt(mean_paths))
    n_b = max(2, int(round(cfg.T / batch_length)))
    per_path = np.array([batch_means_variance(ref[:, p], cfg.dt, n_b) for p in range(mean_paths)])
    sigma2 = float(max(per_path.mean(), 0.0))
    sigma2_se = float(per_path.std(ddof=1) / math.sqrt(mean_paths))

    vals = _observe_runs(u0, cfg, forcing, phi, s_rep, burn_in)
    integ = trapezoid(vals - m_hat, dx=cfg.dt, axis=0)
    samples = integ / math.sqrt(cfg.T)
    desc = phi.describe() if hasattr(phi, "describe") else {"kind": type(phi).__name__}
    scale = max(1.0, abs(m_hat))
    if sigma2 <= degenerate_tol * scale * scale:
        return CLTReport(desc, m_hat, m_se, samples, sigma2, sigma2_se, None, None, True,
                         reps, cfg.T, {"master": master})
    ks = sstats.kstest(samples, "norm", args=(0.0, math.sqrt(sigma2)))
    return CLTReport(desc, m_hat, m_se, samples, sigma2, sigma2_se, float(ks.statistic),
                     float(ks.pvalue), False, reps, cfg.T, {"master": master})


@dataclass
class InvariantStats:
    k: np.ndarray
    second_moments: np.ndarray      # E u_k^2 per coefficient
    mean_sq: float                  # E |U|^2
    mean_sq1: float                 # E |U|_1^2
    spectrum: np.ndarray            # E(u_k^2 + u_{-k}^2) for |k| = 1..n
    n_samples: int


def invariant_stats(states, burn_in_steps: int = 0) -> InvariantStats:
    """Summary statistics from samples of shape ``(n_times, [P,] D)`` after burn-in."""
    x = np.asarray(states.full_states() if isinstance(states, Trajectory) else states,
                   dtype=float)
    if burn_in_steps >= x.shape[0]:
        raise ValidationError("burn-in must be shorter than the run")
    x = x[burn_in_steps:].reshape(-1, x.shape[-1])
    n = x.shape[1] // 2
    sp = space(n)
    m2 = np.mean(x * x, axis=0)
    spec = m2[n:] + m2[n - 1::-1]
    return InvariantStats(sp.k, m2, float(m2.sum()), float(np.dot(sp.gamma, m2)), spec,
                          x.shape[0])


def invariant_stats_ensemble(cfg: SolverConfig, forcing: ForcingSpec, ensemble: int = 64,
                             burn_in: float = 5.0, record_every: float = 0.1, U0=None,
                             master_seed: int | None = None) -> InvariantStats:
    """Pooled statistics of ``ensemble`` paths sampled every ``record_every`` after burn-in."""
    D = 2 * cfg.n_modes
    u0 = np.zeros(D) if U0 is None else np.asarray(U0, dtype=float)
    seeds = derive_seeds(cfg.seed if master_seed is None else master_seed, ensemble, "stats")
    ens = EnsembleIntegrator(u0, cfg.with_(T=cfg.T + burn_in), forcing, seeds)
    ens.advance(int(round(burn_in / cfg.dt)))
    every = max(1, int(round(record_every / cfg.dt)))
    states, _ = ens.advance(cfg.n_steps, record=every)
    return invariant_stats(states[1:])
