"""``glsim <command> --config <file> [--out <dir>] [--threads N]``.

Exit codes: 0 ok, 2 validation error, 3 numerical guard, 4 budget
exhausted.  Failures print a JSON error record on stderr and, when the
output directory is writable, also to ``error.json``.

Environment overrides: ``GLSIM_OUT`` (output directory) and
``GLSIM_THREADS`` (FFT worker threads); command-line flags win over both.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import __version__
from . import config as cfgmod
from .errors import GLSimError, ValidationError
from .io import canonical_json, ensure_dir, write_summary, write_table, write_trajectory

log = logging.getLogger("glsim")


def _u0(modes: dict, n_modes: int) -> np.ndarray:
    from .spectral import SpectralField
    return SpectralField.from_modes(n_modes, {int(k): float(v) for k, v in modes.items()}).coeffs


def _meta(rc) -> dict:
    return {"config_hash": rc.hash, "command": rc.command, "master_seed": rc.master_seed,
            "seed_scheme": rc.raw["seeding"]["scheme"]}


def _write(rc, out: Path, name: str, columns: dict, extra: dict | None = None):
    if "tsv" in rc.formats:
        write_table(out / name, columns, {**_meta(rc), **(extra or {})})


def cmd_simulate(rc, out: Path) -> dict:
    from .sde import diagnostics, integrate
    e = rc.experiment
    traj = integrate(_u0(e["u0"], rc.solver.n_modes), rc.solver, rc.forcing)
    series = diagnostics(traj, order=int(e["order"]), power=int(e["power"]), eta=float(e["eta"]))
    cols = {k: v[::traj.stride] for k, v in series.columns().items()}
    _write(rc, out, "diagnostics.tsv", cols)
    if e["archive"] or "bin" in rc.formats:
        write_trajectory(out / "trajectory.bin", traj, {"config_hash": rc.hash})
    return {"n_steps": traj.n_steps, "final_norm": float(series.norm[-1]),
            "max_norm": float(series.norm.max()), "final_energy": float(series.energy[-1]),
            "B": {str(k): v for k, v in series.B.items()}}


def cmd_check_modes(rc, out: Path) -> dict:
    from .modes import check_hypothesis
    e = rc.experiment
    z0 = rc.forcing.modes if e["z0"] is None else [int(k) for k in e["z0"]]
    rep = check_hypothesis(z0, int(e["cutoff"]), int(e["depth"]))
    ks = sorted(rep.coverage)
    _write(rc, out, "coverage.tsv", {"k": ks, "depth": [
        -1 if rep.coverage[k] is None else rep.coverage[k] for k in ks]},
        {"unreached_marker": "-1"})
    return {"z0": list(z0), **rep.to_record()}


def cmd_tangent_check(rc, out: Path) -> dict:
    from .sde import integrate
    from .variational import (propagate_adjoint, propagate_second, propagate_tangent,
                              tangent_norm_series)
    from .seeding import derive_seed, generator
    e = rc.experiment
    cfg = rc.solver
    u0 = _u0(e["u0"], cfg.n_modes)
    traj = integrate(u0, cfg, rc.forcing)
    rng = generator(derive_seed(rc.master_seed, 0, "tangent-check"))
    rows = {"direction": [], "fd_rel_err": [], "duality": [], "max_step_growth": [],
            "second_rel_err": [], "second_asym": []}
    T = traj.T
    for d in range(int(e["directions"])):
        xi, xi2, eta = (rng.standard_normal(2 * cfg.n_modes) for _ in range(3))
        xi /= np.linalg.norm(xi)
        xi2 /= np.linalg.norm(xi2)
        J = propagate_tangent(traj, 0.0, T, xi).coeffs
        eps = float(e["eps"])
        up = integrate(u0 + eps * xi, cfg, rc.forcing, noise=traj.noise).final().coeffs
        dn = integrate(u0 - eps * xi, cfg, rc.forcing, noise=traj.noise).final().coeffs
        fd = (up - dn) / (2 * eps)
        dual = abs(J @ eta - xi @ propagate_adjoint(traj, 0.0, T, eta).coeffs)
        ns = tangent_norm_series(traj, 0.0, T, xi)
        growth = float(np.max(ns[1:] / ns[:-1] - 1.0))
        S = propagate_second(traj, 0.0, T, xi2, xi).coeffs
        e2 = float(e["eps_second"])
        Jp = propagate_tangent(integrate(u0 + e2 * xi2, cfg, rc.forcing, noise=traj.noise),
                               0.0, T, xi).coeffs
        Jm = propagate_tangent(integrate(u0 - e2 * xi2, cfg, rc.forcing, noise=traj.noise),
                               0.0, T, xi).coeffs
        fd2 = (Jp - Jm) / (2 * e2)
        S_swap = propagate_second(traj, 0.0, T, xi, xi2).coeffs
        rows["direction"].append(d)
        rows["fd_rel_err"].append(np.linalg.norm(fd - J) / np.linalg.norm(J))
        rows["duality"].append(dual)
        rows["max_step_growth"].append(growth)
        rows["second_rel_err"].append(np.linalg.norm(fd2 - S) / max(np.linalg.norm(S), 1e-300))
        rows["second_asym"].append(np.linalg.norm(S - S_swap))
    _write(rc, out, "tangent_check.tsv", rows)
    return {
        "max_fd_rel_err": float(max(rows["fd_rel_err"])),
        "max_duality": float(max(rows["duality"])),
        "max_step_growth": float(max(rows["max_step_growth"])),
        "max_second_rel_err": float(max(rows["second_rel_err"])),
        "max_second_asym": float(max(rows["second_asym"])),
    }


def cmd_malliavin(rc, out: Path) -> dict:
    from .malliavin import (ConeSpec, assemble_batch, epsilon_statistics, numerical_rank,
                            resolvent_checks, spectral_floor)
    from .sde import EnsembleIntegrator
    from .seeding import derive_seed, derive_seeds, generator
    e = rc.experiment
    cfg = rc.solver
    P = int(e["ensemble"])
    cone = ConeSpec(float(e["alpha"]), int(e["N"]))
    seeds = derive_seeds(rc.master_seed, P, "malliavin")
    burn = int(round(float(e["burn_in"]) / cfg.dt))
    ens = EnsembleIntegrator(np.zeros(2 * cfg.n_modes), cfg.with_(T=cfg.T + burn * cfg.dt),
                             rc.forcing, seeds)
    if burn:
        ens.advance(burn)
    states, _ = ens.advance(cfg.n_steps, record=1)
    Ms = assemble_batch(ens.stepper, states)
    rng = generator(derive_seed(rc.master_seed, 0, "cone-sampling"))
    floors, ranks, mins = [], [], []
    for p in range(P):
        fr = spectral_floor(Ms[p], cone, budget=int(e["budget"]), rng=rng)
        floors.append(fr)
        ranks.append(numerical_rank(Ms[p], float(e["rank_threshold"])))
        mins.append(float(np.linalg.eigvalsh(Ms[p])[0]))
    _write(rc, out, "floors.tsv", {
        "sample": np.arange(P), "rank": ranks, "floor": [f.floor for f in floors],
        "dual_bound": [f.dual_bound for f in floors],
        "sampled_min": [f.sampled_min for f in floors],
        "subspace_min": [f.subspace_min for f in floors], "min_eig": mins},
        {"alpha": cone.alpha, "N": cone.N, "T": cfg.T, "seed_count": P})
    stats = epsilon_statistics(floors, e["eps_grid"])
    _write(rc, out, "r_eps.tsv", {"eps": stats["eps"], "r_hat": stats["r"]},
           {"alpha": cone.alpha, "N": cone.N, "T": cfg.T, "seed_count": P})
    res = resolvent_checks(Ms[0], float(e["resolvent_beta"]))
    q = len(rc.forcing.modes)
    return {
        "ensemble": P, "rank_gt_forced_fraction": float(np.mean(np.array(ranks) > q)),
        "min_eigenvalue": float(min(mins)), "median_floor": float(np.median(
            [f.floor for f in floors])),
        "r_hat": dict(zip(map(repr, stats["eps"].tolist()), stats["r"].tolist())),
        "r_hat_monotone": bool(np.all(np.diff(stats["r"]) >= 0)),
        "resolvent_checks_sample0": res,
    }


def cmd_control_decay(rc, out: Path) -> dict:
    from .control import decay_experiment
    e = rc.experiment
    rep = decay_experiment(rc.solver, rc.forcing, n_max=int(e["n_max"]),
                           ensemble=int(e["ensemble"]), delta=float(e["delta"]),
                           budget=int(e["budget"]), beta_max=float(e["beta_max"]),
                           N=None if e["N"] is None else int(e["N"]),
                           strict=bool(e["strict"]))
    _write(rc, out, "decay.tsv", rep.table(), {"ensemble": rep.ensemble, "N": rep.N})
    _write(rc, out, "residual_sq.tsv", {"t": rep.times, "mean_rho2": rep.mean_rho2})
    return {"two_step_ratio": rep.two_step_ratio, "gamma0": rep.gamma0, "r2": rep.r2,
            "N": rep.N, "betas": rep.betas, "non_increasing_after_2": rep.non_increasing_after_2}


def _separated(rc) -> np.ndarray:
    from .control import default_xi
    return float(rc.experiment["separation"]) * default_xi(rc.solver.n_modes)


def cmd_mixing(rc, out: Path) -> dict:
    from .ergodicity import MetricSpec, synchronous_coupling
    e = rc.experiment
    D = 2 * rc.solver.n_modes
    rep = synchronous_coupling(np.zeros(D), _separated(rc), rc.solver, rc.forcing,
                               MetricSpec(float(e["metric_delta"])), int(e["n_pairs"]),
                               float(e["record_every"]))
    _write(rc, out, "mixing.tsv", {"t": rep.times, "mean_d": rep.mean_d,
                                   "mean_dist": rep.mean_dist}, {"n_pairs": rep.n_pairs})
    return {"rate": rep.rate, "intercept": rep.intercept, "r2": rep.r2,
            "monotone": rep.monotone, "max_step_growth": rep.max_step_growth}


def cmd_lln(rc, out: Path) -> dict:
    from .ergodicity import lln_experiment
    from .observables import from_descriptor
    e = rc.experiment
    D = 2 * rc.solver.n_modes
    rep = lln_experiment(np.zeros(D), _separated(rc), rc.solver, rc.forcing,
                         from_descriptor(e["phi"]), n_batches=int(e["n_batches"]))
    _write(rc, out, "running_average.tsv", {"t": rep.times, "run_a": rep.running[:, 0],
                                            "run_b": rep.running[:, 1]})
    return {"averages": list(rep.averages), "errors": list(rep.errors),
            "difference": rep.difference, "tolerance": rep.tolerance, "agree": rep.agree,
            "tail_variance_slope": rep.tail_variance_slope}


def cmd_clt(rc, out: Path) -> dict:
    from .ergodicity import clt_experiment
    from .observables import from_descriptor
    e = rc.experiment
    rep = clt_experiment(rc.solver, rc.forcing, from_descriptor(e["phi"]), reps=int(e["reps"]),
                         burn_in=float(e["burn_in"]), batch_length=float(e["batch_length"]),
                         mean_paths=None if e["mean_paths"] is None else int(e["mean_paths"]))
    _write(rc, out, "clt_samples.tsv", {"rep": np.arange(rep.reps), "sample": rep.samples})
    return {"m_hat": rep.m_hat, "m_hat_se": rep.m_hat_se, "sigma2": rep.sigma2,
            "sigma2_se": rep.sigma2_se, "ks_stat": rep.ks_stat, "ks_pvalue": rep.ks_pvalue,
            "degenerate": rep.degenerate, "reps": rep.reps, "T": rep.T, "phi": rep.phi}


def cmd_stats(rc, out: Path) -> dict:
    from .ergodicity import invariant_stats_ensemble
    e = rc.experiment
    st = invariant_stats_ensemble(rc.solver, rc.forcing, int(e["ensemble"]),
                                  float(e["burn_in"]), float(e["record_every"]))
    n = rc.solver.n_modes
    _write(rc, out, "spectrum.tsv", {"k": np.arange(1, n + 1), "energy": st.spectrum})
    _write(rc, out, "second_moments.tsv", {"k": st.k, "second_moment": st.second_moments})
    return {"mean_sq": st.mean_sq, "mean_sq1": st.mean_sq1, "n_samples": st.n_samples}


COMMANDS = {
    "simulate": cmd_simulate, "check-modes": cmd_check_modes,
    "tangent-check": cmd_tangent_check, "malliavin": cmd_malliavin,
    "control-decay": cmd_control_decay, "mixing": cmd_mixing, "lln": cmd_lln,
    "clt": cmd_clt, "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"glsim {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides GLSIM_OUT and the config)")
    p.add_argument("--threads", type=int, help="FFT worker threads (overrides GLSIM_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_record(exc: BaseException, code: int) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "dump", None):
        rec["details"] = exc.dump
    if getattr(exc, "report", None):
        rec["details"] = exc.report
    return rec


def run(command: str, config_path, out: str | None = None, threads: int | None = None) -> int:
    out_dir = None
    try:
        rc = cfgmod.load(config_path, command)
        out_dir = Path(out or os.environ.get("GLSIM_OUT") or rc.out_dir)
        if threads is None and os.environ.get("GLSIM_THREADS"):
            try:
                threads = int(os.environ["GLSIM_THREADS"])
            except ValueError:
                raise ValidationError("GLSIM_THREADS must be an integer") from None
        if threads is not None and threads < 1:
            raise ValidationError("thread count must be >= 1")
        ensure_dir(out_dir)
        with sfft.set_workers(threads or 1):
            summary = COMMANDS[command](rc, out_dir)
        if "json" in rc.formats:
            write_summary(out_dir / "summary.json", {**_meta(rc), "config": rc.raw,
                                                     "results": summary})
        log.info("%s finished; outputs in %s", command, out_dir)
        return 0
    except GLSimError as exc:
        code = exc.exit_code
        rec = _error_record(exc, code)
        print(canonical_json(rec), file=sys.stderr)
        if out_dir is not None:
            try:
                ensure_dir(out_dir)
                write_summary(out_dir / "error.json", rec)
            except OSError:
                pass
        return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
