import numpy as np
import pytest

from glsim.control import (BlockOps, block_ops, block_steps, choose_beta, choose_cutoff,
                           control_segment, decay_experiment, default_xi, gradient_probe,
                           integrate_residual, low_ratio, residual_update)
from glsim.errors import BudgetExhausted, ValidationError
from glsim.malliavin import assemble_M
from glsim.observables import CappedLowModes
from glsim.sde import ForcingSpec, SolverConfig, integrate
from glsim.seeding import derive_seeds
from glsim.spectral import SpectralField, basis, space
from glsim.variational import tangent_matrix

Z4 = ForcingSpec.uniform([-2, -1, 1, 2])
CFG = SolverConfig(n_modes=4, dt=1e-2, T=4.0, seed=13)


@pytest.fixture(scope="module")
def traj():
    return integrate(basis(1, 4), CFG, Z4)


def test_block_steps():
    assert block_steps(1e-3) == 1000
    with pytest.raises(ValidationError):
        block_steps(0.3)


class TestSplit:
    def test_against_dense_operators(self, traj):
        rho = default_xi(4)
        sp = residual_update(traj, 2, rho, 0.05, 2)
        M = assemble_M(traj, 2, 3).entries
        Jc, Jr = tangent_matrix(traj, 2, 3), tangent_matrix(traj, 3, 4)
        mid = 0.05 * np.linalg.solve(M + 0.05 * np.eye(8), Jc @ rho)
        assert np.allclose(sp.rho_mid, mid, atol=1e-13)
        assert np.allclose(sp.rho_next, Jr @ mid, atol=1e-13)
        P = np.diag(space(4).projector_mask(2).astype(float))
        assert np.allclose(sp.rho_L, Jr @ P @ mid, atol=1e-13)
        assert np.allclose(sp.rho_H + sp.rho_L, sp.rho_next, atol=1e-15)

    def test_direct_residual_integration(self, traj):
        rho = default_xi(4)
        v = control_segment(traj, 0, rho, 0.1)
        sp = residual_update(traj, 0, rho, 0.1, 2)
        path = integrate_residual(traj, 0, rho, v)
        assert np.allclose(path[100], sp.rho_mid, atol=1e-12)
        assert np.allclose(path[-1], sp.rho_next, atol=1e-12)

    def test_no_control_limit(self, traj):
        # beta -> infinity removes the control: rho_{n+2} = J_{n,n+2} rho
        rho = default_xi(4)
        sp = residual_update(traj, 0, rho, 1e12, 2)
        assert np.allclose(sp.rho_next, tangent_matrix(traj, 0, 2) @ rho, rtol=1e-9)

    def test_rejects_bad_beta_and_block(self, traj):
        with pytest.raises(ValidationError):
            residual_update(traj, 0, default_xi(4), 0.0, 2)
        with pytest.raises(ValidationError):
            residual_update(traj, 3, default_xi(4), 1.0, 2)


def _synthetic(m):
    D = len(m)
    return BlockOps(np.diag(m)[None], np.eye(D)[None], np.eye(D)[None])


class TestChooseBeta:
    def test_first_passing_trial(self):
        # rho on a low mode with M entry 1: ratio = (beta / (1 + beta))^8
        ops = _synthetic([1.0] * 8)
        rho = np.zeros((1, 8))
        rho[0, space(4).projector_mask(1).argmax()] = 1.0
        ch = choose_beta(ops, rho, 1, delta=2.0 ** -9, budget=10)
        ratios = [(b / (1 + b)) ** 8 for b in 0.5 ** np.arange(10)]
        first = next(i for i, r in enumerate(ratios) if r <= 2.0 ** -9)
        assert ch.accepted and ch.beta == 0.5 ** first
        assert ch.ratio == pytest.approx(ratios[first])
        assert len(ch.trials) == first + 1

    def test_budget_exhausted(self):
        ops = _synthetic([0.0] * 8)
        rho = np.ones((1, 8))
        with pytest.raises(BudgetExhausted) as ei:
            choose_beta(ops, rho, 2, budget=3)
        assert len(ei.value.report["trials"]) == 3
        ch = choose_beta(ops, rho, 2, budget=3, raise_on_failure=False)
        assert not ch.accepted

    def test_low_ratio_zero_rho(self):
        ops = _synthetic([1.0] * 8)
        assert low_ratio(ops, np.zeros((1, 8)), 1.0, 1)[0] == 0.0

    def test_validation(self):
        ops = _synthetic([1.0] * 8)
        with pytest.raises(ValidationError):
            choose_beta(ops, np.ones((1, 8)), 1, budget=0)
        with pytest.raises(ValidationError):
            choose_beta(ops, np.ones((1, 8)), 1, factor=1.5)


def test_choose_cutoff_synthetic():
    # J concentrated on |k| <= 2 with a small tail on |k| = 3
    gains = {1: 1.0, 2: 1.0, 3: 0.3, 4: 0.0}
    ks = np.concatenate([np.arange(-4, 0), np.arange(1, 5)])
    J = np.diag([gains[abs(k)] for k in ks])[None]
    assert choose_cutoff(J) == 2
    assert choose_cutoff(J, threshold=0.3 ** 8 * 0.99) == 3


@pytest.fixture(scope="module")
def report():
    return decay_experiment(CFG, Z4, n_max=4, ensemble=6, keep_ledger=True)


class TestDecayExperiment:
    def test_shapes(self, report):
        assert list(report.n) == [0, 2, 4]
        assert report.mean_rho8[0] == pytest.approx(1.0)
        assert len(report.betas) == 2

    def test_ito_two_routes(self, report):
        led = report.ledger
        assert np.allclose(led.ito[-1], led.ito_recomputed(), rtol=1e-12)

    def test_member_matches_single_trajectory_api(self, report):
        # replay member 0 and rebuild its first control with the path API
        led = report.ledger
        seed = derive_seeds(CFG.seed, 6, "control")[0]
        tr = integrate(SpectralField.zeros(4), CFG.with_(seed=seed), Z4)
        beta = led.betas[0].beta
        v = control_segment(tr, 0, led.xi[0], beta)
        ito = float(np.sum(v.values[:-1] * tr.noise[:100]))
        assert ito == pytest.approx(led.ito[1][0], rel=1e-10, abs=1e-14)
        sp = residual_update(tr, 0, led.xi[0], beta, led.N)
        assert np.allclose(sp.rho_next, led.rho[2][0], atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValidationError):
            decay_experiment(CFG, Z4, n_max=3, ensemble=2)


def test_block_ops_requires_two_blocks():
    from glsim.sde import Stepper
    st = Stepper(4, 0.01, Z4, True)
    with pytest.raises(ValidationError):
        block_ops(st, np.zeros((200, 8)))


def test_gradient_probe_routes_agree():
    cfg = SolverConfig(n_modes=4, dt=1e-2, T=1.0, seed=3)
    phi = CappedLowModes(delta=2.0, N=2)
    rep = gradient_probe(phi, 0.5 * basis(1, 4), 0.5, cfg, Z4, ensemble=64, gamma0=1.0)
    assert abs(rep.lhs - rep.lhs_adjoint) <= 4 * rep.lhs_se + 1e-6
    assert rep.rhs > 0 and rep.ensemble == 64


class TestControlExamples:
    def test_zero_residual_gives_zero_control(self, traj):
        v = control_segment(traj, 1, np.zeros(8), 0.3)
        assert np.all(v.values == 0.0)

    def test_linear_single_mode_closed_form(self):
        # U = 0, Z0 = {1}: J = I on mode 1 and M = b^2 there, so v = b / (b^2 + beta)
        b, beta = 0.8, 0.25
        cfg = SolverConfig(n_modes=4, dt=1e-2, T=2.0, nonlinear=False)
        tr = integrate(SpectralField.zeros(4), cfg, ForcingSpec.uniform([1], b),
                       noise=np.zeros((200, 1)))
        v = control_segment(tr, 0, basis(1, 4).coeffs, beta)
        assert np.allclose(v.values, b / (b * b + beta), rtol=1e-12)

    def test_delta_one_accepts_first_trial(self, traj):
        ops = block_ops(traj.stepper(), traj.full_states()[:201][:, None])
        ch = choose_beta(ops, default_xi(4)[None], 2, delta=1.0)
        assert ch.accepted and len(ch.trials) == 1 and ch.ratio <= 1.0

    def test_linear_ratio_monotone_in_beta(self):
        cfg = SolverConfig(n_modes=4, dt=1e-2, T=2.0, nonlinear=False)
        tr = integrate(SpectralField.zeros(4), cfg, ForcingSpec.uniform([1]),
                       noise=np.zeros((200, 1)))
        ops = block_ops(tr.stepper(), tr.full_states()[:, None])
        rho = basis(1, 4).coeffs[None]
        ratios = [low_ratio(ops, rho, b, 1)[0] for b in 0.5 ** np.arange(8)]
        assert np.all(np.diff(ratios) < 0)

    def test_strict_decay_raises(self):
        with pytest.raises(BudgetExhausted):
            decay_experiment(CFG, Z4, n_max=2, ensemble=2, delta=1e-30, budget=1, strict=True)
