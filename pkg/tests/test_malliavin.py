import math

import numpy as np
import pytest
from scipy.stats import ortho_group

from glsim.errors import ValidationError
from glsim.malliavin import (ConeSpec, MalliavinMatrix, apply_Astar, apply_control_operator,
                             assemble_batch, assemble_factor, assemble_M, epsilon_statistics,
                             numerical_rank, quad_form_via_adjoint, quad_QN, resolvent_checks,
                             spectral_floor, sweep, trapezoid_weights)
from glsim.sde import ForcingSpec, SolverConfig, integrate
from glsim.spectral import basis, mode_index, space
from glsim.variational import tangent_matrix

Z4 = ForcingSpec.uniform([-2, -1, 1, 2])
CFG = SolverConfig(n_modes=8, dt=1e-3, T=0.3, seed=8)


@pytest.fixture(scope="module")
def traj():
    return integrate(2 * basis(1, 8), CFG, Z4)


class TestAssembly:
    def test_trapezoid_weights(self):
        assert np.allclose(trapezoid_weights(4, 0.5), [0.25, 0.5, 0.5, 0.5, 0.25])
        assert trapezoid_weights(4, 0.5).sum() == pytest.approx(2.0)

    def test_factor_oracle(self, traj):
        F = assemble_factor(traj, 0.1, 0.3)
        M = assemble_M(traj, 0.1, 0.3).entries
        assert np.allclose(M, F @ F.T, atol=1e-14 * np.abs(M).max())

    def test_sweep_returns_tangent(self, traj):
        st = traj.stepper()
        out = sweep(st, traj.full_states()[100:301])
        assert np.allclose(out["J"], tangent_matrix(traj, 0.1, 0.3), atol=1e-13)

    def test_quad_form_consistency(self, traj):
        phi = np.random.default_rng(1).standard_normal(16)
        M = assemble_M(traj, 0.0, 0.3)
        assert M.quad(phi) == pytest.approx(quad_form_via_adjoint(traj, phi, 0.3), rel=1e-12)

    def test_A_Astar_equals_M(self, traj):
        phi = np.random.default_rng(2).standard_normal(16)
        v = apply_Astar(traj, 0.0, 0.3, phi)
        got = apply_control_operator(traj, 0.0, 0.3, v)
        M = assemble_M(traj, 0.0, 0.3).entries
        assert np.allclose(got, M @ phi, atol=1e-13 * np.linalg.norm(M @ phi))

    def test_A_and_Astar_are_adjoint(self, traj):
        rng = np.random.default_rng(3)
        phi = rng.standard_normal(16)
        v = apply_Astar(traj, 0.0, 0.3, rng.standard_normal(16))
        v.values = rng.standard_normal(v.values.shape)
        lhs = phi @ apply_control_operator(traj, 0.0, 0.3, v)
        rhs = v.inner(apply_Astar(traj, 0.0, 0.3, phi))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_batch_matches_single(self, traj):
        st = traj.stepper()
        s = traj.full_states()
        batch = np.stack([s, s[::-1]], axis=1)[:101]
        Ms = assemble_batch(st, batch)
        assert np.allclose(Ms[0], assemble_M(traj, 0.0, 0.1).entries, atol=1e-15)

    def test_positive_semidefinite(self, traj):
        assert assemble_M(traj, 0, 0.3).eigvalsh()[0] > -1e-14

    def test_symmetrized(self):
        m = MalliavinMatrix(0, 1, np.array([[1.0, 2.0], [0.0, 1.0]]))
        assert np.array_equal(m.entries, m.entries.T)


class TestLinearClosedForm:
    def test_diagonal_entries(self):
        cfg = SolverConfig(n_modes=4, dt=1e-3, T=1.0, nonlinear=False)
        f = ForcingSpec.uniform([1, 2, -3], beta=0.7)
        tr = integrate(basis(1, 4), cfg, f)
        M = assemble_M(tr, 0, 1).entries
        for k in (1, 2, -3):
            lam = 1.0 - k * k
            i = mode_index(k, 4)
            exact = 0.49 * (1.0 if lam == 0 else math.expm1(2 * lam) / (2 * lam))
            assert abs(M[i, i] - exact) <= 1e-6
        off = M - np.diag(np.diag(M))
        assert np.abs(off).max() == 0.0
        assert numerical_rank(M) == 3


class TestRank:
    def test_rank_grows_under_nonlinearity(self):
        cfg = SolverConfig(n_modes=8, dt=1e-3, T=1.0, seed=2)
        tr = integrate(basis(1, 8), cfg, Z4)
        assert numerical_rank(assemble_M(tr, 0, 1)) > Z4.size

    def test_rank_threshold_relative(self):
        m = np.diag([1e-12, 1e-20, 0.0])
        assert numerical_rank(m, 1e-8) == 1


def _diag_cone_min(d, mask, alpha):
    lo, hi = d[mask].min(), d[~mask].min() if (~mask).any() else np.inf
    return lo if hi >= lo else alpha * lo + (1 - alpha) * hi


class TestFloor:
    @pytest.mark.parametrize("alpha", [0.2, 0.5, 0.9, 1.0])
    def test_rotated_diagonal_oracle(self, alpha):
        # rotations inside range(P_N) and its complement preserve the cone
        rng = np.random.default_rng(int(alpha * 10))
        D, N = 12, 2
        mask = space(D // 2).projector_mask(N)
        d = rng.uniform(0.1, 2.0, D)
        R = np.zeros((D, D))
        pi, qi = np.flatnonzero(mask), np.flatnonzero(~mask)
        R[np.ix_(pi, pi)] = ortho_group.rvs(pi.size, random_state=rng)
        R[np.ix_(qi, qi)] = ortho_group.rvs(qi.size, random_state=rng)
        M = R @ np.diag(d) @ R.T
        rep = spectral_floor(M, ConeSpec(alpha, N), budget=32, rng=rng)
        want = _diag_cone_min(d, mask, alpha)
        assert rep.dual_bound == pytest.approx(want, rel=1e-7)
        assert rep.sampled_min >= want - 1e-10
        assert rep.sampled_min == pytest.approx(want, rel=1e-3)
        assert rep.floor <= rep.subspace_min + 1e-12

    def test_sampled_points_lie_in_cone(self, traj):
        M = assemble_M(traj, 0, 0.3)
        rep = spectral_floor(M, ConeSpec(0.5, 3), budget=16)
        assert 0.0 <= rep.floor <= rep.sampled_min + 1e-15
        assert rep.dual_bound <= rep.sampled_min * (1 + 1e-6) + 1e-15

    def test_cone_spec(self):
        with pytest.raises(ValidationError):
            ConeSpec(0.0, 2)
        with pytest.raises(ValidationError):
            ConeSpec(0.5, 0)
        c = ConeSpec(0.5, 1)
        assert c.contains(basis(1, 4)) and not c.contains(basis(3, 4))
        assert quad_QN(basis(-1, 4) + basis(2, 4), 1) == 1.0

    def test_bad_inputs(self):
        with pytest.raises(ValidationError):
            spectral_floor(np.eye(8), ConeSpec(0.5, 5))
        with pytest.raises(ValidationError):
            spectral_floor(np.eye(8), ConeSpec(0.5, 1), budget=0)


class TestResolvent:
    def test_bounds_hold(self, traj):
        M = assemble_M(traj, 0, 0.3)
        F = assemble_factor(traj, 0, 0.3)
        for beta in (1e-6, 1e-2, 1.0):
            rep = resolvent_checks(M, beta, factor=F)
            assert rep["all_hold"], rep

    def test_factor_norm_matches_eigen_route(self, traj):
        M = assemble_M(traj, 0, 0.3)
        F = assemble_factor(traj, 0, 0.3)
        a = resolvent_checks(M, 0.1)
        b = resolvent_checks(M, 0.1, factor=F)
        assert a["Rinvsqrt_A"]["value"] == pytest.approx(b["Rinvsqrt_A"]["value"], rel=1e-8)

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValidationError):
            resolvent_checks(np.eye(2), 0.0)


def test_epsilon_statistics():
    out = epsilon_statistics([0.1, 1e-5, 1e-3, 0.0], [1e-2, 1e-4])
    assert list(out["eps"]) == [1e-4, 1e-2]
    assert list(out["r"]) == [0.5, 0.75]
    with pytest.raises(ValidationError):
        epsilon_statistics([], [1.0])
