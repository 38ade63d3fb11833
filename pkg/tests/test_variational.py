import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glsim.errors import ValidationError, WindowError
from glsim.sde import ForcingSpec, SolverConfig, integrate
from glsim.spectral import SpectralField, basis
from glsim.variational import (malliavin_derivative, propagate_adjoint, propagate_second,
                               propagate_tangent, tangent_matrix, tangent_norm_series)

Z4 = ForcingSpec.uniform([-2, -1, 1, 2])
CFG = SolverConfig(n_modes=8, dt=1e-3, T=0.5, seed=21)


@pytest.fixture(scope="module")
def traj():
    return integrate(1.5 * basis(1, 8) + basis(-3, 8), CFG, Z4)


def shifted(traj, dv):
    return integrate(SpectralField(traj.states[0] + dv), CFG, Z4, noise=traj.noise)


class TestTangent:
    def test_central_difference(self, traj):
        rng = np.random.default_rng(0)
        xi = rng.standard_normal(16)
        eps = 1e-5
        fd = (shifted(traj, eps * xi).final().coeffs
              - shifted(traj, -eps * xi).final().coeffs) / (2 * eps)
        got = propagate_tangent(traj, 0, 0.5, xi).coeffs
        assert np.linalg.norm(got - fd) <= 1e-6 * np.linalg.norm(fd)

    def test_matrix_columns(self, traj):
        J = tangent_matrix(traj, 0.1, 0.4)
        e5 = np.eye(16)[5]
        assert np.allclose(J[:, 5], propagate_tangent(traj, 0.1, 0.4, e5).coeffs, atol=1e-14)

    def test_composition(self, traj):
        J1 = tangent_matrix(traj, 0.0, 0.2)
        J2 = tangent_matrix(traj, 0.2, 0.5)
        assert np.allclose(J2 @ J1, tangent_matrix(traj, 0.0, 0.5), atol=1e-12)

    def test_identity_on_empty_window(self, traj):
        assert np.array_equal(tangent_matrix(traj, 0.3, 0.3), np.eye(16))

    def test_window_errors(self, traj):
        with pytest.raises(WindowError):
            propagate_tangent(traj, 0.4, 0.2, np.ones(16))
        with pytest.raises(WindowError):
            propagate_tangent(traj, 0.0, 0.7, np.ones(16))

    def test_dimension_mismatch(self, traj):
        with pytest.raises(ValidationError):
            propagate_tangent(traj, 0, 0.1, np.ones(5))

    def test_linear_equation_is_diagonal(self):
        cfg = CFG.with_(nonlinear=False)
        tr = integrate(basis(1, 8), cfg, Z4)
        J = tangent_matrix(tr, 0, 0.5)
        lam = 1 - np.concatenate([np.arange(-8, 0), np.arange(1, 9)]) ** 2.0
        assert np.allclose(J, np.diag(np.exp(lam * 0.5)), rtol=1e-12, atol=1e-300)

    def test_contraction_bound(self, traj):
        # d|xi|^2/dt <= 2 |xi|^2 since the linear part is bounded by 1 and -3U^2 <= 0
        s = tangent_norm_series(traj, 0, 0.5, np.ones(16))
        t = np.arange(len(s)) * CFG.dt
        assert np.all(s <= s[0] * np.exp(t) * (1 + 1e-12))


class TestAdjoint:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_duality(self, seed):
        tr = _shared()
        rng = np.random.default_rng(seed)
        xi, phi = rng.standard_normal((2, 16))
        lhs = phi @ propagate_tangent(tr, 0.05, 0.45, xi).coeffs
        rhs = propagate_adjoint(tr, 0.05, 0.45, phi).coeffs @ xi
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)


_TR = {}


def _shared():
    if "t" not in _TR:
        _TR["t"] = integrate(1.5 * basis(1, 8) + basis(-3, 8), CFG, Z4)
    return _TR["t"]


class TestSecondVariation:
    def test_finite_difference(self, traj):
        rng = np.random.default_rng(3)
        xi, xi2 = rng.standard_normal((2, 16))
        eps = 1e-4
        tr_p = shifted(traj, eps * xi2)
        tr_m = shifted(traj, -eps * xi2)
        fd = (propagate_tangent(tr_p, 0, 0.5, xi).coeffs
              - propagate_tangent(tr_m, 0, 0.5, xi).coeffs) / (2 * eps)
        got = propagate_second(traj, 0, 0.5, xi, xi2).coeffs
        assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_symmetry(self, traj):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 16))
        ab = propagate_second(traj, 0, 0.5, a, b).coeffs
        ba = propagate_second(traj, 0, 0.5, b, a).coeffs
        assert np.allclose(ab, ba, atol=1e-13)

    def test_vanishes_for_linear_equation(self):
        tr = integrate(basis(1, 8), CFG.with_(nonlinear=False), Z4)
        assert np.all(propagate_second(tr, 0, 0.5, np.ones(16), np.ones(16)).coeffs == 0)


class TestMalliavinDerivative:
    def test_noise_bump(self, traj):
        # bump channel j on step r by eps; the discrete increment scale is c_j
        j, r, eps = 1, 100, 1e-6
        noise = traj.noise.copy()
        noise[r, j] += eps
        bumped = integrate(SpectralField(traj.states[0]), CFG, Z4, noise=noise)
        fd = (bumped.final().coeffs - traj.final().coeffs) / eps
        st = traj.stepper()
        s = (r + 1) * CFG.dt
        want = st.conv_factor[j] * malliavin_derivative(traj, s, 0.5, j).coeffs
        assert np.linalg.norm(fd - want) <= 1e-5 * np.linalg.norm(want)

    def test_bad_channel(self, traj):
        with pytest.raises(ValidationError):
            malliavin_derivative(traj, 0.1, 0.5, 4)
