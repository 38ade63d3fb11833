import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glsim.errors import ValidationError
from glsim.observables import CappedLowModes, ClippedMode, Constant, from_descriptor
from glsim.spectral import mode_index
from glsim.stats import batch_means, batch_means_variance, exp_fit, power_law_fit

OBS = [Constant(2.0), CappedLowModes(1.5, 2), ClippedMode(-2, 0.7)]


def _kink_distance(phi, u):
    if isinstance(phi, CappedLowModes):
        r = np.linalg.norm(u[np.abs(np.r_[np.arange(-4, 0), np.arange(1, 5)]) <= phi.N])
        return min(r, abs(r - phi.delta))
    if isinstance(phi, ClippedMode):
        return abs(abs(u[mode_index(phi.k, 4)]) - phi.delta)
    return np.inf


@pytest.mark.parametrize("phi", OBS, ids=lambda p: type(p).__name__)
@settings(max_examples=40, deadline=None)
@given(u=arrays(np.float64, 8, elements=st.floats(-2, 2)))
def test_gradient_matches_finite_difference(phi, u):
    eps = 1e-7
    assume(_kink_distance(phi, u) > 1e-4)
    fd = np.array([(phi.value(u + eps * e) - phi.value(u - eps * e)) / (2 * eps)
                   for e in np.eye(8)])
    assert np.allclose(phi.grad(u), fd, atol=1e-6)


@pytest.mark.parametrize("phi", OBS, ids=lambda p: type(p).__name__)
def test_bounded_and_lipschitz(phi):
    rng = np.random.default_rng(0)
    u = 10 * rng.standard_normal((200, 8))
    v = phi.value(u)
    assert np.all(np.abs(v) <= 2.0)
    w = phi.value(u + 1e-3 * rng.standard_normal((200, 8)))
    assert np.all(np.abs(w - v) <= 1e-3 * 8 / 0.7)


def test_batch_shapes():
    u = np.zeros((3, 5, 8))
    for phi in OBS:
        assert phi.value(u).shape == (3, 5) and phi.grad(u).shape == u.shape


def test_descriptor_round_trip():
    for phi in OBS:
        assert from_descriptor(phi.describe()) == phi
    with pytest.raises(ValidationError):
        from_descriptor({"kind": "nope"})
    with pytest.raises(ValidationError):
        from_descriptor({"kind": "constant", "x": 1})
    with pytest.raises(ValidationError):
        CappedLowModes(delta=0.0)


class TestStats:
    def test_exp_fit_exact(self):
        t = np.linspace(0, 4, 9)
        f = exp_fit(t, 3.0 * np.exp(-0.7 * t))
        assert f.rate == pytest.approx(0.7) and f.r2 == pytest.approx(1.0)
        assert f.intercept == pytest.approx(np.log(3.0))

    def test_exp_fit_needs_points(self):
        with pytest.raises(ValidationError):
            exp_fit([0, 1, 2], [1.0, 0.0, -1.0])

    def test_batch_means_iid(self):
        x = np.random.default_rng(3).standard_normal(20000)
        m, se = batch_means(x, 20)
        assert abs(m) < 4 * se
        assert se == pytest.approx(1 / np.sqrt(20000), rel=0.5)

    def test_batch_means_variance_white_noise(self):
        # iid samples of variance s2 every dt: the asymptotic variance is s2 * dt
        x = 2.0 * np.random.default_rng(4).standard_normal(200000)
        est = batch_means_variance(x, 0.01, 40)
        assert est == pytest.approx(0.04, rel=0.5)

    def test_power_law(self):
        x = np.array([1.0, 2.0, 4.0])
        assert power_law_fit(x, 5 * x ** -1.5)[0] == pytest.approx(-1.5)
