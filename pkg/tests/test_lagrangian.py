import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stovar as sv
from stovar.exceptions import InputError


def harmonic_spec_1d():
    return sv.LagrangianSpec(sv.QuadraticForm([[1.0]]), sv.harmonic_potential(1.0), 1)


def test_zero_case():
    spec = harmonic_spec_1d()
    assert spec.value([0.0], [0.0]) == 0.0 + 0.0j


def test_direct_arithmetic():
    spec = harmonic_spec_1d()
    # q(3) - U(2) = 4.5 - 2.0
    assert spec.value([2.0], [3.0]) == pytest.approx(2.5 + 0.0j)


def test_holomorphic_extension_squares_i():
    spec = harmonic_spec_1d()
    # q(i) = 0.5 * i^2 = -0.5, minus U(1) = 0.5
    val = spec.value([1.0], [1.0j])
    assert val == pytest.approx(-1.0 + 0.0j)


def test_partials_linear_forms():
    spec = harmonic_spec_1d()
    dx, dv = spec.partials([1.0], [1.0 + 1.0j])
    assert dx == pytest.approx(-1.0)
    assert dv == pytest.approx(1.0 + 1.0j)


def test_partials_zero_case():
    spec = sv.LagrangianSpec(sv.QuadraticForm([[1.0]]), sv.free_potential(), 1)
    dx, dv = spec.partials([3.7], [0.0])
    assert dx == pytest.approx(0.0)
    assert dv == pytest.approx(0.0)


def test_partials_componentwise_2d():
    spec = sv.LagrangianSpec(sv.QuadraticForm(np.eye(2)), sv.harmonic_potential(2.0), 2)
    dx, dv = spec.partials([1.0, 0.0], [0.0, 1.0j])
    assert np.allclose(dx, [-4.0, 0.0])
    assert np.allclose(dv, [0.0, 1.0j])


def test_dimension_mismatch_raises():
    spec = harmonic_spec_1d()
    with pytest.raises(InputError):
        spec.value([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(InputError):
        sv.QuadraticForm([[1.0, 2.0], [0.0, 1.0]])  # not symmetric


def test_real_on_real_batch():
    spec = harmonic_spec_1d()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100, 1))
    v = rng.standard_normal((100, 1))
    vals = spec.value(x, v.astype(complex))
    assert np.all(vals.imag == 0.0)


@settings(max_examples=50, deadline=None)
@given(
    lam=st.complex_numbers(max_magnitude=5.0, allow_nan=False, allow_infinity=False),
    vre=st.floats(-3, 3), vim=st.floats(-3, 3),
)
def test_quadratic_form_two_homogeneous(lam, vre, vim):
    q = sv.QuadraticForm([[2.0, 0.5], [0.5, 1.0]])
    v = np.array([vre + 1j * vim, 0.3 - 0.2j])
    assert q.value(lam * v) == pytest.approx(lam**2 * q.value(v), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_velocity_gradient_additive(a, b):
    q = sv.QuadraticForm([[2.0, 0.5], [0.5, 1.0]])
    v1 = np.array([a + 0.2j, -1.0])
    v2 = np.array([0.5, b - 0.7j])
    lhs = q.gradient(v1 + v2)
    rhs = q.gradient(v1) + q.gradient(v2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_velocity_gradient_matches_finite_difference():
    spec = sv.LagrangianSpec(sv.QuadraticForm([[2.0, 0.5], [0.5, 1.0]]),
                             sv.harmonic_potential(1.3), 2)
    rng = np.random.default_rng(5)
    x = rng.standard_normal(2)
    v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    h = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    eps = 1e-5
    fd = (spec.value(x, v + eps * h) - spec.value(x, v - eps * h)) / (2 * eps)
    _, dv = spec.partials(x, v)
    assert abs(fd - np.dot(dv, h)) <= 1e-4 * max(1.0, abs(np.dot(dv, h)))


def test_check_admissible_passes_harmonic():
    report = sv.check_admissible(harmonic_spec_1d(), n_probes=100, seed=1)
    assert report.passed
    assert report.max_abs_imag == 0.0


def test_check_admissible_catches_broken_gradient():
    good = sv.harmonic_potential(1.0)
    broken = sv.Potential(energy=good.energy, gradient=lambda x: 2.0 * good.gradient(x),
                          name="broken")
    spec = sv.LagrangianSpec(sv.QuadraticForm([[1.0]]), broken, 1)
    report = sv.check_admissible(spec, n_probes=100, seed=2)
    assert not report.passed
    assert any("gradU" in msg for msg in report.failures)


def test_check_admissible_cosine_potential():
    pot = sv.Potential(energy=lambda x: np.cos(x[:, 0]),
                       gradient=lambda x: -np.sin(x), name="cosine")
    spec = sv.LagrangianSpec(sv.QuadraticForm([[1.0]]), pot, 1)
    report = sv.check_admissible(spec, n_probes=100, seed=3, grad_rtol=1e-5)
    assert report.passed


def test_central_power_potential_gradient():
    pot = sv.central_power_potential(k=0.7, alpha=3.0)
    spec = sv.LagrangianSpec(sv.QuadraticForm(np.eye(2)), pot, 2)
    report = sv.check_admissible(spec, n_probes=50, seed=4)
    assert report.passed


def test_tabulated_potential_roundtrip():
    r = np.linspace(0.1, 5.0, 60)
    pot = sv.tabulated_potential(r, 0.5 * r**2)
    x = np.array([[1.2, 0.9]])
    assert pot.value(x, 2)[0] == pytest.approx(0.5 * (1.2**2 + 0.9**2), rel=1e-6)
    grad = pot.grad(x, 2)
    assert np.allclose(grad, x, rtol=1e-5)
