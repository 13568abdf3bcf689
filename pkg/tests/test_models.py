import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakcv.errors import AccuracyError, ConfigurationError, NumericalError
from weakcv.models import (
    SdeModel,
    available_models,
    builtin_model,
    finite_difference_derivatives,
    gauss_hermite_reference,
    register_model,
    scheme_derivatives,
)


def test_builtin_ids():
    assert {"motivating", "arsinh1d", "fivedim"} <= set(available_models())
    with pytest.raises(ConfigurationError):
        builtin_model("nope")


def test_reference_values_match_known_digits():
    assert builtin_model("arsinh1d").reference_value == pytest.approx(0.789640, abs=5e-7)
    assert builtin_model("fivedim").reference_value == pytest.approx(0.002069, abs=5e-7)


def test_arsinh_reference_against_mpmath():
    # independent adaptive quadrature in extended precision
    mpmath.mp.dps = 30
    phi = lambda w: mpmath.exp(-w * w / 2) / mpmath.sqrt(2 * mpmath.pi)
    val = mpmath.quad(lambda w: phi(w) / mpmath.sqrt(1 + w * w), [-mpmath.inf, 0, mpmath.inf])
    assert builtin_model("arsinh1d").reference_value == pytest.approx(float(val), abs=1e-10)


def test_fivedim_reference_against_mpmath():
    mpmath.mp.dps = 25
    phi = lambda w: mpmath.exp(-w * w / 2) / mpmath.sqrt(2 * mpmath.pi)
    one = mpmath.quad(lambda w: phi(w) * mpmath.cos(mpmath.atan(w) + mpmath.asinh(w)), [-mpmath.inf, 0, mpmath.inf])
    last = mpmath.exp(-0.5)
    assert builtin_model("fivedim").reference_value == pytest.approx(float(one**4 * last), abs=1e-10)


def test_payoffs():
    m = builtin_model("arsinh1d")
    x = np.array([[0.3], [-1.2]])
    np.testing.assert_allclose(m.f(x), 1 / np.cosh(x[:, 0]) + 15 * np.arctan(x[:, 0]))
    f5 = builtin_model("fivedim")
    x = np.arange(10.0).reshape(2, 5) / 7
    expect = np.cos(x.sum(axis=1)) - 20 * np.sin(x[:, :4]).sum(axis=1)
    np.testing.assert_allclose(f5.f(x), expect)


def test_motivating_is_driftless():
    m = builtin_model("motivating")
    x = np.linspace(-3, 3, 7)[:, None]
    assert np.all(m.mu(x) == 0)
    assert m.params == {"sigma": 1.0, "x0": 1.0, "T": 1.0}
    with pytest.raises(ConfigurationError):
        builtin_model("motivating", sigma=0.0)


@pytest.mark.parametrize("name", ["motivating", "arsinh1d", "fivedim"])
def test_shapes(name):
    m = builtin_model(name)
    x = np.zeros((3, m.d))
    assert m.mu(x).shape == (3, m.d)
    assert m.sigma(x).shape == (3, m.d, m.m)
    data = scheme_derivatives(m, x)
    assert data.L0mu.shape == (3, m.d)
    assert data.Lkmu.shape == (3, m.m, m.d)
    assert data.L0sigma.shape == (3, m.d, m.m)
    assert data.Lksigma.shape == (3, m.m, m.d, m.m)


def test_motivating_operator_by_hand():
    sigma = 0.7
    m = builtin_model("motivating", sigma=sigma)
    for x in (0.5, 1.0, -2.0):
        data = scheme_derivatives(m, np.array([x]))
        assert data.Lksigma[0, 0, 0] == pytest.approx(sigma**2 * x, rel=1e-14)
        assert data.L0mu[0] == 0.0


def test_constant_coefficients_give_zero_operators():
    m = SdeModel(
        "const", 1, 1, [0.0], 1.0,
        lambda x: np.zeros_like(x), lambda x: np.full((len(x), 1, 1), 0.4), lambda x: x[:, 0],
    )
    data = scheme_derivatives(m, np.array([[0.3], [2.0]]))
    for arr in data.arrays():
        assert np.all(np.abs(arr) < 1e-9)


@pytest.mark.parametrize("name", ["motivating", "arsinh1d", "fivedim"])
def test_finite_differences_match_analytic(name):
    m = builtin_model(name)
    rng = np.random.default_rng(3)
    x = rng.normal(scale=0.8, size=(10, m.d))
    exact = m.derivative_data(x)
    approx = finite_difference_derivatives(m, x)
    for a, b in zip(exact.arrays(), approx.arrays()):
        scale = max(1.0, float(np.max(np.abs(a))))
        assert np.max(np.abs(a - b)) <= 1e-6 * scale


def test_arsinh_L0mu_at_zero_against_differences():
    m = builtin_model("arsinh1d")
    a = m.derivative_data(np.zeros((1, 1))).L0mu[0, 0]
    b = finite_difference_derivatives(m, np.zeros((1, 1))).L0mu[0, 0]
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


def test_non_finite_operator_reports_index():
    m = SdeModel(
        "bad", 1, 1, [0.0], 1.0,
        lambda x: np.where(x > 0, x, np.nan), lambda x: np.ones((len(x), 1, 1)), lambda x: x[:, 0],
    )
    with pytest.raises(NumericalError, match="index"):
        scheme_derivatives(m, np.array([[1.0], [-1.0]]))


def test_quadrature_examples():
    assert gauss_hermite_reference(lambda w: np.ones_like(w)) == pytest.approx(1.0, abs=1e-14)
    assert gauss_hermite_reference(np.cos) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert gauss_hermite_reference(lambda w: 1 / np.sqrt(1 + w * w), nodes=32) == pytest.approx(0.789640, abs=5e-7)
    with pytest.raises(ConfigurationError):
        gauss_hermite_reference(np.cos, nodes=1)


def test_quadrature_non_convergence():
    with pytest.raises(AccuracyError):
        gauss_hermite_reference(np.abs, nodes=2, tol=1e-15, max_nodes=64)


def test_arsinh_reference_is_quadrature_of_payoff():
    m = builtin_model("arsinh1d")
    val = gauss_hermite_reference(lambda w: m.f(np.arcsinh(w)[:, None]), nodes=32)
    assert val == pytest.approx(m.reference_value, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.2, 2.0))
def test_motivating_scheme_data_is_analytic(x, sigma):
    m = builtin_model("motivating", sigma=sigma)
    data = scheme_derivatives(m, np.array([x]))
    # sigma'' = 0 and mu = 0, so both vanish
    assert data.L0sigma[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert data.Lkmu[0, 0] == 0.0


def test_register_model():
    def factory():
        return SdeModel("toy", 1, 1, [0.0], 1.0, lambda x: 0 * x, lambda x: np.ones((len(x), 1, 1)), lambda x: x[:, 0])

    register_model("toy_registered", factory)
    assert builtin_model("toy_registered").name == "toy"
    with pytest.raises(ConfigurationError):
        register_model("toy_registered", factory)
    register_model("toy_registered", factory, replace=True)
