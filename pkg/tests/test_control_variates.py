import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import enumerated_bundle, weighted_var
from weakcv.control_variates import (
    CvModel,
    coefficients_from_q,
    control_variate_values,
    evaluate_cv,
    exact_cv_motivating,
    fit_rcv,
    fit_rrcv,
    motivating_coefficients,
    one_step_coefficients,
)
from weakcv.errors import ConfigurationError, ContractViolation
from weakcv.models import SdeModel, builtin_model
from weakcv.oracle import enumerate_law, exact_coefficients, exact_q, verification_fixture
from weakcv.regression import BasisSpec, evaluate
from weakcv.schemes import SchemeSpec, simulate_paths

GLOBAL3 = BasisSpec("global_poly", 3, 1, include_payoff=True)


def brownian(payoff=lambda x: x[:, 0], sigma=1.0, name="bm"):
    return SdeModel(
        name, 1, 1, [0.0], 1.0,
        lambda x: np.zeros_like(x), lambda x: np.full((len(x), 1, 1), sigma), payoff,
    )


def trained(model, spec, method, basis, N=300, seed=1, truncation="default"):
    training = simulate_paths(model, spec, N, seed, "train")
    return (fit_rcv if method == "rcv" else fit_rrcv)(training, model, basis, truncation)


def true_coefficient_error(cv, model, spec):
    """Sum over steps and terms of E[(a_tilde - a)^2 (X_{j-1})] under the scheme law."""
    law = enumerate_law(model, spec)
    total = 0.0
    for j in range(1, spec.J + 1):
        x = law.levels[j - 1]
        exact = exact_coefficients(model, spec, j, x).reshape(len(x), -1)
        approx = evaluate(cv.estimates[j - 1], x) if cv.method == "rcv" else coefficients_from_q(cv, model, j, x)
        total += law.level_prob(j - 1) @ np.sum((approx.reshape(exact.shape) - exact) ** 2, axis=1)
    return float(total)


# --------------------------------------------------------------------------
# Closed-form perfect control variate


def test_exact_cv_on_all_paths():
    m = builtin_model("motivating")
    spec = SchemeSpec(1, 4)
    bundle, prob = enumerated_bundle(m, spec)
    assert bundle.N == 16
    resid = bundle.terminal[:, 0] ** 2 - exact_cv_motivating(1.0, 1.0, spec, bundle)
    np.testing.assert_allclose(resid, 2.44140625, rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 1.5), st.floats(-2.0, 2.0).filter(lambda v: abs(v) > 0.05), st.integers(1, 6))
def test_exact_cv_is_perfect(sigma, x0, J):
    m = builtin_model("motivating", sigma=sigma, x0=x0)
    spec = SchemeSpec(1, J)
    bundle, _ = enumerated_bundle(m, spec)
    resid = bundle.terminal[:, 0] ** 2 - exact_cv_motivating(sigma, x0, spec, bundle)
    target = x0**2 * (1 + sigma**2 * spec.Delta) ** J
    np.testing.assert_allclose(resid, target, rtol=1e-12)


def test_exact_cv_sampled_variance():
    m = builtin_model("motivating")
    spec = SchemeSpec(1, 4)
    b = simulate_paths(m, spec, 10**4, 3, "test")
    resid = b.terminal[:, 0] ** 2 - exact_cv_motivating(1.0, 1.0, spec, b)
    assert np.var(resid, ddof=1) <= 1e-20


def test_exact_cv_contract():
    spec = SchemeSpec(1, 2)
    b = simulate_paths(builtin_model("arsinh1d"), spec, 4, 0, "test")
    with pytest.raises(ContractViolation):
        exact_cv_motivating(1.0, 0.0, spec, b)
    b = simulate_paths(builtin_model("motivating", sigma=0.5), spec, 4, 0, "test")
    with pytest.raises(ContractViolation):
        exact_cv_motivating(1.0, 1.0, spec, b)


def test_closed_form_coefficients_match_oracle():
    m = builtin_model("motivating", sigma=0.8, x0=1.3)
    spec = SchemeSpec(1, 3)
    for j in (1, 2, 3):
        x = np.array([[0.5], [1.0], [2.0]])
        a1, _ = motivating_coefficients(0.8, 3, spec.Delta, j, x[:, 0])
        np.testing.assert_allclose(exact_coefficients(m, spec, j, x)[:, 0], a1, rtol=1e-12)


# --------------------------------------------------------------------------
# Fitting


def test_constant_payoff_gives_zero_coefficients():
    m = brownian(payoff=lambda x: np.full(len(x), 3.0), name="flat")
    spec = SchemeSpec(2, 3)
    N = 10**4
    cv = trained(m, spec, "rcv", BasisSpec("global_poly", 2, 1), N=N)
    probe = np.linspace(-1, 1, 5)[:, None]
    for est in cv.estimates:
        # responses are 3 * (mean-zero unit-variance factor)
        assert np.max(np.abs(evaluate(est, probe))) <= 3 * 3.0 * math.sqrt(3 / N) * 3


def test_rcv_recovers_motivating_coefficients():
    m = builtin_model("motivating")
    spec = SchemeSpec(1, 4)
    training = simulate_paths(m, spec, 10**5, 2, "train")
    cv = fit_rcv(training, m, BasisSpec("global_poly", 2, 1))
    for j in range(1, 5):
        x = training.states[:, j - 1]
        a1, _ = motivating_coefficients(1.0, 4, spec.Delta, j, x[:, 0])
        got = evaluate(cv.estimates[j - 1], x)[:, 0]
        assert math.sqrt(np.mean((got - a1) ** 2) / np.mean(a1**2)) <= 0.05


def test_rcv_converges_to_enumerated_coefficients():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(1, 2)
    N = 10**6
    training = simulate_paths(m, spec, N, 4, "train")
    cv = fit_rcv(training, m, GLOBAL3)
    fT = m.f(training.terminal)
    for j in (1, 2):
        states = training.states[:, j - 1, 0]
        y = training.xi_codes[:, j - 1, 0].astype(float)
        for x in np.unique(states):
            mask = states == x
            se = np.std(fT[mask] * y[mask]) / math.sqrt(mask.sum())
            got = evaluate(cv.estimates[j - 1], np.array([x]))[0]
            want = exact_coefficients(m, spec, j, np.array([x]))[0]
            assert abs(got - want) <= 3 * se


def test_rrcv_martingale_case():
    # trained on the full tree of equally likely order-1 paths, where the
    # increments are exactly orthogonal to every function of the state
    m = SdeModel(
        "bm", 1, 1, [0.3], 1.0,
        lambda x: np.zeros_like(x), lambda x: np.full((len(x), 1, 1), 0.7), lambda x: x[:, 0],
    )
    spec = SchemeSpec(1, 4)
    training, _ = enumerated_bundle(m, spec, phase="train")
    cv = fit_rrcv(training, m, BasisSpec("global_poly", 1, 1))
    probe = np.linspace(-2, 2, 9)[:, None]
    for j in range(1, spec.J):
        np.testing.assert_allclose(cv.q(j, m, probe), probe[:, 0], atol=1e-6)
    assert cv.q(0, m, m.x0[None, :])[0] == pytest.approx(0.3, abs=1e-6)
    # q_J is the payoff itself
    assert np.array_equal(cv.q(spec.J, m, probe), m.f(probe))
    assert len(cv.estimates) == spec.J


def test_rrcv_q0_against_enumeration():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(1, 2)
    N = 10**6
    training = simulate_paths(m, spec, N, 8, "train")
    cv = fit_rrcv(training, m, GLOBAL3)
    se = np.std(m.f(training.terminal)) / math.sqrt(N)
    exact = exact_q(m, spec, 0, m.x0)
    assert abs(cv.q(0, m, m.x0[None, :])[0] - exact) <= 3 * se


def test_one_step_coefficient_examples():
    m = brownian()
    x = np.array([[0.3], [-1.1]])
    D = 0.25
    out = one_step_coefficients(m, 1, x, D, lambda z: np.full(len(z), 2.0))
    np.testing.assert_allclose(out, 0.0, atol=1e-14)
    out = one_step_coefficients(m, 1, x, D, lambda z: z[:, 0])
    np.testing.assert_allclose(out[:, 0], math.sqrt(D), atol=1e-15)
    out = one_step_coefficients(m, 2, x, D, lambda z: z[:, 0] ** 2)
    np.testing.assert_allclose(out[:, 0], 2 * x[:, 0] * math.sqrt(D), atol=1e-14)
    np.testing.assert_allclose(out[:, 1], math.sqrt(2) * D, atol=1e-14)


def test_coefficients_from_q_contract():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(2, 2)
    cv = trained(m, spec, "rcv", GLOBAL3)
    with pytest.raises(ContractViolation):
        coefficients_from_q(cv, m, 1, np.array([0.0]))
    cv = trained(m, spec, "rrcv", GLOBAL3)
    with pytest.raises(ConfigurationError):
        coefficients_from_q(cv, m, 3, np.array([0.0]))
    assert coefficients_from_q(cv, m, 1, np.array([0.0])).shape == (2,)


# --------------------------------------------------------------------------
# Evaluation


def test_zero_model_gives_zero():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(2, 3)
    testing = simulate_paths(m, spec, 100, 0, "test")
    cv = CvModel.zero(m, spec)
    assert np.all(control_variate_values(cv, m, testing) == 0.0)
    assert evaluate_cv(cv, m, testing, 5) == 0.0


def test_sampled_mean_is_zero():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(2, 3)
    cv = trained(m, spec, "rrcv", GLOBAL3, N=500)
    M = control_variate_values(cv, m, simulate_paths(m, spec, 10**5, 5, "test"))
    assert abs(M.mean()) <= 3 * M.std(ddof=1) / math.sqrt(len(M))


def test_evaluate_cv_single_path_matches_batch():
    m = verification_fixture()
    spec = SchemeSpec(2, 2)
    cv = trained(m, spec, "rrcv", BasisSpec("global_poly", 2, 2, include_payoff=True))
    testing = simulate_paths(m, spec, 20, 4, "test")
    batch = control_variate_values(cv, m, testing)
    for i in (0, 7, 19):
        assert evaluate_cv(cv, m, testing, i) == pytest.approx(batch[i], abs=1e-14)
    with pytest.raises(ConfigurationError):
        evaluate_cv(cv, m, testing, 20)


def test_phase_contracts():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(2, 2)
    train = simulate_paths(m, spec, 50, 0, "train")
    test = simulate_paths(m, spec, 50, 0, "test")
    with pytest.raises(ContractViolation):
        fit_rrcv(test, m, GLOBAL3)
    cv = fit_rrcv(train, m, GLOBAL3)
    with pytest.raises(ContractViolation):
        control_variate_values(cv, m, train)
    other = simulate_paths(m, SchemeSpec(2, 3), 10, 0, "test")
    with pytest.raises(ContractViolation):
        control_variate_values(cv, m, other)
    with pytest.raises(ContractViolation):
        control_variate_values(cv, builtin_model("motivating"), simulate_paths(builtin_model("motivating"), spec, 5, 0, "test"))


def test_truncation_policy():
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(2, 2)
    pw = BasisSpec("piecewise_poly", 1, 1, Q=4, R=2.0)
    cv = trained(m, spec, "rcv", pw)
    assert cv.truncation["max_level"][0] is not None
    assert cv.estimates[0].truncation_level is not None
    cv = trained(m, spec, "rrcv", GLOBAL3)
    assert cv.estimates[0].truncation_level is None
    cv = trained(m, spec, "rrcv", GLOBAL3, truncation=0.5)
    assert np.all(np.abs(cv.q(0, m, np.linspace(-5, 5, 50)[:, None])) <= 0.5)


def test_cv_model_roundtrip(tmp_path):
    m = builtin_model("arsinh1d")
    spec = SchemeSpec(2, 3)
    testing = simulate_paths(m, spec, 200, 3, "test")
    for method, basis in (("rcv", GLOBAL3), ("rrcv", BasisSpec("piecewise_poly", 2, 1, Q=3, R=2.0))):
        cv = trained(m, spec, method, basis)
        path = tmp_path / f"{method}.wkcv"
        cv.save(path, m)
        back = CvModel.load(path, m)
        assert back.method == method and back.J == 3
        assert np.array_equal(control_variate_values(back, m, testing), control_variate_values(cv, m, testing))
        with pytest.raises(ContractViolation):
            CvModel.load(path, builtin_model("motivating"))


# --------------------------------------------------------------------------
# Exact identities on the finite probability space

CASES = [
    ("arsinh1d", 1, 3, "rcv"),
    ("arsinh1d", 2, 3, "rrcv"),
    ("arsinh1d", 2, 2, "rcv"),
    ("motivating", 1, 3, "rrcv"),
    ("fixture", 1, 3, "rcv"),
    ("fixture", 2, 2, "rrcv"),
    ("fixture", 2, 2, "rcv"),
]


def _case_model(name):
    return verification_fixture() if name == "fixture" else builtin_model(name)


@pytest.mark.parametrize("name,order,J,method", CASES)
def test_zero_mean_and_variance_identity(name, order, J, method):
    m = _case_model(name)
    spec = SchemeSpec(order, J)
    basis = BasisSpec("global_poly", 2, m.d, include_payoff=True)
    cv = trained(m, spec, method, basis, N=150)
    bundle, prob = enumerated_bundle(m, spec)
    M = control_variate_values(cv, m, bundle)
    f = m.f(bundle.terminal)
    assert abs(prob @ M) <= 1e-12
    lhs = weighted_var(f - M, prob)
    rhs = true_coefficient_error(cv, m, spec)
    assert lhs == pytest.approx(rhs, abs=1e-10)
    assert rhs > 1e-8  # the trained coefficients are not exact


@pytest.mark.parametrize("name,order,J,method", CASES)
def test_exact_coefficients_are_perfect(name, order, J, method):
    m = _case_model(name)
    spec = SchemeSpec(order, J)
    bundle, prob = enumerated_bundle(m, spec)
    law = enumerate_law(m, spec)
    f = m.f(bundle.terminal)
    M = np.zeros(bundle.N)
    from weakcv.stochastics import outcome_factors

    F = outcome_factors(order, m.m)
    idx = law.outcome_indices()
    K = law.K
    for j in range(1, J + 1):
        coef = exact_coefficients(m, spec, j, law.levels[j - 1]).reshape(K ** (j - 1), -1)
        node = np.arange(K**J) // K ** (J - j + 1)
        M += np.einsum("nt,nt->n", coef[node], F[idx[:, j - 1]])
    assert weighted_var(f - M, prob) <= 1e-24


@pytest.mark.parametrize("name,order,J", [("arsinh1d", 2, 3), ("arsinh1d", 1, 3), ("fixture", 2, 2), ("fixture", 1, 2)])
def test_rrcv_coefficient_error_bounded_by_q_error(name, order, J):
    m = _case_model(name)
    spec = SchemeSpec(order, J)
    cv = trained(m, spec, "rrcv", BasisSpec("global_poly", 1, m.d), N=120, seed=9)
    law = enumerate_law(m, spec)
    for j in range(1, J + 1):
        x_prev = law.levels[j - 1]
        a_err = (coefficients_from_q(cv, m, j, x_prev) - exact_coefficients(m, spec, j, x_prev).reshape(len(x_prev), -1)) ** 2
        a_norm = law.level_prob(j - 1) @ a_err  # per term
        x_j = law.levels[j]
        q_norm = law.level_prob(j) @ (cv.q(j, m, x_j) - exact_q(m, spec, j, x_j)) ** 2
        assert np.max(a_norm) <= q_norm + 1e-10
        assert np.sum(a_norm) <= q_norm + 1e-10  # Bessel
