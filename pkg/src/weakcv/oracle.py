"""Exact computations on the finite probability space of a weak scheme.

With ``K`` one-step outcomes a scheme started at a fixed point has ``K^J``
equally structured paths.  They are laid out as a tree: node ``n`` at level
``j`` has parent ``n // K`` and was reached by outcome ``n % K``.  Every
expectation, conditional expectation and representation coefficient is then a
finite weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control_variates import exact_cv_motivating, one_step_coefficients, one_step_images
from .errors import ConfigurationError, ResourceError
from .models import SdeModel, operators_from_jets
from .schemes import SchemeSpec
from .stochastics import ENUMERATION_CAP, OutcomeTable, cv_terms, outcome_factors, outcome_table

__all__ = [
    "EnumeratedLaw",
    "enumerate_law",
    "exact_discrete_expectation",
    "exact_coefficient",
    "exact_coefficients",
    "exact_q",
    "verify_representation",
    "verify_gaussian_motivating",
    "coefficient_equivalence",
    "q_recursion_residual",
    "verification_fixture",
    "verification_suite",
]


@dataclass(frozen=True)
class EnumeratedLaw:
    """All scheme paths from ``x0``: ``levels[j]`` holds the ``K^j`` states at step ``j``."""

    table: OutcomeTable
    levels: tuple
    prob: np.ndarray

    @property
    def K(self) -> int:
        return len(self.table)

    @property
    def J(self) -> int:
        return len(self.levels) - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.levels[-1]

    def level_prob(self, j: int) -> np.ndarray:
        """Probabilities of the ``K^j`` nodes at level ``j``."""
        return self.prob.reshape(self.K**j, -1).sum(axis=1)

    def outcome_indices(self) -> np.ndarray:
        """Outcome index of every step along every path, ``(K^J, J)``."""
        n = np.arange(self.K**self.J)
        return np.stack([(n // self.K ** (self.J - j)) % self.K for j in range(1, self.J + 1)], axis=1)


def _check_cap(K: int, steps: int) -> None:
    if steps and K**steps > ENUMERATION_CAP:
        raise ResourceError(f"{K}^{steps} path outcomes exceed the enumeration cap {ENUMERATION_CAP}")


def _grow(model: SdeModel, order: int, x: np.ndarray, Delta: float, steps: int, v_free: bool):
    """States after each of ``steps`` steps from every row of ``x``; last level is ``(n*K^steps, d)``."""
    levels = [x]
    for _ in range(steps):
        images, _ = one_step_images(model, order, levels[-1], Delta, v_free)
        levels.append(images.reshape(-1, model.d))
    return levels


def enumerate_law(model: SdeModel, spec: SchemeSpec) -> EnumeratedLaw:
    table = outcome_table(spec.order, model.m, model.v_free)
    _check_cap(len(table), spec.J)
    levels = _grow(model, spec.order, model.x0[None, :], spec.Delta, spec.J, model.v_free)
    prob = np.ones(1)
    for _ in range(spec.J):
        prob = (prob[:, None] * table.prob[None, :]).ravel()
    return EnumeratedLaw(table, tuple(levels), prob)


def exact_discrete_expectation(model: SdeModel, spec: SchemeSpec, g=None) -> float:
    """``E[g(X_T)]`` on the scheme's finite space (``g`` defaults to the payoff)."""
    law = enumerate_law(model, spec)
    g = model.f if g is None else g
    vals = np.broadcast_to(np.asarray(g(law.terminal), dtype=float), law.prob.shape)
    return float(law.prob @ vals)


def _subtree_values(model: SdeModel, spec: SchemeSpec, x: np.ndarray, steps: int, g=None):
    """Payoff at the leaves of the ``steps``-step subtrees of each row of ``x``, ``(n, K^steps)``,
    with leaf probabilities ``(K^steps,)``."""
    table = outcome_table(spec.order, model.m, model.v_free)
    K = len(table)
    _check_cap(K, steps)
    leaves = _grow(model, spec.order, x, spec.Delta, steps, model.v_free)[-1]
    g = model.f if g is None else g
    vals = np.asarray(g(leaves), dtype=float).reshape(x.shape[0], K**steps)
    prob = np.ones(1)
    for _ in range(steps):
        prob = (prob[:, None] * table.prob[None, :]).ravel()
    return vals, prob, table


def exact_q(model: SdeModel, spec: SchemeSpec, j: int, x) -> np.ndarray:
    """``q_j(x) = E[f(X_T) | X_j = x]`` by enumerating the remaining ``J - j`` steps."""
    if not 0 <= j <= spec.J:
        raise ConfigurationError(f"step {j} outside 0..{spec.J}")
    x = np.asarray(x, dtype=float)
    xb = x.reshape(-1, model.d)
    vals, prob, _ = _subtree_values(model, spec, xb, spec.J - j)
    out = vals @ prob
    return out[0] if x.ndim == 1 else out


def exact_coefficients(model: SdeModel, spec: SchemeSpec, j: int, x) -> np.ndarray:
    """All coefficients ``a_{j,t}(x) = E[f(X_T) F_t(increment_j) | X_{j-1} = x]``.

    Computed directly over the ``K^{J-j+1}`` continuations of ``x``.  Returns
    ``(T,)`` for one point or ``(n, T)``.
    """
    if not 1 <= j <= spec.J:
        raise ConfigurationError(f"step {j} outside 1..{spec.J}")
    x = np.asarray(x, dtype=float)
    xb = x.reshape(-1, model.d)
    vals, prob, table = _subtree_values(model, spec, xb, spec.J - j + 1)
    K = len(table)
    F = outcome_factors(spec.order, model.m, model.v_free)
    first = np.repeat(np.arange(K), K ** (spec.J - j))
    out = (vals * prob) @ F[first]
    return out[0] if x.ndim == 1 else out


def exact_coefficient(model: SdeModel, spec: SchemeSpec, j: int, term, x) -> float:
    terms = cv_terms(spec.order, model.m, model.v_free)
    try:
        t = terms.index(term)
    except ValueError:
        raise ConfigurationError(f"{term!r} is not a term of this scheme") from None
    return float(exact_coefficients(model, spec, j, np.asarray(x, dtype=float).reshape(model.d))[t])


def verify_representation(model: SdeModel, spec: SchemeSpec) -> float:
    """Largest ``|f(X_T) - E f(X_T) - sum_j sum_t a_{j,t} F_t|`` over every path."""
    law = enumerate_law(model, spec)
    K, J = law.K, spec.J
    F = outcome_factors(spec.order, model.m, model.v_free)
    fT = np.asarray(model.f(law.terminal), dtype=float)
    resid = fT - law.prob @ fT
    for j in range(1, J + 1):
        coef = exact_coefficients(model, spec, j, law.levels[j - 1])  # (K^{j-1}, T)
        contrib = (coef @ F.T).ravel()  # node at level j
        resid = resid - np.repeat(contrib, K ** (J - j))
    return float(np.max(np.abs(resid)))


def coefficient_equivalence(model: SdeModel, spec: SchemeSpec, points=None) -> float:
    """Largest gap between the direct coefficients and the one-step sum over exact ``q_j``.

    ``points`` defaults to every tree node reachable from ``x0``.
    """
    law = enumerate_law(model, spec) if points is None else None
    worst = 0.0
    for j in range(1, spec.J + 1):
        x = law.levels[j - 1] if points is None else np.asarray(points, dtype=float).reshape(-1, model.d)
        direct = exact_coefficients(model, spec, j, x)
        step = one_step_coefficients(
            model, spec.order, x, spec.Delta, lambda z, j=j: exact_q(model, spec, j, z), model.v_free
        )
        worst = max(worst, float(np.max(np.abs(direct - step))))
    return worst


def q_recursion_residual(model: SdeModel, spec: SchemeSpec, points) -> float:
    """Largest ``|q_{j-1}(x) - sum_k w_k q_j(Phi(x, y_k))|`` over ``points`` and ``j``."""
    x = np.asarray(points, dtype=float).reshape(-1, model.d)
    worst = 0.0
    for j in range(1, spec.J + 1):
        images, table = one_step_images(model, spec.order, x, spec.Delta)
        nxt = exact_q(model, spec, j, images.reshape(-1, model.d)).reshape(len(x), -1) @ table.prob
        worst = max(worst, float(np.max(np.abs(exact_q(model, spec, j - 1, x) - nxt))))
    return worst


def verify_gaussian_motivating(sigma: float = 1.0, x0: float = 1.0, J: int = 4, n_paths: int = 1000, seed: int = 0) -> float:
    """Residual of the degree-2 chaos representation for ``dX = sigma X dW`` with Gaussian increments.

    Paths follow ``X_j = X_{j-1} (1 + sigma sqrt(Delta) g_j)`` with standard
    normal ``g_j``; the closed-form coefficients must reproduce
    ``X_T^2 - x0^2 (1 + sigma^2 Delta)^J`` on every path.
    """
    spec = SchemeSpec(1, J)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_paths, J))
    states = np.empty((n_paths, J + 1))
    states[:, 0] = x0
    for j in range(J):
        states[:, j + 1] = states[:, j] * (1.0 + sigma * math.sqrt(spec.Delta) * g[:, j])
    M = exact_cv_motivating(sigma, x0, spec, (states, g))
    mean = x0**2 * (1.0 + sigma**2 * spec.Delta) ** J
    return float(np.max(np.abs(states[:, -1] ** 2 - mean - M)))


def verification_fixture() -> SdeModel:
    """Two-dimensional model with linear drift and affine diffusion.

    The diffusion is chosen so that ``L^k sigma^{rl} != 0`` for ``k != l``,
    which makes the ``V`` entries of the order-2 scheme matter.
    """
    A = np.array([[-0.3, 0.2], [0.1, -0.4]])
    b = np.array([0.05, -0.1])
    C = np.array([[0.6, 0.2], [-0.1, 0.5]])
    # D[r, l, i] = d sigma^{rl} / d x_i
    D = np.zeros((2, 2, 2))
    D[0, 0, 0], D[0, 1, 1], D[1, 0, 1], D[1, 1, 0] = 0.3, 0.25, -0.2, 0.15

    def drift(x):
        return x @ A.T + b

    def diffusion(x):
        return C + np.einsum("rli,ni->nrl", D, x)

    def payoff(x):
        return np.sin(x[:, 0]) + x[:, 0] * x[:, 1] + np.cos(2.0 * x[:, 1])

    def derivative_data(x):
        n = x.shape[0]
        return operators_from_jets(
            drift(x), diffusion(x),
            np.broadcast_to(A, (n, 2, 2)), np.zeros((n, 2, 2, 2)),
            np.broadcast_to(D, (n, 2, 2, 2)), np.zeros((n, 2, 2, 2, 2)),
        )

    return SdeModel("fixture2d", 2, 2, np.array([0.2, -0.1]), 1.0, drift, diffusion, payoff, derivative_data)


def verification_suite(J_values=(1, 2, 3), n_points: int = 5, seed: int = 0):
    """Run every exactness check; returns rows ``(check, model, order, J, residual)``."""
    from .models import builtin_model

    models = [builtin_model("arsinh1d"), builtin_model("motivating"), verification_fixture()]
    rng = np.random.default_rng(seed)
    rows = []
    for model in models:
        for order in (1, 2):
            for J in J_values:
                spec = SchemeSpec(order, J, model.T)
                rows.append(("representation", model.name, order, J, verify_representation(model, spec)))
                rows.append(("coefficients", model.name, order, J, coefficient_equivalence(model, spec)))
                pts = model.x0 + 0.5 * rng.standard_normal((n_points, model.d))
                rows.append(("q_recursion", model.name, order, J, q_recursion_residual(model, spec, pts)))
    rows.append(("gaussian_chaos", "motivating", 1, 4, verify_gaussian_motivating()))
    return rows
