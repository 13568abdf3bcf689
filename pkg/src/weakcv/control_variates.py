"""Regression-based control variates for weak schemes.

Along a discrete scheme path the centred payoff is an exact finite sum

    f(X_T) - E f(X_T) = sum_j sum_t a_{j,t}(X_{j-1}) * F_t(increment_j)

over the non-constant orthonormal factors ``F_t`` of the one-step increment.
RCV estimates each ``a_{j,t}`` by regressing ``f(X_T) F_t(increment_j)`` on
``X_{j-1}``.  RRCV instead estimates ``q_j(x) = E[f(X_T) | X_j = x]`` backwards
in time and recovers the coefficients by the exact one-step sum
``a_{j,t}(x) = sum_k w_k F_t(y_k) q_j(Phi(x, y_k))`` over all outcomes ``y_k``.

Either way the control variate ``M = sum_j sum_t a_{j,t} F_t`` is evaluated on
testing paths that are independent of the training paths, so it has mean zero
whatever the quality of the estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import container, regression
from .errors import ConfigurationError, ContractViolation
from .models import SdeModel, SecondOrderData, scheme_derivatives
from .regression import BasisSpec, RegressionEstimate
from .schemes import PathBundle, SchemeSpec, step
from .stochastics import cv_terms, factor_matrix, outcome_factors, outcome_table

__all__ = [
    "CvModel",
    "fit_rcv",
    "fit_rrcv",
    "coefficients_from_q",
    "evaluate_cv",
    "control_variate_values",
    "exact_cv_motivating",
    "one_step_images",
    "one_step_coefficients",
]

Truncation = Union[str, float, None]

# Memory bound (floats) for the (states x outcomes x d) images built per chunk.
_CHUNK_FLOATS = 4_000_000


@dataclass(frozen=True)
class CvModel:
    """A trained control variate.

    For ``rcv`` the list ``estimates`` has one multi-output regression per step
    ``j = 1..J`` (entry ``j-1``), giving all term coefficients at ``X_{j-1}``.
    For ``rrcv`` entry ``j`` estimates ``q_j`` for ``j = 0..J-1``; ``q_J`` is the
    payoff itself.
    """

    method: str
    order: int
    J: int
    T: float
    m: int
    v_free: bool
    model_key: str
    basis: BasisSpec
    estimates: tuple
    truncation: dict = field(default_factory=dict)

    @property
    def spec(self) -> SchemeSpec:
        return SchemeSpec(self.order, self.J, self.T)

    @property
    def Delta(self) -> float:
        return self.T / self.J

    @property
    def terms(self):
        return cv_terms(self.order, self.m, self.v_free)

    def q(self, j: int, model: SdeModel, x) -> np.ndarray:
        """Estimated ``q_j`` at states ``(n, d)`` (``rrcv`` only)."""
        if self.method != "rrcv":
            raise ContractViolation("q estimates exist only for rrcv models")
        if not 0 <= j <= self.J:
            raise ConfigurationError(f"step {j} outside 0..{self.J}")
        if j == self.J:
            return model.f(np.asarray(x, dtype=float).reshape(-1, model.d))
        return regression.evaluate(self.estimates[j], x)

    @classmethod
    def zero(cls, model: SdeModel, spec: SchemeSpec, basis: Optional[BasisSpec] = None) -> "CvModel":
        """An RCV model whose coefficients are identically zero."""
        basis = basis or BasisSpec("global_poly", 0, model.d)
        terms = cv_terms(spec.order, model.m, model.v_free)
        zero = RegressionEstimate(
            basis, np.zeros((basis.n_cubes, basis.local_size, len(terms))),
            np.zeros(model.d), np.ones(model.d), multi=True,
        )
        return cls("rcv", spec.order, spec.J, spec.T, model.m, model.v_free, model.key, basis,
                   (zero,) * spec.J, {"policy": "none"})

    def save(self, path, model: SdeModel) -> None:
        meta = {
            "method": self.method, "order": self.order, "J": self.J, "T": self.T, "m": self.m,
            "v_free": self.v_free, "model_key": self.model_key, "basis": self.basis.as_dict(),
            "truncation": self.truncation,
            "payoff_scales": [e.payoff_scale for e in self.estimates],
            "multi": [e.multi for e in self.estimates],
        }
        arrays = {}
        for i, e in enumerate(self.estimates):
            arrays[f"coef{i}"] = e.coefficients
            arrays[f"center{i}"] = e.center
            arrays[f"scale{i}"] = e.scale
            if e.truncation_level is not None:
                arrays[f"trunc{i}"] = e.truncation_level
        container.save(path, "cvmodel", model.key_hash, meta, arrays)

    @classmethod
    def load(cls, path, model: SdeModel) -> "CvModel":
        meta, arrays = container.load(path, "cvmodel", model.key_hash)
        basis = BasisSpec(**meta["basis"])
        ests = []
        for i, (ps, multi) in enumerate(zip(meta["payoff_scales"], meta["multi"])):
            ests.append(RegressionEstimate(
                basis, arrays[f"coef{i}"], arrays[f"center{i}"], arrays[f"scale{i}"], ps,
                arrays.get(f"trunc{i}"), model.payoff, multi,
            ))
        return cls(meta["method"], meta["order"], meta["J"], meta["T"], meta["m"], meta["v_free"],
                   meta["model_key"], basis, tuple(ests), meta["truncation"])


def _check_bundle(bundle: PathBundle, model: SdeModel, phase: str) -> None:
    if bundle.phase != phase:
        raise ContractViolation(f"expected {phase} paths, got {bundle.phase} paths")
    if bundle.model_key != model.key:
        raise ContractViolation(f"paths were simulated for {bundle.model_key}, not {model.key}")
    if bundle.xi_codes is None or bundle.xi_codes.shape[:2] != (bundle.N, bundle.J):
        raise ContractViolation("path bundle is missing its increments")
    if bundle.order == 2 and bundle.pair_codes is None:
        raise ContractViolation("order-2 path bundle is missing its V entries")


def _level(policy: Truncation, basis: BasisSpec, responses: np.ndarray, factor: float):
    """Truncation level for one regression, or ``None``.

    ``"default"`` truncates only piecewise fits; ``"auto"`` uses twice the
    largest absolute response (per column) times ``factor``; a number is used
    as the constant ``A`` directly.
    """
    if policy == "default":
        policy = "auto" if basis.kind == "piecewise_poly" else "none"
    if policy is None or policy == "none":
        return None
    if policy == "auto":
        A = 2.0 * np.max(np.abs(responses), axis=0)
    else:
        A = float(policy)
        if not A >= 0:
            raise ConfigurationError("truncation constant must be nonnegative")
    return np.asarray(A, dtype=float) * factor


def fit_rcv(training: PathBundle, model: SdeModel, basis: BasisSpec, truncation: Truncation = "default") -> CvModel:
    """Direct regression of every coefficient function ``a_{j,t}``."""
    _check_bundle(training, model, "train")
    fT = model.f(training.terminal)
    if not np.all(np.isfinite(fT)):
        raise ContractViolation("payoff is not finite on all terminal training states")
    order, J = training.order, training.J
    terms = cv_terms(order, model.m, model.v_free)
    sd = math.sqrt(training.spec.Delta)
    ests = []
    levels = []
    for j in range(1, J + 1):
        F = factor_matrix(terms, training.xi(j), training.pairs(j))
        Y = fT[:, None] * F
        est = regression.fit(training.states[:, j - 1], Y, basis, payoff=model.payoff)
        lvl = _level(truncation, basis, Y, sd)
        if lvl is not None:
            est = est.with_truncation(lvl)
        levels.append(None if lvl is None else float(np.max(lvl)))
        ests.append(est)
    policy = {"policy": str(truncation), "max_level": levels}
    return CvModel("rcv", order, J, training.spec.T, model.m, model.v_free, model.key, basis, tuple(ests), policy)


def fit_rrcv(training: PathBundle, model: SdeModel, basis: BasisSpec, truncation: Truncation = "default") -> CvModel:
    """Backward regression of ``q_{j-1}`` on ``X_{j-1}`` with responses ``q_j(X_j)``."""
    _check_bundle(training, model, "train")
    J = training.J
    response = model.f(training.terminal)
    if not np.all(np.isfinite(response)):
        raise ContractViolation("payoff is not finite on all terminal training states")
    ests: list = [None] * J
    levels: list = [None] * J
    for j in range(J, 0, -1):
        est = regression.fit(training.states[:, j - 1], response, basis, payoff=model.payoff)
        lvl = _level(truncation, basis, response, 1.0)
        if lvl is not None:
            est = est.with_truncation(lvl)
            levels[j - 1] = float(lvl)
        ests[j - 1] = est
        if j > 1:
            response = regression.evaluate(est, training.states[:, j - 1])
    policy = {"policy": str(truncation), "max_level": levels}
    return CvModel("rrcv", training.order, J, training.spec.T, model.m, model.v_free, model.key, basis,
                   tuple(ests), policy)


def one_step_images(model: SdeModel, order: int, x, Delta: float, v_free: Optional[bool] = None):
    """``Phi(x, y_k)`` for every one-step outcome: ``(n, K, d)`` plus the outcome table."""
    v_free = model.v_free if v_free is None else v_free
    table = outcome_table(order, model.m, v_free)
    x = np.asarray(x, dtype=float).reshape(-1, model.d)
    data = None
    if order == 2:
        d0 = scheme_derivatives(model, x)
        data = SecondOrderData(*(a[:, None] for a in d0.arrays()))
    xi = table.xi[None]
    V = table.V[None] if order == 2 else None
    return step(model, order, x[:, None, :], xi, V, Delta, data), table


def one_step_coefficients(model: SdeModel, order: int, x, Delta: float, q, v_free: Optional[bool] = None) -> np.ndarray:
    """``sum_k w_k F_t(y_k) q(Phi(x, y_k))`` for every term ``t``.

    ``x`` is ``(n, d)``; ``q`` maps ``(n*K, d)`` states to values.  Returns ``(n, T)``.
    """
    v_free = model.v_free if v_free is None else v_free
    x = np.asarray(x, dtype=float).reshape(-1, model.d)
    F = outcome_factors(order, model.m, v_free)
    K = F.shape[0]
    chunk = max(1, _CHUNK_FLOATS // (K * model.d))
    out = np.empty((x.shape[0], F.shape[1]))
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo : lo + chunk]
        images, table = one_step_images(model, order, xs, Delta, v_free)
        qv = np.asarray(q(images.reshape(-1, model.d)), dtype=float).reshape(len(xs), K)
        out[lo : lo + chunk] = (qv * table.prob) @ F
    return out


def coefficients_from_q(cv: CvModel, model: SdeModel, j: int, x, Delta: Optional[float] = None) -> np.ndarray:
    """Exact one-step coefficients ``a_{j,t}(x)`` from the estimate of ``q_j``.

    ``x`` is ``(d,)`` or ``(n, d)``; returns ``(T,)`` or ``(n, T)``.
    """
    if cv.method != "rrcv":
        raise ContractViolation("coefficients_from_q needs an rrcv model")
    if not 1 <= j <= cv.J:
        raise ConfigurationError(f"step {j} outside 1..{cv.J}")
    Delta = cv.Delta if Delta is None else Delta
    x = np.asarray(x, dtype=float)
    out = one_step_coefficients(model, cv.order, x, Delta, lambda z: cv.q(j, model, z), cv.v_free)
    return out[0] if x.ndim == 1 else out


def _observed_factors(cv: CvModel, bundle: PathBundle, j: int) -> np.ndarray:
    table = outcome_table(cv.order, cv.m, cv.v_free)
    pairs = None if bundle.pair_codes is None else bundle.pair_codes[:, j - 1]
    idx = table.index_of(bundle.xi_codes[:, j - 1], pairs)
    return outcome_factors(cv.order, cv.m, cv.v_free)[idx]


def control_variate_values(cv: CvModel, model: SdeModel, testing: PathBundle) -> np.ndarray:
    """``M`` on every testing path, shape ``(N,)``."""
    _check_bundle(testing, model, "test")
    if cv.model_key != model.key:
        raise ContractViolation(f"control variate was trained for {cv.model_key}, not {model.key}")
    if (testing.order, testing.J) != (cv.order, cv.J) or testing.spec.T != cv.T:
        raise ContractViolation("testing paths use a different scheme from the training paths")
    M = np.zeros(testing.N)
    for j in range(1, cv.J + 1):
        x = testing.states[:, j - 1]
        if cv.method == "rcv":
            coef = regression.evaluate(cv.estimates[j - 1], x)
        else:
            coef = coefficients_from_q(cv, model, j, x)
        M += np.einsum("nt,nt->n", coef, _observed_factors(cv, testing, j))
    return M


def evaluate_cv(cv: CvModel, model: SdeModel, testing: PathBundle, path_index: int) -> float:
    """``M`` on one testing path."""
    if not 0 <= path_index < testing.N:
        raise ConfigurationError(f"path index {path_index} outside 0..{testing.N - 1}")
    sub = PathBundle(
        testing.model_key, testing.spec, testing.phase, testing.seed,
        testing.states[path_index : path_index + 1], testing.xi_codes[path_index : path_index + 1],
        None if testing.pair_codes is None else testing.pair_codes[path_index : path_index + 1],
    )
    return float(control_variate_values(cv, model, sub)[0])


def motivating_coefficients(sigma: float, J: int, Delta: float, j: int, x):
    """Closed-form ``(a_{j,1}(x), a_{j,2}(x))`` for ``dX = sigma X dW`` with ``f(x) = x^2``."""
    growth = (1.0 + sigma**2 * Delta) ** (J - j)
    x2 = np.asarray(x, dtype=float) ** 2
    return 2.0 * sigma * math.sqrt(Delta) * x2 * growth, math.sqrt(2.0) * sigma**2 * Delta * x2 * growth


def exact_cv_motivating(sigma: float, x0: float, spec: SchemeSpec, path) -> np.ndarray:
    """Perfect control variate for ``dX = sigma X dW``, ``f(x) = x^2``.

    ``path`` is either a :class:`PathBundle` from weak Euler on the motivating
    model or a pair ``(states, y)`` with states ``(..., J+1)`` and normalised
    increments ``y`` ``(..., J)`` (signs or standard normals).  Returns ``M``
    per path so that ``X_T^2 - M = x0^2 (1 + sigma^2 Delta)^J``.
    """
    if isinstance(path, PathBundle):
        if not path.model_key.startswith("motivating("):
            raise ContractViolation(f"exact control variate needs the motivating model, got {path.model_key}")
        if path.order != 1:
            raise ContractViolation("exact control variate is defined for weak Euler paths")
        if float(path.model_key.split("sigma=")[1].split(",")[0].rstrip(")")) != float(sigma):
            raise ContractViolation("sigma does not match the model that produced the paths")
        states = path.states[..., 0]
        y = path.xi_codes[..., 0].astype(float)
    else:
        states, y = (np.asarray(a, dtype=float) for a in path)
        # accept trailing singleton state/noise axes
        if states.ndim >= 2 and states.shape[-1] == 1 and states.shape[-2] == spec.J + 1:
            states = states[..., 0]
        if y.ndim >= 2 and y.shape[-1] == 1 and y.shape[-2] == spec.J:
            y = y[..., 0]
    if states.shape[-1] != spec.J + 1 or y.shape[-1] != spec.J:
        raise ContractViolation("path length does not match the scheme")
    if not np.allclose(states[..., 0], x0, rtol=0, atol=1e-15 * max(1.0, abs(x0))):
        raise ContractViolation("path does not start at x0")
    M = np.zeros(states.shape[:-1])
    H2 = (y * y - 1.0) / math.sqrt(2.0)
    for j in range(1, spec.J + 1):
        a1, a2 = motivating_coefficients(sigma, spec.J, spec.Delta, j, states[..., j - 1])
        M = M + a1 * y[..., j - 1] + a2 * H2[..., j - 1]
    return M
