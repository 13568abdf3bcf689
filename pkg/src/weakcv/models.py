"""SDE problem definitions.

A model is the tuple ``(mu, sigma, f, x0, T)`` for ``dX = mu(X) dt + sigma(X) dW``
with terminal payoff ``f``.  Coefficient functions are vectorised over a leading
batch axis: ``drift`` maps ``(n, d) -> (n, d)``, ``diffusion`` maps
``(n, d) -> (n, d, m)`` and ``payoff`` maps ``(n, d) -> (n,)``.

The order-2 scheme needs the operators ``L^0 g = mu . grad g + 1/2 tr(sigma sigma^T Hess g)``
and ``L^k g = sum_i sigma^{ik} d_i g`` applied to the components of ``mu`` and
``sigma``; these are packaged as :class:`SecondOrderData`.  Smoothness of user
supplied coefficients (derivatives up to order 4 or 6 with polynomial growth)
is the caller's responsibility and is not checked.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import roots_hermitenorm

from .errors import AccuracyError, ConfigurationError, NumericalError

__all__ = [
    "SdeModel",
    "SecondOrderData",
    "builtin_model",
    "register_model",
    "available_models",
    "scheme_derivatives",
    "finite_difference_derivatives",
    "gauss_hermite_reference",
]


@dataclass(frozen=True)
class SecondOrderData:
    """Operator values at a batch of states (leading axes ``...``).

    L0mu: ``(..., d)``; Lkmu: ``(..., m, d)`` indexed ``[k, r]``;
    L0sigma: ``(..., d, m)`` indexed ``[r, l]``; Lksigma: ``(..., m, d, m)``
    indexed ``[k, r, l]``.
    """

    L0mu: np.ndarray
    Lkmu: np.ndarray
    L0sigma: np.ndarray
    Lksigma: np.ndarray

    def arrays(self):
        return (self.L0mu, self.Lkmu, self.L0sigma, self.Lksigma)


@dataclass(frozen=True)
class SdeModel:
    name: str
    d: int
    m: int
    x0: np.ndarray
    T: float
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    payoff: Callable[[np.ndarray], np.ndarray]
    derivative_data: Optional[Callable[[np.ndarray], SecondOrderData]] = None
    reference_value: Optional[float] = None
    # Set when L^k sigma^{rl} == 0 for k != l, so V never enters the order-2 step.
    v_free: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.d < 1 or self.m < 1:
            raise ConfigurationError("model dimensions d and m must be positive")
        if x0.shape != (self.d,):
            raise ConfigurationError(f"x0 must have length {self.d}")
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    # Batch helpers accepting a single state ``(d,)`` or a batch ``(..., d)``.

    def mu(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.d)
        return np.asarray(self.drift(flat), dtype=float).reshape(x.shape)

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.d)
        return np.asarray(self.diffusion(flat), dtype=float).reshape(x.shape + (self.m,))

    def f(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.d)
        out = np.asarray(self.payoff(flat), dtype=float).reshape(x.shape[:-1])
        return out if out.ndim else float(out)

    @property
    def key(self) -> str:
        items = ",".join(f"{k}={v!r}" for k, v in sorted(self.params.items()))
        return f"{self.name}({items})"

    @property
    def key_hash(self) -> bytes:
        return hashlib.sha256(self.key.encode()).digest()[:8]


# --------------------------------------------------------------------------
# Operators from first and second derivatives


def operators_from_jets(mu, sig, Jmu, Hmu, Jsig, Hsig) -> SecondOrderData:
    """Assemble ``L``-operator values from derivative arrays.

    Shapes (batch axis ``n`` first): mu ``(n,d)``, sig ``(n,d,m)``, Jmu ``(n,d,d)``
    ``[r,i]``, Hmu ``(n,d,d,d)`` ``[r,i,j]``, Jsig ``(n,d,m,d)`` ``[r,l,i]``,
    Hsig ``(n,d,m,d,d)`` ``[r,l,i,j]``.
    """
    cov = np.einsum("nik,njk->nij", sig, sig)
    L0mu = np.einsum("ni,nri->nr", mu, Jmu) + 0.5 * np.einsum("nij,nrij->nr", cov, Hmu)
    Lkmu = np.einsum("nik,nri->nkr", sig, Jmu)
    L0sigma = np.einsum("ni,nrli->nrl", mu, Jsig) + 0.5 * np.einsum("nij,nrlij->nrl", cov, Hsig)
    Lksigma = np.einsum("nik,nrli->nkrl", sig, Jsig)
    return SecondOrderData(L0mu, Lkmu, L0sigma, Lksigma)


_EPS = np.finfo(float).eps


def finite_difference_derivatives(model: SdeModel, x) -> SecondOrderData:
    """Central-difference operator values for ``x`` of shape ``(n, d)``.

    First derivatives use the step ``max(1, |x_i|) * eps**(1/3)``; second
    derivatives use ``max(1, |x_i|) * eps**(1/4)``, the balanced step for a
    second difference.
    """
    x = np.asarray(x, dtype=float).reshape(-1, model.d)
    n, d = x.shape
    m = model.m
    scale = np.maximum(1.0, np.abs(x))
    h1 = scale * _EPS ** (1.0 / 3.0)
    h2 = scale * _EPS ** 0.25

    def both(z):
        return model.drift(z), model.diffusion(z)

    mu, sig = both(x)
    Jmu = np.empty((n, d, d))
    Jsig = np.empty((n, d, m, d))
    for i in range(d):
        e = np.zeros((n, d))
        e[:, i] = h1[:, i]
        mp, sp = both(x + e)
        mm, sm = both(x - e)
        Jmu[:, :, i] = (mp - mm) / (2 * h1[:, i, None])
        Jsig[:, :, :, i] = (sp - sm) / (2 * h1[:, i, None, None])

    Hmu = np.empty((n, d, d, d))
    Hsig = np.empty((n, d, m, d, d))
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros((n, d))
            ej = np.zeros((n, d))
            ei[:, i] = h2[:, i]
            ej[:, j] = h2[:, j]
            pp, spp = both(x + ei + ej)
            pm, spm = both(x + ei - ej)
            mp_, smp = both(x - ei + ej)
            mm, smm = both(x - ei - ej)
            denom = 4 * h2[:, i] * h2[:, j]
            hm = (pp - pm - mp_ + mm) / denom[:, None]
            hs = (spp - spm - smp + smm) / denom[:, None, None]
            Hmu[:, :, i, j] = Hmu[:, :, j, i] = hm
            Hsig[:, :, :, i, j] = Hsig[:, :, :, j, i] = hs
    return operators_from_jets(mu, sig, Jmu, Hmu, Jsig, Hsig)


def scheme_derivatives(model: SdeModel, x) -> SecondOrderData:
    """Operator values at ``x`` (``(d,)`` or ``(n, d)``), analytic when the model has them."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x.reshape(-1, model.d)
    if model.derivative_data is not None:
        data = model.derivative_data(xb)
    else:
        data = finite_difference_derivatives(model, xb)
    names = ("L0mu", "Lkmu", "L0sigma", "Lksigma")
    for name, arr in zip(names, data.arrays()):
        if not np.isfinite(arr).all():
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NumericalError(f"non-finite {name} at index {tuple(int(i) for i in bad)}")
    if single:
        return SecondOrderData(*(a[0] for a in data.arrays()))
    return data


# --------------------------------------------------------------------------
# Quadrature oracle


def gauss_hermite_reference(integrand, nodes: int = 16, tol: float = 1e-10, max_nodes: int = 512) -> float:
    """``E[g(W)]`` for standard normal ``W`` by Gauss-Hermite quadrature.

    The node count is doubled from ``nodes`` until two successive values agree
    to ``tol``.
    """
    if nodes < 2:
        raise ConfigurationError("quadrature needs at least 2 nodes")

    def rule(n):
        w_nodes, w = roots_hermitenorm(n)
        vals = np.asarray(integrand(w_nodes), dtype=float)
        if vals.shape == ():
            vals = np.full(n, float(vals))
        return float(np.dot(w, vals) / math.sqrt(2 * math.pi))

    n = nodes
    prev = rule(n)
    while 2 * n <= max_nodes:
        n *= 2
        cur = rule(n)
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    raise AccuracyError(f"Gauss-Hermite quadrature did not converge to {tol} within {max_nodes} nodes")


@lru_cache(maxsize=None)
def arsinh_reference() -> float:
    """``E[f(X_1)]`` for the arsinh model: ``X_1 = arsinh(W_1)``."""
    return gauss_hermite_reference(lambda w: _arsinh_payoff(np.arcsinh(w)), nodes=32)


@lru_cache(maxsize=None)
def fivedim_reference() -> float:
    """``E[f(X_1)]`` for the five-dimensional model via its product structure."""
    one = gauss_hermite_reference(lambda w: np.cos(np.arctan(w) + np.arcsinh(w)), nodes=32)
    last = gauss_hermite_reference(np.cos, nodes=16)
    return one**4 * last


# --------------------------------------------------------------------------
# Built-in models


def _motivating(sigma: float = 1.0, x0: float = 1.0, T: float = 1.0) -> SdeModel:
    if not sigma > 0:
        raise ConfigurationError("motivating model needs sigma > 0")

    def drift(x):
        return np.zeros_like(x)

    def diffusion(x):
        return sigma * x[:, :, None]

    def payoff(x):
        return x[:, 0] ** 2

    def derivative_data(x):
        n = x.shape[0]
        return SecondOrderData(
            np.zeros((n, 1)),
            np.zeros((n, 1, 1)),
            np.zeros((n, 1, 1)),
            (sigma**2 * x)[:, None, :, None],
        )

    return SdeModel(
        "motivating", 1, 1, np.array([x0]), T, drift, diffusion, payoff, derivative_data,
        reference_value=x0**2 * math.exp(sigma**2 * T),
        params={"sigma": float(sigma), "x0": float(x0), "T": float(T)},
    )


def _arsinh_payoff(x):
    return 1.0 / np.cosh(x) + 15.0 * np.arctan(x)


def _arsinh1d() -> SdeModel:
    def drift(x):
        return -0.5 * np.tanh(x) / np.cosh(x) ** 2

    def diffusion(x):
        return (1.0 / np.cosh(x))[:, :, None]

    def payoff(x):
        return _arsinh_payoff(x[:, 0])

    def derivative_data(x):
        t = np.tanh(x[:, 0])
        s = 1.0 / np.cosh(x[:, 0])
        s2, t2 = s * s, t * t
        mu = -0.5 * t * s2
        dmu = -0.5 * s2 * (s2 - 2 * t2)
        d2mu = s2 * t * (4 * s2 - 2 * t2)
        dsig = -s * t
        d2sig = s * (t2 - s2)
        L0mu = mu * dmu + 0.5 * s2 * d2mu
        L1mu = s * dmu
        L0sig = mu * dsig + 0.5 * s2 * d2sig
        L1sig = s * dsig
        return SecondOrderData(
            L0mu[:, None], L1mu[:, None, None], L0sig[:, None, None], L1sig[:, None, None, None]
        )

    return SdeModel(
        "arsinh1d", 1, 1, np.zeros(1), 1.0, drift, diffusion, payoff, derivative_data,
        reference_value=arsinh_reference(),
    )


def _fivedim() -> SdeModel:
    # Coordinates 1..4: dX = -sin cos^3 dt + cos^2 dW^i.
    # Coordinate 5 collects -1/2 sin cos^2 dt + cos dW^i from each of them plus dW^5.
    def drift(x):
        s, c = np.sin(x[:, :4]), np.cos(x[:, :4])
        out = np.empty_like(x)
        out[:, :4] = -s * c**3
        out[:, 4] = np.sum(-0.5 * s * c**2, axis=1)
        return out

    def diffusion(x):
        c = np.cos(x[:, :4])
        out = np.zeros((x.shape[0], 5, 5))
        idx = np.arange(4)
        out[:, idx, idx] = c**2
        out[:, 4, :4] = c
        out[:, 4, 4] = 1.0
        return out

    def payoff(x):
        return np.cos(np.sum(x, axis=1)) - 20.0 * np.sum(np.sin(x[:, :4]), axis=1)

    def derivative_data(x):
        # Every coefficient depends on a single coordinate x_i (i <= 4), so
        # L^0 g = mu^i g' + 1/2 cos^4 g'' and L^k g = [k == i] cos^2 g'.
        n = x.shape[0]
        s, c = np.sin(x[:, :4]), np.cos(x[:, :4])
        a = -s * c**3  # mu^i
        da = -(c**4) + 3 * s**2 * c**2
        d2a = 10 * s * c**3 - 6 * s**3 * c
        dh = -0.5 * c**3 + s**2 * c  # mu^5 summand h = -1/2 sin cos^2
        d2h = 3.5 * s * c**2 - s**3
        db, d2b = -2 * s * c, 2 * s**2 - 2 * c**2  # sigma^{ii} = cos^2
        de, d2e = -s, -c  # sigma^{5i} = cos
        c2, c4 = c**2, c**4

        def L0(g1, g2):
            return a * g1 + 0.5 * c4 * g2

        idx = np.arange(4)
        L0mu = np.empty((n, 5))
        L0mu[:, :4] = L0(da, d2a)
        L0mu[:, 4] = np.sum(L0(dh, d2h), axis=1)
        Lkmu = np.zeros((n, 5, 5))
        Lkmu[:, idx, idx] = c2 * da
        Lkmu[:, idx, 4] = c2 * dh
        L0sigma = np.zeros((n, 5, 5))
        L0sigma[:, idx, idx] = L0(db, d2b)
        L0sigma[:, 4, idx] = L0(de, d2e)
        Lksigma = np.zeros((n, 5, 5, 5))
        Lksigma[:, idx, idx, idx] = c2 * db
        Lksigma[:, idx, 4, idx] = c2 * de
        return SecondOrderData(L0mu, Lkmu, L0sigma, Lksigma)

    return SdeModel(
        "fivedim", 5, 5, np.zeros(5), 1.0, drift, diffusion, payoff, derivative_data,
        reference_value=fivedim_reference(), v_free=True,
    )


_REGISTRY: dict[str, Callable[..., SdeModel]] = {
    "motivating": _motivating,
    "arsinh1d": _arsinh1d,
    "fivedim": _fivedim,
}


def register_model(name: str, factory: Callable[..., SdeModel], *, replace: bool = False) -> None:
    """Make ``factory`` available to :func:`builtin_model` and the CLI under ``name``."""
    if name in _REGISTRY and not replace:
        raise ConfigurationError(f"model {name!r} is already registered")
    _REGISTRY[name] = factory


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def builtin_model(model_id: str, **kwargs) -> SdeModel:
    try:
        factory = _REGISTRY[model_id]
    except KeyError:
        raise ConfigurationError(
            f"unknown model {model_id!r}; choose from {', '.join(available_models())}"
        ) from None
    return factory(**kwargs)
