"""Least-squares regression of functions of the state.

Two basis families are supported:

* ``global_poly``: monomials of total degree ``<= p`` in the centred and
  standardised state, optionally with the payoff ``f`` as one extra regressor;
* ``piecewise_poly``: the same monomials fitted separately on each cube of an
  equidistant partition of ``[-R, R]^d`` into ``Q^d`` cubes, in cube-local
  coordinates; the estimate is zero outside the box.

Fits use an SVD-based least-squares solve with relative singular-value cutoff
``1e-10`` (minimum-norm solution), and accept several response columns at once
so that all control-variate terms of a time step share one factorisation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import container
from .errors import ConfigurationError, ContractViolation

RCOND = 1e-10

__all__ = ["BasisSpec", "RegressionEstimate", "fit", "evaluate", "mse_against", "monomial_exponents"]


def monomial_exponents(p: int, d: int) -> np.ndarray:
    """Exponent vectors of all monomials of total degree ``<= p``, graded order."""
    exps = [e for e in itertools.product(range(p + 1), repeat=d) if sum(e) <= p]
    exps.sort(key=lambda e: (sum(e), tuple(-x for x in e)))
    return np.array(exps, dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True)
class BasisSpec:
    kind: str
    p: int
    d: int
    include_payoff: bool = False
    Q: int = 1
    R: float = 1.0

    def __post_init__(self):
        if self.kind not in ("global_poly", "piecewise_poly"):
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if int(self.p) != self.p or self.p < 0:
            raise ConfigurationError("basis degree p must be a nonnegative integer")
        if self.d < 1:
            raise ConfigurationError("basis dimension d must be >= 1")
        if int(self.Q) != self.Q or self.Q < 1:
            raise ConfigurationError("cubes per axis Q must be a positive integer")
        if not self.R > 0:
            raise ConfigurationError("domain half-width R must be positive")
        if self.kind == "piecewise_poly" and self.include_payoff:
            raise ConfigurationError("the payoff regressor is only available for the global basis")

    @property
    def n_monomials(self) -> int:
        return math.comb(self.p + self.d, self.d)

    @property
    def local_size(self) -> int:
        """Number of coefficients per cube (or in total, for the global basis)."""
        return self.n_monomials + (1 if self.include_payoff else 0)

    @property
    def size(self) -> int:
        if self.kind == "global_poly":
            return self.local_size
        return self.Q**self.d * self.n_monomials

    @property
    def n_cubes(self) -> int:
        return 1 if self.kind == "global_poly" else self.Q**self.d

    def as_dict(self) -> dict:
        return {
            "kind": self.kind, "p": int(self.p), "d": int(self.d),
            "include_payoff": bool(self.include_payoff), "Q": int(self.Q), "R": float(self.R),
        }


@lru_cache(maxsize=None)
def _parents(key: bytes, shape: tuple) -> tuple:
    """For graded exponents: (index of the parent monomial, coordinate it is multiplied by)."""
    exps = np.frombuffer(key, dtype=np.int64).reshape(shape)
    pos = {tuple(e): i for i, e in enumerate(exps)}
    out = []
    for e in exps:
        nz = np.flatnonzero(e)
        if nz.size == 0:
            out.append((-1, -1))
            continue
        r = int(nz[0])
        parent = e.copy()
        parent[r] -= 1
        out.append((pos[tuple(parent)], r))
        if out[-1][0] >= len(out) - 1:
            raise ValueError("exponents must be in graded order")
    return tuple(out)


def _monomials(z: np.ndarray, exps: np.ndarray) -> np.ndarray:
    exps = np.ascontiguousarray(exps, dtype=np.int64)
    lead = z.shape[:-1]
    zt = np.moveaxis(z, -1, 0).reshape(z.shape[-1], -1)
    cols = np.empty((len(exps), zt.shape[1]))
    # each monomial is its parent times one coordinate; graded order puts parents first
    for i, (parent, r) in enumerate(_parents(exps.tobytes(), exps.shape)):
        if parent < 0:
            cols[i] = 1.0
        else:
            np.multiply(cols[parent], zt[r], out=cols[i])
    return cols.T.reshape(lead + (len(exps),))


def cube_index(x: np.ndarray, Q: int, R: float):
    """Per-axis cube indices, flat index and inside-box mask for points ``(n, d)``.

    Points on a shared face go to the lower cube.
    """
    h = 2.0 * R / Q
    u = (x + R) / h
    idx = np.clip(np.ceil(u).astype(np.int64) - 1, 0, Q - 1)
    inside = np.all(np.abs(x) <= R, axis=-1)
    flat = np.zeros(x.shape[:-1], dtype=np.int64)
    for r in range(x.shape[-1]):
        flat = flat * Q + idx[..., r]
    return idx, flat, inside


@dataclass(frozen=True)
class RegressionEstimate:
    """A fitted expansion.

    ``coefficients`` has shape ``(n_cubes, local_size, k)`` for ``k`` response
    columns (``n_cubes = 1`` for the global basis).  ``center`` and ``scale``
    define the global frame ``z = (x - center) / scale``; ``payoff_scale``
    divides the payoff regressor.  ``truncation_level`` (scalar or per column)
    clamps evaluations when set.
    """

    basis: BasisSpec
    coefficients: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    payoff_scale: float = 1.0
    truncation_level: Optional[np.ndarray] = None
    payoff: Optional[Callable[[np.ndarray], np.ndarray]] = None
    multi: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_outputs(self) -> int:
        return self.coefficients.shape[-1]

    def with_truncation(self, level) -> "RegressionEstimate":
        lvl = None if level is None else np.broadcast_to(np.asarray(level, dtype=float), (self.n_outputs,)).copy()
        if lvl is not None and np.any(lvl < 0):
            raise ConfigurationError("truncation level must be nonnegative")
        return RegressionEstimate(
            self.basis, self.coefficients, self.center, self.scale, self.payoff_scale,
            lvl, self.payoff, self.multi, self.diagnostics,
        )

    def __call__(self, x) -> np.ndarray:
        return evaluate(self, x)

    def save(self, path, model_hash: bytes) -> None:
        meta = {
            "basis": self.basis.as_dict(),
            "payoff_scale": self.payoff_scale,
            "multi": self.multi,
            "truncated": self.truncation_level is not None,
        }
        arrays = {"coefficients": self.coefficients, "center": self.center, "scale": self.scale}
        if self.truncation_level is not None:
            arrays["truncation_level"] = self.truncation_level
        container.save(path, "regest", model_hash, meta, arrays)

    @classmethod
    def load(cls, path, model_hash: bytes, payoff=None) -> "RegressionEstimate":
        meta, arrays = container.load(path, "regest", model_hash)
        basis = BasisSpec(**meta["basis"])
        if basis.include_payoff and payoff is None:
            raise ContractViolation("this estimate uses the payoff regressor; pass the payoff function")
        return cls(
            basis, arrays["coefficients"], arrays["center"], arrays["scale"], meta["payoff_scale"],
            arrays.get("truncation_level"), payoff, meta["multi"],
        )


def _design(est_basis: BasisSpec, x, center, scale, payoff, payoff_scale, exps):
    z = (x - center) / scale
    A = _monomials(z, exps)
    if est_basis.include_payoff:
        A = np.concatenate([A, (np.asarray(payoff(x), dtype=float) / payoff_scale)[:, None]], axis=1)
    return A


def _solve(A: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, int]:
    coef, _, rank, _ = np.linalg.lstsq(A, Y, rcond=RCOND)
    return coef, int(rank)


def fit(states, responses, basis: BasisSpec, payoff: Optional[Callable] = None) -> RegressionEstimate:
    """Least-squares fit of ``responses`` (``(N,)`` or ``(N, k)``) on ``states`` ``(N, d)``."""
    x = np.asarray(states, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(responses, dtype=float)
    multi = y.ndim == 2
    Y = y if multi else y[:, None]
    N = x.shape[0]
    if N < 1:
        raise ConfigurationError("regression needs at least one sample")
    if x.shape[1] != basis.d:
        raise ContractViolation(f"states have dimension {x.shape[1]}, basis expects {basis.d}")
    if Y.shape[0] != N:
        raise ContractViolation("states and responses disagree on the sample size")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(Y))):
        raise ContractViolation("regression inputs must be finite")
    if basis.include_payoff and payoff is None:
        raise ContractViolation("basis includes the payoff but no payoff function was given")

    exps = monomial_exponents(basis.p, basis.d)
    k = Y.shape[1]
    diagnostics = {"n_samples": N, "underdetermined": False, "empty_cubes": 0}

    if basis.kind == "global_poly":
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        pscale = 1.0
        if basis.include_payoff:
            fv = np.asarray(payoff(x), dtype=float)
            pscale = float(np.std(fv)) or 1.0
        A = _design(basis, x, center, scale, payoff, pscale, exps)
        coef, rank = _solve(A, Y)
        diagnostics["rank"] = rank
        diagnostics["underdetermined"] = N < basis.size
        coefficients = coef[None]
    else:
        Q, R, d = basis.Q, basis.R, basis.d
        h = 2.0 * R / Q
        _, flat, inside = cube_index(x, Q, R)
        coefficients = np.zeros((Q**d, basis.n_monomials, k))
        order = np.argsort(np.where(inside, flat, -1), kind="stable")
        keys = np.where(inside, flat, -1)[order]
        starts = np.searchsorted(keys, np.arange(Q**d))
        ends = np.searchsorted(keys, np.arange(Q**d), side="right")
        under = 0
        for c in range(Q**d):
            rows = order[starts[c] : ends[c]]
            if rows.size == 0:
                diagnostics["empty_cubes"] += 1
                continue
            if rows.size < basis.n_monomials:
                under += 1
            A = _monomials(_local(x[rows], c, Q, R, d, h), exps)
            coefficients[c], _ = _solve(A, Y[rows])
        diagnostics["underfull_cubes"] = under
        diagnostics["underdetermined"] = under > 0
        center = np.zeros(d)
        scale = np.full(d, h / 2.0)
        pscale = 1.0

    return RegressionEstimate(
        basis, coefficients, np.asarray(center, dtype=float), np.asarray(scale, dtype=float),
        pscale, None, payoff, multi, diagnostics,
    )


def _cube_centers(flat: np.ndarray, Q: int, R: float, d: int, h: float) -> np.ndarray:
    idx = np.empty(flat.shape + (d,), dtype=np.int64)
    rem = flat.copy()
    for r in range(d - 1, -1, -1):
        idx[..., r] = rem % Q
        rem //= Q
    return -R + (idx + 0.5) * h


def _local(x, c, Q, R, d, h):
    return (x - _cube_centers(np.array(c), Q, R, d, h)) / (h / 2.0)


def evaluate(est: RegressionEstimate, x) -> np.ndarray:
    """Evaluate at points ``(n, d)`` (or a single ``(d,)`` point).

    Returns ``(n,)`` for single-column fits and ``(n, k)`` otherwise.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    basis = est.basis
    x = x.reshape(-1, basis.d)
    exps = monomial_exponents(basis.p, basis.d)
    if basis.kind == "global_poly":
        A = _design(basis, x, est.center, est.scale, est.payoff, est.payoff_scale, exps)
        out = A @ est.coefficients[0]
    else:
        Q, R, d = basis.Q, basis.R, basis.d
        h = 2.0 * R / Q
        _, flat, inside = cube_index(x, Q, R)
        z = (x - _cube_centers(flat, Q, R, d, h)) / (h / 2.0)
        A = _monomials(z, exps)
        out = np.einsum("nb,nbk->nk", A, est.coefficients[flat])
        out[~inside] = 0.0
    if est.truncation_level is not None:
        out = np.clip(out, -est.truncation_level, est.truncation_level)
    if not est.multi:
        out = out[:, 0]
    return out[0] if single else out


def mse_against(est: RegressionEstimate, states, truth) -> float:
    """Mean squared deviation of the estimate from ``truth`` over a sample."""
    states = np.asarray(states, dtype=float).reshape(-1, est.basis.d)
    truth = np.asarray(truth, dtype=float)
    pred = evaluate(est, states)
    if pred.shape != truth.shape:
        raise ContractViolation(f"truth has shape {truth.shape}, estimate gives {pred.shape}")
    return float(np.mean((pred - truth) ** 2))
