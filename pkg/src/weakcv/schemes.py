"""One-step maps of the weak schemes and path simulation.

Paths are simulated in fixed-size blocks of path indices.  Each block draws all
of its increments from its own counter-based stream keyed by
``(seed, phase, block)``, so a bundle is bit-identical however many worker
threads produce it, and the first ``N`` paths do not depend on the total
number of paths requested.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import container
from .errors import ConfigurationError, ContractViolation, NumericalError, ResourceError
from .models import SdeModel, SecondOrderData, scheme_derivatives
from .stochastics import (
    PHASES,
    Order1Increment,
    Order2Increment,
    decode_xi,
    draw_codes,
    n_pairs,
    stream,
    v_matrix,
)

BLOCK_SIZE = 1024
MAX_STATE_FLOATS = 60_000_000


@dataclass(frozen=True)
class SchemeSpec:
    order: int
    J: int
    T: float = 1.0

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ConfigurationError(f"scheme order must be 1 or 2, got {self.order}")
        if int(self.J) != self.J or self.J < 1:
            raise ConfigurationError(f"number of steps J must be a positive integer, got {self.J}")
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")

    @property
    def Delta(self) -> float:
        return self.T / self.J

    @classmethod
    def for_model(cls, model: SdeModel, order: int, J: int) -> "SchemeSpec":
        return cls(order, J, model.T)


def _check_finite(out: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise NumericalError(f"{what} produced a non-finite value at index {tuple(int(i) for i in bad)}")
    return out


def step_weak_euler(model: SdeModel, x, y, Delta: float) -> np.ndarray:
    """``x + mu(x) Delta + sigma(x) y sqrt(Delta)``; broadcasts over leading axes."""
    if not Delta > 0:
        raise ConfigurationError("Delta must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    xb = np.broadcast_to(x, shape + x.shape[-1:])
    mu = model.mu(x)
    sig = model.sigma(x)
    out = xb + mu * Delta + np.einsum("...rk,...k->...r", sig, y) * math.sqrt(Delta)
    return _check_finite(out, "weak Euler step")


def _data_at(model: SdeModel, x: np.ndarray) -> SecondOrderData:
    lead = x.shape[:-1]
    data = scheme_derivatives(model, x.reshape(-1, model.d))
    return SecondOrderData(*(a.reshape(lead + a.shape[1:]) for a in data.arrays()))


def step_weak_taylor2(model: SdeModel, x, xi, V, Delta: float, data: Optional[SecondOrderData] = None):
    """Simplified order-2 weak Taylor step.

    ``x`` is ``(..., d)``, ``xi`` ``(..., m)`` and ``V`` ``(..., m, m)``; leading
    axes broadcast, so one state can be pushed through many outcomes at once.
    ``data`` may carry precomputed operator values at ``x``.
    """
    if not Delta > 0:
        raise ConfigurationError("Delta must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(xi, dtype=float)
    z = np.asarray(V, dtype=float)
    if data is None:
        data = _data_at(model, x)
    mu = model.mu(x)
    sig = model.sigma(x)
    sd = math.sqrt(Delta)
    yyz = y[..., :, None] * y[..., None, :] + z
    # contract L^k sigma^{rl} with (y^k y^l + V^{kl}) as one batched matrix product
    Lk = np.moveaxis(data.Lksigma, -2, -3)
    Lk = Lk.reshape(Lk.shape[:-2] + (-1,))
    second = np.matmul(Lk, yyz.reshape(yyz.shape[:-2] + (-1, 1)))[..., 0]
    mixed = data.L0sigma + np.swapaxes(data.Lkmu, -1, -2)
    out = (
        x
        + np.matmul(sig * sd + mixed * (0.5 * Delta * sd), y[..., None])[..., 0]
        + (mu + 0.5 * second) * Delta
        + 0.5 * data.L0mu * Delta**2
    )
    return _check_finite(out, "weak Taylor-2 step")


def step(model: SdeModel, order: int, x, xi, V, Delta: float, data=None) -> np.ndarray:
    """Dispatch to the scheme of the given order (``V`` ignored for order 1)."""
    if order == 1:
        return step_weak_euler(model, x, xi, Delta)
    return step_weak_taylor2(model, x, xi, V, Delta, data)


def step_increment(model: SdeModel, x, increment, Delta: float) -> np.ndarray:
    if isinstance(increment, Order1Increment):
        return step_weak_euler(model, x, increment.xi, Delta)
    if isinstance(increment, Order2Increment):
        return step_weak_taylor2(model, x, increment.xi, increment.V, Delta)
    raise ContractViolation(f"unsupported increment {type(increment).__name__}")


# --------------------------------------------------------------------------
# Path bundles


@dataclass(frozen=True)
class PathBundle:
    """Simulated scheme paths and the increment codes that produced them.

    ``states`` is ``(N, J+1, d)``; ``xi_codes`` is ``(N, J, m)`` int8 with values
    in ``{-1, 1}`` (order 1) or ``{-1, 0, 1}`` (order 2, scaled by sqrt3);
    ``pair_codes`` is ``(N, J, m(m-1)/2)`` int8 signs for order 2, else ``None``.
    """

    model_key: str
    spec: SchemeSpec
    phase: str
    seed: int
    states: np.ndarray
    xi_codes: np.ndarray
    pair_codes: Optional[np.ndarray]

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def J(self) -> int:
        return self.spec.J

    @property
    def order(self) -> int:
        return self.spec.order

    @property
    def m(self) -> int:
        return self.xi_codes.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def xi(self, j: int) -> np.ndarray:
        """Decoded ``xi`` used in step ``j`` (1-based), shape ``(N, m)``."""
        return decode_xi(self.xi_codes[:, j - 1, :], self.order)

    def pairs(self, j: int) -> np.ndarray:
        if self.pair_codes is None:
            return np.zeros((self.N, 0))
        return self.pair_codes[:, j - 1, :].astype(float)

    def V(self, j: int) -> np.ndarray:
        return v_matrix(self.pairs(j), self.m)

    def increment(self, i: int, j: int):
        if self.order == 1:
            return Order1Increment(decode_xi(self.xi_codes[i, j - 1], 1))
        pairs = self.pair_codes[i, j - 1].astype(float)
        return Order2Increment(decode_xi(self.xi_codes[i, j - 1], 2), v_matrix(pairs, self.m))

    def save(self, path, model: SdeModel) -> None:
        meta = {
            "model_key": self.model_key,
            "order": self.spec.order,
            "J": self.spec.J,
            "T": self.spec.T,
            "phase": self.phase,
            "seed": int(self.seed),
        }
        arrays = {"states": self.states, "xi_codes": self.xi_codes}
        if self.pair_codes is not None:
            arrays["pair_codes"] = self.pair_codes
        container.save(path, "paths", model.key_hash, meta, arrays)

    @classmethod
    def load(cls, path, model: SdeModel) -> "PathBundle":
        meta, arrays = container.load(path, "paths", model.key_hash)
        spec = SchemeSpec(meta["order"], meta["J"], meta["T"])
        return cls(
            meta["model_key"], spec, meta["phase"], meta["seed"],
            arrays["states"], arrays["xi_codes"], arrays.get("pair_codes"),
        )


def _block_ranges(N: int, block_size: int):
    return [(b, b * block_size, min(N, (b + 1) * block_size)) for b in range(-(-N // block_size))]


def _simulate_block(model, spec, seed, phase, block, n, block_size, keep_states):
    rng = stream(seed, phase, block)
    xi_c, pair_c = draw_codes(rng, spec.order, (block_size, spec.J), model.m)
    xi_c = xi_c[:n]
    pair_c = pair_c[:n] if pair_c is not None else None
    x = np.broadcast_to(model.x0, (n, model.d)).copy()
    states = np.empty((n, spec.J + 1, model.d)) if keep_states else None
    if keep_states:
        states[:, 0] = x
    Delta = spec.Delta
    for j in range(spec.J):
        xi = decode_xi(xi_c[:, j], spec.order)
        V = v_matrix(pair_c[:, j], model.m) if spec.order == 2 else None
        x = step(model, spec.order, x, xi, V, Delta)
        if keep_states:
            states[:, j + 1] = x
    return (states if keep_states else x), xi_c, pair_c


def _run_blocks(model, spec, N, seed, phase, workers, block_size, keep_states):
    if N < 1:
        raise ConfigurationError("number of paths N must be >= 1")
    if phase not in PHASES:
        raise ConfigurationError(f"unknown phase {phase!r}")
    ranges = _block_ranges(N, block_size)

    def job(r):
        b, lo, hi = r
        return _simulate_block(model, spec, seed, phase, b, hi - lo, block_size, keep_states)

    if workers and workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, ranges))
    else:
        results = [job(r) for r in ranges]
    return results


def simulate_paths(
    model: SdeModel,
    spec: SchemeSpec,
    N: int,
    seed: int,
    phase: str,
    *,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
    max_floats: int = MAX_STATE_FLOATS,
) -> PathBundle:
    """Simulate ``N`` independent paths of the scheme, keeping every time slice."""
    if N * (spec.J + 1) * model.d > max_floats:
        raise ResourceError(
            f"path bundle of {N}x{spec.J + 1}x{model.d} states exceeds the budget of {max_floats} floats"
        )
    results = _run_blocks(model, spec, N, seed, phase, workers, block_size, True)
    states = np.concatenate([r[0] for r in results])
    xi_codes = np.concatenate([r[1] for r in results])
    pair_codes = np.concatenate([r[2] for r in results]) if spec.order == 2 else None
    return PathBundle(model.key, spec, phase, int(seed), states, xi_codes, pair_codes)


def simulate_terminal(
    model: SdeModel,
    spec: SchemeSpec,
    N: int,
    seed: int,
    phase: str,
    *,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
    max_floats: int = MAX_STATE_FLOATS,
) -> np.ndarray:
    """Terminal states only, ``(N, d)``; equal to ``simulate_paths(...).terminal``."""
    if N * model.d > max_floats:
        raise ResourceError(f"{N}x{model.d} terminal states exceed the budget of {max_floats} floats")
    results = _run_blocks(model, spec, N, seed, phase, workers, block_size, False)
    return np.concatenate([r[0] for r in results])


# --------------------------------------------------------------------------
# Euler-Maruyama coupling for the multilevel baseline


def step_euler_maruyama_coupled(model: SdeModel, x_fine, x_coarse, gaussians, Delta_fine: float):
    """Advance a fine path ``M`` Euler-Maruyama substeps and its coarse partner one step.

    ``gaussians`` has shape ``(..., M, m)`` of standard normals; the coarse path
    uses their sum, which is the usual level coupling.
    """
    gaussians = np.asarray(gaussians, dtype=float)
    M = gaussians.shape[-2]
    if M < 2:
        raise ConfigurationError("coupling needs M >= 2 fine substeps")
    sd = math.sqrt(Delta_fine)
    xf = np.asarray(x_fine, dtype=float)
    for i in range(M):
        g = gaussians[..., i, :]
        xf = xf + model.mu(xf) * Delta_fine + np.einsum("...rk,...k->...r", model.sigma(xf), g) * sd
    xc = np.asarray(x_coarse, dtype=float)
    total = gaussians.sum(axis=-2)
    xc = xc + model.mu(xc) * (M * Delta_fine) + np.einsum("...rk,...k->...r", model.sigma(xc), total) * sd
    _check_finite(xf, "Euler-Maruyama fine step")
    _check_finite(xc, "Euler-Maruyama coarse step")
    return xf, xc
