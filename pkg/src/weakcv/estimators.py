"""End-to-end estimators, parameter rules and the repetition harness.

Four estimators of ``E[f(X_T)]`` are provided: plain Monte Carlo over the
order-2 scheme (``smc``), geometric multilevel Monte Carlo with Euler-Maruyama
(``mlmc``), and the two regression control-variate methods (``rcv``,
``rrcv``), each fitted on training paths and evaluated on independent testing
paths.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .control_variates import CvModel, control_variate_values, exact_cv_motivating, fit_rcv, fit_rrcv
from .errors import AccuracyError, ConfigurationError, NumericalError
from .models import SdeModel
from .regression import BasisSpec
from .schemes import SchemeSpec, simulate_paths, simulate_terminal, step_euler_maruyama_coupled
from .stochastics import stream

METHODS = ("smc", "mlmc", "rcv", "rrcv")

# Prefactors of the experiments: one set for scalar models, one for the
# five-dimensional model.  c_N / c_N0 multiply ceil(eps^-exponent); for smc
# c_N0 multiplies eps^-2; for mlmc c_N0 is the initial level path count.
DEFAULT_PREFACTORS = {
    1: {
        "rrcv": {"c_N": 64, "c_N0": 128},
        "rcv": {"c_N": 32, "c_N0": 128},
        "smc": {"c_N0": 32},
        "mlmc": {"c_N0": 1000},
    },
    5: {
        "rrcv": {"c_N": 512, "c_N0": 128},
        "rcv": {"c_N": 32, "c_N0": 1024},
        "smc": {"c_N0": 512},
        "mlmc": {"c_N0": 10_000},
    },
}


def default_prefactors(method: str, d: int) -> dict:
    """Default prefactors: the scalar set for ``d == 1``, otherwise the five-dimensional set."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    return dict(DEFAULT_PREFACTORS[1 if d == 1 else 5][method])


# --------------------------------------------------------------------------
# Parameter selection


def _ratio(a: float, b: float, c: float, e: float, nu: float) -> float:
    """``(a nu + b) / (c nu + e)``, with ``nu = inf`` taken as the limit."""
    if math.isinf(nu):
        return a / c
    return (a * nu + b) / (c * nu + e)


def exponents(method: str, d: int, p: int, nu: float = math.inf) -> dict:
    """Exponents ``x`` in ``eps^-x`` for Q, R, N (= N0) and the total complexity."""
    if method not in ("rcv", "rrcv"):
        raise ConfigurationError("closed-form exponents exist for rcv and rrcv only")
    if not nu > 0:
        raise ConfigurationError("tail exponent nu must be positive")
    q = p + 1
    c, e = 2 * d + 8 * q, 4 * q * d
    if method == "rcv":
        out = {
            "Q": _ratio(5, 6 * q, c, e, nu),
            "R": _ratio(0, 6 * q - d, c, e, nu),
            "N": _ratio(5 * d + 10 * q, 8 * q * d, c, e, nu),
            "C": _ratio(11 * d + 14 * q, 16 * q * d, c, e, nu),
        }
    else:
        out = {
            "Q": _ratio(5, 10 * q, c, e, nu),
            "R": _ratio(0, 5 * q, c, e, nu),
            "N": _ratio(5 * d + 10 * q, 10 * q * d, c, e, nu),
            "C": _ratio(11 * d + 14 * q, 22 * q * d, c, e, nu),
        }
    out["J"] = 0.5
    return out


def complexity_exponent(method: str, d: int, p: float, nu: float = math.inf) -> float:
    """Exponent of ``eps^-1`` in the cost; ``p = inf`` gives the common limit 7/4."""
    if method == "smc":
        return 2.5
    if method == "mlmc":
        return 2.0
    if math.isinf(p):
        if not math.isinf(nu):
            raise ConfigurationError("the p -> infinity limit is taken together with nu -> infinity")
        return 1.75
    return exponents(method, d, int(p), nu)["C"]


@dataclass(frozen=True)
class ComplexityParams:
    epsilon: float
    p: int
    d: int
    method: str
    nu: float = math.inf
    c_J: float = 1.0
    c_N: Optional[float] = None
    c_N0: Optional[float] = None
    c_Q: float = 1.0
    c_R: float = 1.0
    log_factor: bool = False

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.p < 0 or self.d < 1:
            raise ConfigurationError("need p >= 0 and d >= 1")
        if not self.nu > 0:
            raise ConfigurationError("tail exponent nu must be positive")


@dataclass(frozen=True)
class Parameters:
    J: int
    N: Optional[int]
    N0: int
    Q: Optional[int] = None
    R: Optional[float] = None
    M: Optional[int] = None


def choose_parameters(cp: ComplexityParams) -> Parameters:
    eps = cp.epsilon
    pref = default_prefactors(cp.method, cp.d)
    c_N = pref.get("c_N") if cp.c_N is None else cp.c_N
    c_N0 = pref["c_N0"] if cp.c_N0 is None else cp.c_N0
    J = math.ceil(cp.c_J * eps**-0.5)
    if cp.method == "smc":
        return Parameters(J, None, math.ceil(c_N0 * eps**-2))
    if cp.method == "mlmc":
        return Parameters(J, None, int(c_N0), M=4)
    d, p, nu = cp.d, cp.p, cp.nu
    if not (2 * (p + 1) > d and nu > 2 * d * (p + 1) / (2 * (p + 1) - d)):
        warnings.warn(f"(p={p}, nu={nu}) lies outside the regime covered by the complexity theorems", stacklevel=2)
    ex = exponents(cp.method, d, p, nu)
    base = math.ceil(eps ** -ex["N"])
    if cp.log_factor and cp.method == "rrcv":
        base = math.ceil(base * math.sqrt(abs(math.log(eps))))
    Q = max(1, math.ceil(cp.c_Q * eps ** -ex["Q"]))
    R = cp.c_R * eps ** -ex["R"]
    return Parameters(J, int(c_N * base), int(c_N0 * base), Q, R)


# --------------------------------------------------------------------------
# Results


@dataclass
class ExperimentResult:
    method: str
    epsilon: Optional[float]
    estimate: float
    empirical_rmse: float
    empirical_variance: float
    wall_seconds: float
    J: Optional[int] = None
    N: Optional[int] = None
    N0: Optional[int] = None
    Q: Optional[int] = None
    R: Optional[float] = None
    repetitions: int = 1
    seed: Optional[int] = None
    var_reduction_ratio: Optional[float] = None
    estimates: Optional[np.ndarray] = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if not self.empirical_rmse >= 0:
            raise NumericalError(f"invalid rmse {self.empirical_rmse}")


def estimate_smc(model: SdeModel, spec: SchemeSpec, N0: int, seed: int, *, workers: int = 1) -> ExperimentResult:
    if N0 < 2:
        raise ConfigurationError("standard Monte Carlo needs N0 >= 2")
    t0 = time.perf_counter()
    fT = model.f(simulate_terminal(model, spec, N0, seed, "test", workers=workers))
    var = float(np.var(fT, ddof=1)) / N0
    return ExperimentResult(
        "smc", None, float(np.mean(fT)), math.sqrt(var), var, time.perf_counter() - t0,
        J=spec.J, N0=N0, seed=seed,
    )


def estimate_with_cv(model: SdeModel, spec: SchemeSpec, cv: CvModel, N0: int, seed: int, *, workers: int = 1) -> ExperimentResult:
    """Mean of ``f(X_T) - M`` over ``N0`` testing paths."""
    if N0 < 2:
        raise ConfigurationError("the control-variate estimator needs N0 >= 2")
    t0 = time.perf_counter()
    testing = simulate_paths(model, spec, N0, seed, "test", workers=workers)
    fT = model.f(testing.terminal)
    vals = fT - control_variate_values(cv, model, testing)
    return _cv_result(cv.method, spec, N0, seed, fT, vals, time.perf_counter() - t0)


def estimate_exact_cv(model: SdeModel, spec: SchemeSpec, N0: int, seed: int) -> ExperimentResult:
    """Estimator with the closed-form perfect control variate of the motivating model."""
    if model.name != "motivating" or spec.order != 1:
        raise ConfigurationError("the exact control variate needs the motivating model with order 1")
    t0 = time.perf_counter()
    testing = simulate_paths(model, spec, N0, seed, "test")
    fT = model.f(testing.terminal)
    vals = fT - exact_cv_motivating(model.params["sigma"], model.params["x0"], spec, testing)
    return _cv_result("exact", spec, N0, seed, fT, vals, time.perf_counter() - t0)


def _cv_result(method, spec, N0, seed, fT, vals, wall):
    var_cv = float(np.var(vals, ddof=1))
    var_f = float(np.var(fT, ddof=1))
    ratio = var_cv / var_f if var_f > 0 else float("nan")
    var = var_cv / N0
    return ExperimentResult(
        method, None, float(np.mean(vals)), math.sqrt(var), var, wall,
        J=spec.J, N0=N0, seed=seed, var_reduction_ratio=ratio,
        flags={"var_f": var_f, "var_f_minus_M": var_cv},
    )


# --------------------------------------------------------------------------
# Multilevel Monte Carlo

_MLMC_BATCH_FLOATS = 2_000_000


def mlmc_level_samples(model: SdeModel, level: int, n: int, M: int, seed: int, batch: int) -> np.ndarray:
    """``n`` samples of ``f(fine) - f(coarse)`` at ``level`` (``f`` itself at level 0)."""
    rng = stream(seed, "mlmc", level, batch)
    T, m = model.T, model.m
    x0 = np.broadcast_to(model.x0, (n, model.d))
    if level == 0:
        g = rng.standard_normal((n, m))
        x = x0 + model.mu(x0) * T + np.einsum("nrk,nk->nr", model.sigma(x0), g) * math.sqrt(T)
        return model.f(x)
    dt = T / M**level
    xf = x0.copy()
    xc = x0.copy()
    for _ in range(M ** (level - 1)):
        g = rng.standard_normal((n, M, m))
        xf, xc = step_euler_maruyama_coupled(model, xf, xc, g, dt)
    return model.f(xf) - model.f(xc)


def _mlmc_cost(level: int, M: int) -> float:
    return 1.0 if level == 0 else M**level * (1.0 + 1.0 / M)


def estimate_mlmc(
    model: SdeModel,
    epsilon: float,
    M: int = 4,
    initial_paths: int = 1000,
    seed: int = 0,
    *,
    max_level: int = 12,
    min_levels: int = 3,
) -> ExperimentResult:
    """Geometric MLMC with Euler-Maruyama levels ``Delta_l = T / M^l``.

    Levels are added until the extrapolated bias ``|E Y_L| / (M - 1)`` is below
    ``eps / sqrt2``; path counts follow ``N_l = 2 eps^-2 sqrt(V_l / C_l) sum_k sqrt(V_k C_k)``.
    """
    if M < 2:
        raise ConfigurationError("MLMC refinement factor M must be >= 2")
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    if initial_paths < 2:
        raise ConfigurationError("MLMC needs at least 2 initial paths per level")
    t0 = time.perf_counter()
    sums: list = []  # per level: [n, sum Y, sum Y^2]
    batches: list = []

    def add(level, n):
        while n > 0:
            size = min(n, max(1, _MLMC_BATCH_FLOATS // (M**level * model.m)))
            y = mlmc_level_samples(model, level, size, M, seed, batches[level])
            batches[level] += 1
            sums[level][0] += size
            sums[level][1] += float(np.sum(y))
            sums[level][2] += float(np.sum(y * y))
            n -= size

    def new_level():
        if len(sums) > max_level:
            raise AccuracyError(f"MLMC did not reach the bias target within {max_level} levels")
        sums.append([0, 0.0, 0.0])
        batches.append(0)
        add(len(sums) - 1, initial_paths)

    for _ in range(min_levels):
        new_level()
    while True:
        while True:
            n = np.array([s[0] for s in sums], dtype=float)
            mean = np.array([s[1] for s in sums]) / n
            var = np.maximum(np.array([s[2] for s in sums]) / n - mean**2, 0.0)
            cost = np.array([_mlmc_cost(l, M) for l in range(len(sums))])
            target = np.ceil(2.0 / epsilon**2 * np.sqrt(var / cost) * np.sum(np.sqrt(var * cost)))
            extra = np.maximum(target - n, 0).astype(np.int64)
            if not np.any(extra > 0.01 * n):
                break
            for level, k in enumerate(extra):
                if k > 0:
                    add(level, int(k))
        rem = max(abs(mean[-1]), abs(mean[-2]) / M) / (M - 1)
        if rem <= epsilon / math.sqrt(2):
            break
        new_level()
    n = np.array([s[0] for s in sums], dtype=float)
    mean = np.array([s[1] for s in sums]) / n
    var = np.maximum(np.array([s[2] for s in sums]) / n - mean**2, 0.0)
    est_var = float(np.sum(var / n))
    L = len(sums) - 1
    return ExperimentResult(
        "mlmc", epsilon, float(np.sum(mean)), math.sqrt(est_var), est_var, time.perf_counter() - t0,
        J=M**L, N0=int(n[0]), seed=seed,
        flags={"levels": L, "N_l": [int(v) for v in n], "V_l": var.tolist(), "mean_l": mean.tolist()},
    )


# --------------------------------------------------------------------------
# Full pipelines and repetitions


@dataclass(frozen=True)
class ExperimentConfig:
    model: SdeModel
    method: str
    epsilon: float
    order: int = 2
    p: int = 3
    basis: str = "global_poly"
    include_payoff: bool = True
    nu: float = math.inf
    prefactors: dict = field(default_factory=dict)
    truncation: object = "default"
    workers: int = 1
    # fixed values for J, N, N0, Q, R that replace the chosen ones
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    def parameters(self) -> Parameters:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params = choose_parameters(ComplexityParams(
                self.epsilon, self.p, self.model.d, self.method, self.nu, **self.prefactors,
            ))
        fixed = {k: v for k, v in self.overrides.items() if v is not None}
        return replace(params, **fixed) if fixed else params

    def basis_spec(self, params: Parameters) -> BasisSpec:
        if self.basis == "global_poly":
            return BasisSpec("global_poly", self.p, self.model.d, include_payoff=self.include_payoff)
        return BasisSpec("piecewise_poly", self.p, self.model.d, Q=params.Q, R=params.R)


def run_once(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    """One complete run (training included) of the configured method."""
    params = cfg.parameters()
    model = cfg.model
    t0 = time.perf_counter()
    if cfg.method == "mlmc":
        res = estimate_mlmc(model, cfg.epsilon, params.M, params.N0, seed)
    else:
        spec = SchemeSpec(cfg.order, params.J, model.T)
        if cfg.method == "smc":
            res = estimate_smc(model, spec, params.N0, seed, workers=cfg.workers)
        else:
            basis = cfg.basis_spec(params)
            training = simulate_paths(model, spec, params.N, seed, "train", workers=cfg.workers)
            fitter = fit_rcv if cfg.method == "rcv" else fit_rrcv
            cv = fitter(training, model, basis, cfg.truncation)
            del training
            res = estimate_with_cv(model, spec, cv, params.N0, seed, workers=cfg.workers)
            res.N = params.N
            if basis.kind == "piecewise_poly":
                res.Q, res.R = params.Q, params.R
    res.wall_seconds = time.perf_counter() - t0
    res.epsilon = cfg.epsilon
    return res


def repetition_seeds(master_seed: int, reps: int) -> list[int]:
    return [int(np.random.SeedSequence([int(master_seed), r]).generate_state(1, np.uint64)[0]) for r in range(reps)]


def run_repetitions(cfg: ExperimentConfig, reps: int, master_seed: int) -> ExperimentResult:
    """``reps`` independent pipelines; RMSE against the model's reference when known."""
    if reps < 2:
        raise ConfigurationError("run_repetitions needs reps >= 2")
    runs = [run_once(cfg, s) for s in repetition_seeds(master_seed, reps)]
    est = np.array([r.estimate for r in runs])
    ref = cfg.model.reference_value
    flags = {}
    if ref is not None:
        rmse = math.sqrt(float(np.mean((est - ref) ** 2)))
    else:
        rmse = float(np.std(est, ddof=1))
        flags["rmse_from_spread"] = True
    ratios = [r.var_reduction_ratio for r in runs if r.var_reduction_ratio is not None]
    first = runs[0]
    return ExperimentResult(
        cfg.method, cfg.epsilon, float(np.mean(est)), rmse, float(np.var(est, ddof=1)),
        float(np.mean([r.wall_seconds for r in runs])),
        J=first.J, N=first.N, N0=first.N0, Q=first.Q, R=first.R, repetitions=reps, seed=int(master_seed),
        var_reduction_ratio=float(np.mean(ratios)) if ratios else None, estimates=est, flags=flags,
    )


def fit_complexity_slope(points) -> float:
    """Least-squares slope of ``log(time)`` on ``log(rmse)``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ConfigurationError("slope fitting needs at least 3 (rmse, seconds) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ConfigurationError("rmse and time values must be positive and finite")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(x) == 0:
        raise NumericalError("all rmse values are identical; the slope is undefined")
    return float(np.polyfit(x, y, 1)[0])
