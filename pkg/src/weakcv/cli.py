"""Command-line front end.

Subcommands ``estimate``, ``convergence``, ``complexity`` and ``verify``.  Settings
come from an optional ``key = value`` config file (an optional ``[run]`` header
is allowed) and are overridden by flags.  Every run that writes a CSV also
writes a manifest next to it: the canonical config, usable again via
``--config``.
"""

from __future__ import annotations

import argparse
import csv
import math
import re
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import AccuracyError, ConfigurationError, ResourceError, WeakCVError
from .estimators import (
    METHODS,
    ExperimentConfig,
    estimate_exact_cv,
    estimate_smc,
    fit_complexity_slope,
    run_once,
    run_repetitions,
)
from .models import available_models, builtin_model
from .oracle import exact_discrete_expectation, verification_suite
from .schemes import SchemeSpec

CSV_HEADER = [
    "method", "epsilon", "J", "N", "N0", "Q", "R", "estimate", "rmse", "variance",
    "var_reduction_ratio", "wall_seconds", "reps", "seed",
]

QUICK_EPSILON = (0.25, 0.125, 0.0625)
FULL_EPSILON = (0.25, 0.125, 0.0625, 0.03125, 0.015625)
VERIFY_TOL = 1e-10


@dataclass(frozen=True)
class RunConfig:
    model: str = "arsinh1d"
    method: tuple = ("rrcv",)
    order: int = 2
    epsilon: tuple = QUICK_EPSILON
    p: int = 3
    basis: str = "global_poly"
    include_payoff: bool = True
    Q: Optional[int] = None
    R: Optional[float] = None
    nu: float = math.inf
    c_J: Optional[float] = None
    c_N: Optional[float] = None
    c_N0: Optional[float] = None
    c_Q: Optional[float] = None
    c_R: Optional[float] = None
    J: Optional[int] = None
    N: Optional[int] = None
    N0: Optional[int] = None
    steps: Optional[tuple] = None
    truncation: str = "default"
    reps: int = 20
    seed: int = 0
    output: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        if self.model not in available_models():
            raise ConfigurationError(f"model: unknown model {self.model!r}; choose from {', '.join(available_models())}")
        for m in self.method:
            if m not in METHODS:
                raise ConfigurationError(f"method: unknown method {m!r}")
        if not self.method:
            raise ConfigurationError("method: at least one method is required")
        if self.order not in (1, 2):
            raise ConfigurationError("order: must be 1 or 2")
        for e in self.epsilon:
            if not 0 < e < 1:
                raise ConfigurationError(f"epsilon: {e} is outside (0, 1)")
        if not self.epsilon:
            raise ConfigurationError("epsilon: at least one value is required")
        if self.basis not in ("global_poly", "piecewise_poly"):
            raise ConfigurationError("basis: must be global_poly or piecewise_poly")
        if self.p < 0:
            raise ConfigurationError("p: must be >= 0")
        if self.reps < 1:
            raise ConfigurationError("reps: must be >= 1")
        if self.threads < 1:
            raise ConfigurationError("threads: must be >= 1")
        if not self.nu > 0:
            raise ConfigurationError("nu: must be positive")
        for name in ("J", "N", "N0", "Q"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigurationError(f"{name}: must be >= 1")
        if self.R is not None and not self.R > 0:
            raise ConfigurationError("R: must be positive")
        if self.steps is not None and any(s < 1 for s in self.steps):
            raise ConfigurationError("steps: every entry must be >= 1")
        if self.truncation not in ("default", "none", "auto"):
            try:
                float(self.truncation)
            except ValueError:
                raise ConfigurationError("truncation: use default, none, auto or a number") from None


# --------------------------------------------------------------------------
# Parsing

_RANGE = re.compile(r"^\s*2\^(-?\d+)\s*\.\.\s*2\^(-?\d+)\s*$")


def _number(text: str) -> float:
    text = text.strip()
    m = re.fullmatch(r"2\^(-?\d+)", text)
    if m:
        return 2.0 ** int(m.group(1))
    if text.lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def parse_epsilon(text: str) -> tuple:
    """``"2^-2..2^-6"`` or a comma list of numbers / ``2^k`` terms."""
    m = _RANGE.match(text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        step = 1 if b >= a else -1
        return tuple(2.0**k for k in range(a, b + step, step))
    return tuple(_number(t) for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


def _trunc(text: str) -> str:
    t = text.strip()
    if t in ("default", "none", "auto"):
        return t
    return repr(float(t))


_CONVERTERS = {
    "model": str.strip,
    "method": lambda t: tuple(s.strip() for s in t.split(",") if s.strip()),
    "order": _int,
    "epsilon": parse_epsilon,
    "p": _int,
    "basis": lambda t: {"global": "global_poly", "piecewise": "piecewise_poly"}.get(t.strip(), t.strip()),
    "include_payoff": _bool,
    "Q": _opt(_int),
    "R": _opt(float),
    "nu": _number,
    "c_J": _opt(float),
    "c_N": _opt(float),
    "c_N0": _opt(float),
    "c_Q": _opt(float),
    "c_R": _opt(float),
    "J": _opt(_int),
    "N": _opt(_int),
    "N0": _opt(_int),
    "steps": _opt(lambda t: tuple(_int(s) for s in t.split(",") if s.strip())),
    "truncation": _trunc,
    "reps": _int,
    "seed": _int,
    "output": _opt(str.strip),
    "threads": _int,
}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into raw converted values (no defaults applied)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            if line[1:-1].strip() != "run":
                raise ConfigurationError(f"line {lineno}: unknown section {line}")
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERTERS[key](val)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        try:
            RunConfig(**{key: values[key]})  # range checks are per key
        except ConfigurationError as exc:
            raise ConfigurationError(f"line {lineno}: {exc}") from None
    return values


def parse_config(text: str = "", overrides: Optional[dict] = None, full: bool = False) -> RunConfig:
    """Config text, then flag overrides (already converted) on top of the defaults."""
    values = parse_config_text(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if full:
        values.setdefault("reps", 100)
        values.setdefault("epsilon", FULL_EPSILON)
    return RunConfig(**values)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def canonical(cfg: RunConfig) -> str:
    """The config as ``key = value`` text; parsing it gives back ``cfg``."""
    lines = ["[run]"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Running


def _experiment(cfg: RunConfig, method: str, eps: float) -> ExperimentConfig:
    pref = {k: getattr(cfg, k) for k in ("c_J", "c_N", "c_N0", "c_Q", "c_R") if getattr(cfg, k) is not None}
    trunc = cfg.truncation
    if trunc not in ("default", "none", "auto"):
        trunc = float(trunc)
    return ExperimentConfig(
        builtin_model(cfg.model), method, eps, order=cfg.order, p=cfg.p, basis=cfg.basis,
        include_payoff=cfg.include_payoff, nu=cfg.nu, prefactors=pref, truncation=trunc,
        workers=cfg.threads, overrides={k: getattr(cfg, k) for k in ("J", "N", "N0", "Q", "R")},
    )


def _row(res, method=None) -> dict:
    return {
        "method": method or res.method, "epsilon": res.epsilon, "J": res.J, "N": res.N, "N0": res.N0,
        "Q": res.Q, "R": res.R, "estimate": res.estimate, "rmse": res.empirical_rmse,
        "variance": res.empirical_variance, "var_reduction_ratio": res.var_reduction_ratio,
        "wall_seconds": res.wall_seconds, "reps": res.repetitions, "seed": res.seed,
    }


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class CsvSink:
    """Writes rows as they arrive; removes the file if the run fails."""

    def __init__(self, path: Path):
        self.path = path
        self.rows = []

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(CSV_HEADER)
        return self

    def write(self, row: dict) -> None:
        self.rows.append(row)
        self.writer.writerow([_cell(row.get(k)) for k in CSV_HEADER])
        self.fh.flush()

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is not None:
            self.path.unlink(missing_ok=True)
        return False


def _side(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def write_manifest(cfg: RunConfig, command: str, path: Path) -> Path:
    target = _side(path, ".manifest")
    header = f"# weakcv {__version__}\n# subcommand: {command}\n# rerun: weakcv {command} --config {target.name}\n"
    target.write_text(header + canonical(cfg))
    return target


def cmd_estimate(cfg: RunConfig, sink: CsvSink, exact_cv: bool = False) -> None:
    eps = cfg.epsilon[0]
    if exact_cv:
        model = builtin_model(cfg.model)
        J = cfg.J or math.ceil(eps**-0.5)
        res = estimate_exact_cv(model, SchemeSpec(1, J, model.T), cfg.N0 or 10_000, cfg.seed)
        res.epsilon = eps
        sink.write(_row(res))
        return
    ecfg = _experiment(cfg, cfg.method[0], eps)
    res = run_repetitions(ecfg, cfg.reps, cfg.seed) if cfg.reps >= 2 else run_once(ecfg, cfg.seed)
    sink.write(_row(res))


def _default_steps(order: int) -> tuple:
    return (4, 8, 16) if order == 1 else (2, 4, 8)


def cmd_convergence(cfg: RunConfig, sink: CsvSink):
    """Bias of the scheme against the model reference for each number of steps."""
    model = builtin_model(cfg.model)
    ref = model.reference_value
    steps = cfg.steps or _default_steps(cfg.order)
    label = "weak_euler" if cfg.order == 1 else "weak_taylor2"
    pts = []
    for J in steps:
        spec = SchemeSpec(cfg.order, J, model.T)
        t0 = time.perf_counter()
        try:
            value, var, n0, reps = exact_discrete_expectation(model, spec), 0.0, None, 1
        except ResourceError:
            res = estimate_smc(model, spec, cfg.N0 or 1_000_000, cfg.seed, workers=cfg.threads)
            value, var, n0, reps = res.estimate, res.empirical_variance, res.N0, 1
        bias = None if ref is None else abs(value - ref)
        row = {
            "method": label, "epsilon": None, "J": J, "N0": n0, "estimate": value, "rmse": bias,
            "variance": var, "wall_seconds": time.perf_counter() - t0, "reps": reps, "seed": cfg.seed,
        }
        sink.write(row)
        if bias:
            pts.append((spec.Delta, bias))
    slope = None
    if len(pts) >= 2:
        x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
        slope = float(np.polyfit(x, y, 1)[0])
        sink.write({"method": f"slope_{label}", "estimate": slope})
    return slope


def cmd_complexity(cfg: RunConfig, sink: CsvSink) -> dict:
    slopes = {}
    for method in cfg.method:
        pts = []
        for eps in cfg.epsilon:
            res = run_repetitions(_experiment(cfg, method, eps), max(cfg.reps, 2), cfg.seed)
            sink.write(_row(res))
            pts.append((res.empirical_rmse, res.wall_seconds))
        slope = None
        if len(pts) >= 3:
            slope = fit_complexity_slope(pts)
            sink.write({"method": f"slope_{method}", "estimate": slope, "reps": max(cfg.reps, 2), "seed": cfg.seed})
        slopes[method] = slope
    return slopes


def cmd_verify(out=None) -> float:
    out = out or sys.stdout
    rows = verification_suite()
    worst = 0.0
    print(f"{'check':<16}{'model':<12}{'order':>6}{'J':>4}  residual", file=out)
    for check, model, order, J, r in rows:
        print(f"{check:<16}{model:<12}{order:>6}{J:>4}  {r:.3e}", file=out)
        worst = max(worst, r)
    print(f"max residual {worst:.3e}", file=out)
    if worst > VERIFY_TOL:
        raise AccuracyError(f"largest residual {worst:.3e} exceeds {VERIFY_TOL:g}")
    return worst


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakcv", description="Regression control variates for weak SDE schemes.")
    parser.add_argument("--version", action="version", version=f"weakcv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("estimate", "one estimator row for the first epsilon"),
        ("convergence", "discretisation bias against the number of steps"),
        ("complexity", "time against RMSE over the epsilon list, with fitted slopes"),
        ("verify", "exactness checks of the representation on enumerable instances"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--full", action="store_true", help="100 repetitions and epsilon down to 2^-6")
        p.add_argument("--model")
        p.add_argument("--method", help="one method or a comma list (smc, mlmc, rcv, rrcv)")
        p.add_argument("--order")
        p.add_argument("--epsilon", help="e.g. 0.0625, '2^-4' or '2^-2..2^-5'")
        p.add_argument("--p")
        p.add_argument("--basis", help="global_poly or piecewise_poly")
        p.add_argument("--Q")
        p.add_argument("--R")
        p.add_argument("--nu")
        p.add_argument("--c-N", dest="c_N")
        p.add_argument("--c-N0", dest="c_N0")
        p.add_argument("--J")
        p.add_argument("--N")
        p.add_argument("--N0")
        p.add_argument("--steps", help="comma list of step counts for convergence")
        p.add_argument("--truncation")
        p.add_argument("--reps")
        p.add_argument("--seed")
        p.add_argument("--threads")
        p.add_argument("--output", "-o", help="CSV path (figure and manifest go next to it)")
        p.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
        p.add_argument("--emit-gnuplot", action="store_true", help="also write a gnuplot script")
        if name == "estimate":
            p.add_argument("--exact-cv", action="store_true", help="closed-form control variate (motivating model)")
    return parser


_FLAG_KEYS = (
    "model", "method", "order", "epsilon", "p", "basis", "Q", "R", "nu", "c_N", "c_N0", "J", "N", "N0",
    "steps", "truncation", "reps", "seed", "threads", "output",
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_path = None
    try:
        text = Path(args.config).read_text() if args.config else ""
        flags = {}
        for key in _FLAG_KEYS:
            val = getattr(args, key, None)
            if val is not None:
                try:
                    flags[key] = _CONVERTERS[key](val)
                except (ValueError, TypeError) as exc:
                    raise ConfigurationError(f"--{key}: {exc}") from None
        cfg = parse_config(text, flags, full=args.full)

        if args.command == "verify":
            cmd_verify()
            return 0

        out_path = Path(cfg.output or f"{args.command}.csv")
        cfg = replace(cfg, output=str(out_path))
        with CsvSink(out_path) as sink:
            if args.command == "estimate":
                cmd_estimate(cfg, sink, exact_cv=getattr(args, "exact_cv", False))
            elif args.command == "convergence":
                slope = cmd_convergence(cfg, sink)
            else:
                slopes = cmd_complexity(cfg, sink)
        if args.command == "convergence" and not args.no_plot:
            from .plotting import plot_convergence

            plot_convergence([r for r in sink.rows if r.get("J")], slope, _side(out_path, ".png"))
        if args.command == "complexity":
            if not args.no_plot:
                from .plotting import plot_complexity

                plot_complexity([r for r in sink.rows if r.get("J")], slopes, _side(out_path, ".png"))
            if args.emit_gnuplot:
                from .plotting import gnuplot_script

                script = gnuplot_script(out_path.name, cfg.method, _side(out_path, "-gnuplot.png").name)
                _side(out_path, ".gp").write_text(script)
        write_manifest(cfg, args.command, out_path)
        print(f"wrote {out_path}")
        return 0
    except WeakCVError as exc:
        print(f"weakcv: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"weakcv: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
