"""Shared test utilities."""

import math

import numpy as np

from weakcv.oracle import enumerate_law
from weakcv.schemes import PathBundle


def enumerated_bundle(model, spec, phase="test"):
    """Every scheme path from ``x0`` as a bundle, with its probability weights."""
    law = enumerate_law(model, spec)
    K, J = law.K, spec.J
    idx = law.outcome_indices()  # (K^J, J)
    states = np.empty((K**J, J + 1, model.d))
    for j in range(J + 1):
        states[:, j] = np.repeat(law.levels[j], K ** (J - j), axis=0)
    table = law.table
    xi = table.xi[idx]
    if spec.order == 2:
        xi = xi / math.sqrt(3.0)
    xi_codes = np.rint(xi).astype(np.int8)
    pair_codes = np.rint(table.pairs[idx]).astype(np.int8) if spec.order == 2 else None
    bundle = PathBundle(model.key, spec, phase, 0, states, xi_codes, pair_codes)
    return bundle, law.prob


def weighted_var(values, prob):
    mean = prob @ values
    return float(prob @ (values - mean) ** 2)


def log_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
