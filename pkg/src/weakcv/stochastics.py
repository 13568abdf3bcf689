"""Discrete increments of the weak schemes and the orthonormal factors built on them.

Order-1 increments are vectors of independent signs.  Order-2 increments are a
pair ``(xi, V)``: ``xi`` has i.i.d. coordinates in ``{-sqrt3, 0, sqrt3}`` with
probabilities ``1/6, 2/3, 1/6`` and ``V`` is an ``m x m`` matrix with
independent signs above the diagonal, ``V[l, k] = -V[k, l]`` below it and
``-1`` on the diagonal.

Inside path bundles increments are kept as small integer codes:
``xi`` codes in ``{-1, 0, 1}`` (multiplied by 1 or sqrt3 on decode) and the
upper-triangular part of ``V`` as ``+-1`` in row-major pair order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ContractViolation, ResourceError

SQRT3 = math.sqrt(3.0)
HERMITE_MAX_DEGREE = 20
ENUMERATION_CAP = 10**7

PHASES = {"train": 1, "test": 2, "mlmc": 3}


# --------------------------------------------------------------------------
# Hermite polynomials


def hermite(k: int, x):
    """Normalised probabilists' Hermite polynomial ``H_k`` evaluated at ``x``.

    Uses ``sqrt(k+1) H_{k+1} = x H_k - sqrt(k) H_{k-1}``; works on scalars and arrays.
    """
    if k < 0 or k > HERMITE_MAX_DEGREE:
        raise ConfigurationError(f"Hermite degree {k} outside [0, {HERMITE_MAX_DEGREE}]")
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for n in range(1, k):
        prev, cur = cur, (x * cur - math.sqrt(n) * prev) / math.sqrt(n + 1)
    return cur if cur.ndim else float(cur)


# --------------------------------------------------------------------------
# Increments


def n_pairs(m: int) -> int:
    return m * (m - 1) // 2


def pair_index(m: int) -> list[tuple[int, int]]:
    """Upper-triangular pairs ``(k, l)``, ``k < l``, zero based, row-major."""
    return [(k, l) for k in range(m) for l in range(k + 1, m)]


@dataclass(frozen=True)
class Order1Increment:
    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if not np.all(np.abs(xi) == 1.0):
            raise ContractViolation("order-1 increment coordinates must be +-1")
        object.__setattr__(self, "xi", xi)

    order = 1


@dataclass(frozen=True)
class Order2Increment:
    xi: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        V = np.asarray(self.V, dtype=float)
        m = xi.shape[0]
        if V.shape != (m, m):
            raise ContractViolation(f"V must be {m}x{m}, got {V.shape}")
        if not np.allclose(V, -V.T - 2.0 * np.eye(m)):
            raise ContractViolation("V must be antisymmetric off the diagonal with V[k,k] = -1")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "V", V)

    order = 2

    @property
    def pairs(self) -> np.ndarray:
        m = self.xi.shape[0]
        return np.array([self.V[k, l] for k, l in pair_index(m)], dtype=float)


def v_matrix(pairs: np.ndarray, m: int) -> np.ndarray:
    """Expand upper-triangular sign entries ``(..., n_pairs)`` into ``(..., m, m)`` matrices."""
    pairs = np.asarray(pairs, dtype=float)
    out = np.zeros(pairs.shape[:-1] + (m, m))
    idx = np.arange(m)
    out[..., idx, idx] = -1.0
    for p, (k, l) in enumerate(pair_index(m)):
        out[..., k, l] = pairs[..., p]
        out[..., l, k] = -pairs[..., p]
    return out


def decode_xi(codes: np.ndarray, order: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    return codes if order == 1 else codes * SQRT3


def draw_codes(rng: np.random.Generator, order: int, shape: tuple[int, ...], m: int):
    """Draw increment codes for a block: ``xi`` codes of shape ``shape + (m,)`` and
    ``V`` pair codes of shape ``shape + (n_pairs(m),)`` (``None`` for order 1)."""
    if order == 1:
        xi = (2 * rng.integers(0, 2, size=shape + (m,), dtype=np.int8) - 1).astype(np.int8)
        return xi, None
    if order != 2:
        raise ConfigurationError(f"scheme order must be 1 or 2, got {order}")
    u = rng.integers(0, 6, size=shape + (m,), dtype=np.int8)
    xi = np.zeros_like(u)
    xi[u == 0] = -1
    xi[u == 5] = 1
    V = (2 * rng.integers(0, 2, size=shape + (n_pairs(m),), dtype=np.int8) - 1).astype(np.int8)
    return xi, V


def sample_increment(order: int, m: int, rng: np.random.Generator):
    """Draw one increment of the requested order from ``rng``."""
    if m < 1:
        raise ConfigurationError("noise dimension m must be >= 1")
    xi, V = draw_codes(rng, order, (), m)
    if order == 1:
        return Order1Increment(decode_xi(xi, 1))
    return Order2Increment(decode_xi(xi, 2), v_matrix(V, m))


def stream(seed: int, phase: str, *key: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, phase, *key)``.

    A Philox generator keyed by a ``SeedSequence`` whose spawn key carries the
    phase tag and the caller's indices, so any block of work can be reproduced
    independently of how work is scheduled.
    """
    if phase not in PHASES:
        raise ConfigurationError(f"unknown phase {phase!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(PHASES[phase],) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Outcome enumeration


@dataclass(frozen=True)
class OutcomeTable:
    """All one-step increment outcomes of a scheme with their probabilities.

    ``xi`` has shape ``(K, m)`` (decoded values), ``pairs`` shape ``(K, n_pairs)``
    and ``prob`` shape ``(K,)``.  When ``v_free`` is set the ``V`` entries are
    not enumerated; ``pairs`` then holds zeros (their mean) so that any step map
    that ignores off-diagonal ``V`` is evaluated correctly.
    """

    order: int
    m: int
    v_free: bool
    xi: np.ndarray
    pairs: np.ndarray
    prob: np.ndarray

    def __len__(self):
        return self.prob.shape[0]

    @property
    def V(self) -> np.ndarray:
        return v_matrix(self.pairs, self.m)

    def increments(self):
        for k in range(len(self)):
            if self.order == 1:
                yield Order1Increment(self.xi[k]), float(self.prob[k])
            else:
                yield Order2Increment(self.xi[k], self.V[k]), float(self.prob[k])

    def index_of(self, xi_codes: np.ndarray, pair_codes: np.ndarray | None) -> np.ndarray:
        """Row index into the table for stored increment codes ``(..., m)``."""
        xi_codes = np.asarray(xi_codes, dtype=np.int64)
        if self.order == 1:
            digits = (xi_codes + 1) // 2
            radix = 2
        else:
            digits = xi_codes + 1
            radix = 3
        idx = np.zeros(xi_codes.shape[:-1], dtype=np.int64)
        for r in range(self.m):
            idx = idx * radix + digits[..., r]
        if self.order == 2 and not self.v_free and n_pairs(self.m):
            pd = (np.asarray(pair_codes, dtype=np.int64) + 1) // 2
            for p in range(n_pairs(self.m)):
                idx = idx * 2 + pd[..., p]
        return idx


def outcome_count(order: int, m: int, v_free: bool = False) -> int:
    if order == 1:
        return 2**m
    return 3**m * (1 if v_free else 2 ** n_pairs(m))


@lru_cache(maxsize=64)
def outcome_table(order: int, m: int, v_free: bool = False) -> OutcomeTable:
    count = outcome_count(order, m, v_free)
    if count > ENUMERATION_CAP:
        raise ResourceError(f"{count} one-step outcomes exceed the enumeration cap {ENUMERATION_CAP}")
    npairs = n_pairs(m)
    if order == 1:
        xi = np.array(list(itertools.product((-1.0, 1.0), repeat=m))).reshape(-1, m)
        pairs = np.zeros((len(xi), npairs))
        prob = np.full(len(xi), 2.0**-m)
    elif order == 2:
        ys = np.array(list(itertools.product((-SQRT3, 0.0, SQRT3), repeat=m))).reshape(-1, m)
        zeros = (ys == 0.0).sum(axis=1)
        py = 4.0**zeros / 6.0**m
        if v_free or npairs == 0:
            xi, pairs, prob = ys, np.zeros((len(ys), npairs)), py
        else:
            zs = np.array(list(itertools.product((-1.0, 1.0), repeat=npairs)))
            xi = np.repeat(ys, len(zs), axis=0)
            pairs = np.tile(zs, (len(ys), 1))
            prob = np.repeat(py, len(zs)) / 2.0**npairs
    else:
        raise ConfigurationError(f"scheme order must be 1 or 2, got {order}")
    for a in (xi, pairs, prob):
        a.setflags(write=False)
    return OutcomeTable(order, m, bool(v_free), xi, pairs, prob)


def enumerate_outcomes(order: int, m: int, v_free: bool = False):
    """List of ``(increment, probability)`` over every one-step outcome."""
    return list(outcome_table(order, m, v_free).increments())


# --------------------------------------------------------------------------
# Control-variate terms


@dataclass(frozen=True, order=True)
class CvTermId:
    """One product factor of the control variate.

    ``hermite[r]`` is the Hermite degree applied to ``xi[r]`` (0 means the
    coordinate is absent, i.e. ``r`` not in ``U1``); ``pairs[p]`` is 1 when the
    ``p``-th upper-triangular entry of ``V`` is in ``U2``.  For order 1 the
    degrees are 0/1 and ``s`` lists the (1-based) coordinates present.
    """

    order: int
    hermite: tuple[int, ...]
    pairs: tuple[int, ...] = ()

    @property
    def s(self) -> tuple[int, ...]:
        return tuple(r + 1 for r, o in enumerate(self.hermite) if o)

    @property
    def r(self) -> int:
        return len(self.s)

    @property
    def U1(self) -> tuple[int, ...]:
        return self.s

    @property
    def o(self) -> tuple[int, ...]:
        return tuple(o for o in self.hermite if o)

    @property
    def U2(self) -> tuple[tuple[int, int], ...]:
        m = len(self.hermite)
        return tuple((k + 1, l + 1) for (k, l), on in zip(pair_index(m), self.pairs) if on)

    def label(self) -> str:
        parts = [f"H{o}(x{r + 1})" for r, o in enumerate(self.hermite) if o]
        parts += [f"V{k}{l}" for k, l in self.U2]
        return "*".join(parts)


@lru_cache(maxsize=64)
def cv_terms(order: int, m: int, v_free: bool = False) -> tuple[CvTermId, ...]:
    """All non-constant factors in canonical (lexicographic) order."""
    if m < 1:
        raise ConfigurationError("noise dimension m must be >= 1")
    if order == 1:
        return tuple(CvTermId(1, h, ()) for h in itertools.product((0, 1), repeat=m) if any(h))
    if order != 2:
        raise ConfigurationError(f"scheme order must be 1 or 2, got {order}")
    npairs = 0 if v_free else n_pairs(m)
    out = []
    for h in itertools.product((0, 1, 2), repeat=m):
        for p in itertools.product((0, 1), repeat=npairs):
            if any(h) or any(p):
                out.append(CvTermId(2, h, p if npairs else (0,) * n_pairs(m)))
    return tuple(out)


def factor_matrix(terms, xi: np.ndarray, pairs: np.ndarray | None = None) -> np.ndarray:
    """Factor values for many increments: ``(..., m)`` decoded ``xi`` -> ``(..., len(terms))``."""
    xi = np.asarray(xi, dtype=float)
    m = xi.shape[-1]
    H = np.stack([np.ones_like(xi), xi, (xi * xi - 1.0) / math.sqrt(2.0)], axis=-1)
    degrees = np.array([t.hermite for t in terms], dtype=np.int64).reshape(len(terms), m)
    out = np.ones(xi.shape[:-1] + (len(terms),))
    for r in range(m):
        out *= H[..., r, :][..., degrees[:, r]]
    if terms and any(any(t.pairs) for t in terms):
        pairs = np.asarray(pairs, dtype=float)
        sel = np.array([t.pairs for t in terms], dtype=bool)
        for p in range(sel.shape[1]):
            use = sel[:, p]
            out[..., use] *= pairs[..., p : p + 1]
    return out


def term_factor(term: CvTermId, increment) -> float:
    """Value of a single factor at one increment."""
    if term.order != increment.order:
        raise ContractViolation(f"term of order {term.order} applied to order-{increment.order} increment")
    if len(term.hermite) != increment.xi.shape[0]:
        raise ContractViolation("term and increment disagree on m")
    pairs = increment.pairs if increment.order == 2 else None
    return float(factor_matrix([term], increment.xi, pairs)[0])


@lru_cache(maxsize=64)
def outcome_factors(order: int, m: int, v_free: bool = False) -> np.ndarray:
    """Factor values at every enumerated outcome, shape ``(K, n_terms)``."""
    table = outcome_table(order, m, v_free)
    F = factor_matrix(cv_terms(order, m, v_free), table.xi, table.pairs)
    F.setflags(write=False)
    return F
