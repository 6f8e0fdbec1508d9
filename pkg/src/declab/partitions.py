"""Unordered partitions of {1..R} into cells of equal size M.

Counting, canonical enumeration, transversal families, uniform sampling, and
exact or sampled averages of sum_j |sum_{i in P_j} a_i|^p over a family.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

ENUM_LIMIT = 10**7
_DRAW_CHUNK = 256


@dataclass(frozen=True)
class EqualPartition:
    R: int
    M: int
    cells: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = sorted(i for c in self.cells for i in c)
        if flat != list(range(1, self.R + 1)):
            raise ValueError("cells must partition {1..R}")
        if any(len(c) != self.M for c in self.cells):
            raise ValueError("all cells must have size M")

    @classmethod
    def canonical(cls, R, M, cells) -> EqualPartition:
        cs = sorted(tuple(sorted(c)) for c in cells)
        return cls(R, M, tuple(cs))

    def __str__(self):
        return "|".join("".join(map(str, c)) if self.R < 10 else ",".join(map(str, c))
                        for c in self.cells)


@dataclass(frozen=True)
class TransversalSpec:
    """M groups of size R/M; every cell takes one element from each group."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        gs = tuple(tuple(sorted(g)) for g in self.groups)
        object.__setattr__(self, "groups", gs)
        sizes = {len(g) for g in gs}
        if len(sizes) != 1:
            raise ValueError("groups must have equal sizes")
        flat = sorted(i for g in gs for i in g)
        if flat != list(range(1, len(flat) + 1)):
            raise ValueError("groups must partition {1..R}")

    @property
    def M(self) -> int:
        return len(self.groups)

    @property
    def R(self) -> int:
        return sum(len(g) for g in self.groups)

    @classmethod
    def blocks(cls, R: int, M: int) -> TransversalSpec:
        """Groups of consecutive indices."""
        K = _check(R, M)
        return cls(tuple(tuple(range(k * K + 1, (k + 1) * K + 1)) for k in range(M)))

    def family_size(self) -> int:
        return math.factorial(self.R // self.M) ** (self.M - 1)


@dataclass(frozen=True)
class Sampled:
    seed: int
    count: int


def _check(R: int, M: int) -> int:
    if R < 1 or M < 1 or R % M:
        raise ValueError(f"M={M} must divide R={R}")
    return R // M


def count_partitions(R: int, M: int) -> int:
    """(1/(R/M)!) * C(R, M) C(R-M, M) ... C(M, M)."""
    K = _check(R, M)
    prod = 1
    for k in range(K):
        prod *= math.comb(R - k * M, M)
    return prod // math.factorial(K)


def count_cohabiting(R: int, M: int) -> int:
    """Partitions that put two fixed indices in the same cell.

    Pick the other R/M - 1 cells from the remaining R - 2 indices; the
    leftover M - 2 indices join the fixed pair.
    """
    K = _check(R, M)
    if M < 2:
        raise ValueError("cohabiting needs M >= 2")
    prod = 1
    for k in range(K - 1):
        prod *= math.comb(R - 2 - k * M, M)
    return prod // math.factorial(K - 1)


def _enum(pool: tuple[int, ...], M: int):
    if not pool:
        yield ()
        return
    first, rest = pool[0], pool[1:]
    for mates in itertools.combinations(rest, M - 1):
        cell = (first,) + mates
        taken = set(mates)
        remaining = tuple(i for i in rest if i not in taken)
        for tail in _enum(remaining, M):
            yield (cell,) + tail


def enumerate_partitions(R: int, M: int, limit: int = ENUM_LIMIT) -> Iterator[EqualPartition]:
    """Every partition once, in canonical lexicographic order."""
    n = count_partitions(R, M)
    if n > limit:
        raise ValueError(f"{n} partitions exceed the enumeration limit {limit}")
    for cells in _enum(tuple(range(1, R + 1)), M):
        yield EqualPartition(R, M, cells)


def enumerate_transversal(spec: TransversalSpec, limit: int = ENUM_LIMIT) -> Iterator[EqualPartition]:
    n = spec.family_size()
    if n > limit:
        raise ValueError(f"{n} transversal partitions exceed the enumeration limit {limit}")
    head, others = spec.groups[0], spec.groups[1:]
    for perms in itertools.product(*(itertools.permutations(g) for g in others)):
        cells = [(h,) + tuple(p[j] for p in perms) for j, h in enumerate(head)]
        yield EqualPartition.canonical(spec.R, spec.M, cells)


def sample_partition(R: int, M: int, rng: np.random.Generator) -> EqualPartition:
    """Uniform partition: the smallest free index takes M-1 uniform cellmates."""
    _check(R, M)
    pool = list(range(1, R + 1))
    cells = []
    while pool:
        first, rest = pool[0], pool[1:]
        pick = rng.choice(len(rest), M - 1, replace=False) if M > 1 else []
        mates = {rest[k] for k in pick}
        cells.append(tuple(sorted([first, *mates])))
        pool = [i for i in rest if i not in mates]
    return EqualPartition(R, M, tuple(cells))


def sample_transversal(spec: TransversalSpec, rng: np.random.Generator) -> EqualPartition:
    head, others = spec.groups[0], spec.groups[1:]
    perms = [[g[k] for k in rng.permutation(len(g))] for g in others]
    cells = [(h,) + tuple(p[j] for p in perms) for j, h in enumerate(head)]
    return EqualPartition.canonical(spec.R, spec.M, cells)


def draw_partitions(R: int, M: int, seed: int, count: int,
                    spec: TransversalSpec | None = None) -> Iterator[EqualPartition]:
    """Seeded draws; chunk c of 256 draws uses the stream (seed, c)."""
    from .quadrature import _seed_rng

    for c in range(-(-count // _DRAW_CHUNK)):
        rng = _seed_rng(seed, c)
        for _ in range(min(_DRAW_CHUNK, count - c * _DRAW_CHUNK)):
            yield sample_transversal(spec, rng) if spec else sample_partition(R, M, rng)


# --- weights --------------------------------------------------------------

def _gaussian(x) -> tuple[Fraction, Fraction]:
    if isinstance(x, tuple):
        return Fraction(x[0]), Fraction(x[1])
    if isinstance(x, (int, Fraction)):
        return Fraction(x), Fraction(0)
    z = complex(x)
    return Fraction(z.real), Fraction(z.imag)


class _Weights:
    """Exact Gaussian-rational view of a weight vector, scaled to integers."""

    def __init__(self, a: Sequence):
        g = [_gaussian(x) for x in a]
        self.R = len(g)
        den = 1
        for re, im in g:
            den = math.lcm(den, re.denominator, im.denominator)
        self.den = den
        self.re = [int(re * den) for re, _ in g]
        self.im = [int(im * den) for _, im in g]
        self.c = np.array([complex(float(re), float(im)) for re, im in g])

    def abs2_exact(self) -> list[Fraction]:
        return [Fraction(r * r + i * i, self.den**2) for r, i in zip(self.re, self.im)]

    def cell_power(self, cell, p, exact) -> Fraction | float:
        if exact:
            sr = sum(self.re[i - 1] for i in cell)
            si = sum(self.im[i - 1] for i in cell)
            return Fraction((sr * sr + si * si) ** (p // 2), self.den**p)
        return float(abs(self.c[[i - 1 for i in cell]].sum()) ** p)


def _is_even(p) -> bool:
    return float(p).is_integer() and int(p) % 2 == 0


@dataclass
class MomentReport:
    """Family average of sum_j |sum_{i in P_j} a_i|^p against a bound."""

    R: int
    M: int
    p: float
    family: str
    average: Fraction | float
    bound: Fraction | float | None
    ratio: Fraction | float | None
    family_size: int
    std_error: float = 0.0
    draws: int = 0
    seed: int | None = None

    @property
    def exact(self) -> bool:
        return isinstance(self.average, Fraction)

    def to_row(self) -> dict:
        def fmt(v):
            if isinstance(v, Fraction):
                return f"{v.numerator}/{v.denominator}"
            return v
        return {"R": self.R, "M": self.M, "p": self.p, "family": self.family,
                "average": fmt(self.average), "bound": fmt(self.bound), "ratio": fmt(self.ratio),
                "std_error": self.std_error, "draws": self.draws,
                "family_size": self.family_size, "seed": self.seed}


def avg_partition_moment(a: Sequence, M: int, p: float, family="all") -> MomentReport:
    """Average over a partition family of sum_j |sum_{i in P_j} a_i|^p.

    ``family`` is ``"all"``, a ``TransversalSpec`` or ``Sampled(seed, count)``.
    Enumerated families with even integer p give an exact ``Fraction``.
    """
    W = _Weights(a)
    R = W.R
    _check(R, M)
    if p < 1:
        raise ValueError("p must be >= 1")
    if isinstance(family, Sampled):
        values = []
        cache: dict = {}
        for P in draw_partitions(R, M, family.seed, family.count):
            values.append(_partition_value(W, P, p, False, cache))
        v = np.array(values)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        return MomentReport(R, M, float(p), "sampled", float(v.mean()), None, None,
                            count_partitions(R, M), se, len(v), family.seed)
    if isinstance(family, TransversalSpec):
        if family.R != R or family.M != M:
            raise ValueError("transversal spec does not match (R, M)")
        parts, size, label = enumerate_transversal(family), family.family_size(), "transversal"
    elif family == "all":
        parts, size, label = enumerate_partitions(R, M), count_partitions(R, M), "all"
    else:
        raise ValueError(f"unknown family {family!r}")
    exact = _is_even(p)
    cache = {}
    total = Fraction(0) if exact else 0.0
    n = 0
    for P in parts:
        total += _partition_value(W, P, p, exact, cache)
        n += 1
    avg = total / n
    return MomentReport(R, M, float(p), label, avg, None, None, size, 0.0, n)


def _partition_value(W, P, p, exact, cache):
    val = Fraction(0) if exact else 0.0
    for cell in P.cells:
        v = cache.get(cell)
        if v is None:
            v = cache[cell] = W.cell_power(cell, p, exact)
        val += v
    return val


def _with_bound(rep: MomentReport, bound) -> MomentReport:
    rep.bound = bound
    if isinstance(rep.average, Fraction) and isinstance(bound, Fraction):
        rep.ratio = rep.average / bound if bound else None
    else:
        rep.ratio = float(rep.average) / float(bound) if bound else None
    return rep


def l2_identity_check(a: Sequence, M: int) -> tuple[bool, Fraction, Fraction]:
    """Exact check of avg = (R-M)/(R-1) sum|a|^2 + (M-1)/(R-1) |sum a|^2."""
    W = _Weights(a)
    R = W.R
    _check(R, M)
    lhs = avg_partition_moment(a, M, 2).average
    if R == 1:
        rhs = sum(W.abs2_exact())
    else:
        sr, si = sum(W.re), sum(W.im)
        S2 = Fraction(sr * sr + si * si, W.den**2)
        rhs = Fraction(R - M, R - 1) * sum(W.abs2_exact()) + Fraction(M - 1, R - 1) * S2
    return lhs == rhs, lhs, rhs


def _abs(a):
    return np.abs(_Weights(a).c)


def l4_bound(a: Sequence, M: int) -> float:
    """(M/R)^3 |sum a|^4 + (M/R)^2 sum|a|^2 |sum a|^2 + (M/R) sum|a|^3 sum|a| + sum|a|^4."""
    c = _Weights(a).c
    R = len(c)
    q = M / R
    S = abs(c.sum())
    m = np.abs(c)
    return float(q**3 * S**4 + q**2 * (m**2).sum() * S**2 + q * (m**3).sum() * m.sum()
                 + (m**4).sum())


def l4_bound_check(a: Sequence, M: int, family="all") -> MomentReport:
    return _with_bound(avg_partition_moment(a, M, 4, family), l4_bound(a, M))


def elp_bound(a: Sequence, M: int, p: float) -> float:
    """(M/R)^(p/2-1) L^(p/2) + L + (M/R)^(p/2) S^p with L = sum|a|, S = |sum a|."""
    c = _Weights(a).c
    q = M / len(c)
    L = float(np.abs(c).sum())
    S = float(abs(c.sum()))
    return q ** (p / 2 - 1) * L ** (p / 2) + L + q ** (p / 2) * S**p


def elp_bound_check(a: Sequence, M: int, p: float, family="all") -> MomentReport:
    if not 2 <= p <= 4:
        raise ValueError("p must lie in [2, 4]")
    if np.any(_abs(a) > 1 + 1e-12):
        raise ValueError("weights must satisfy |a_i| <= 1")
    return _with_bound(avg_partition_moment(a, M, p, family), elp_bound(a, M, p))


@lru_cache(maxsize=None)
def divisor_pairs(R_max: int) -> tuple[tuple[int, int], ...]:
    """All (R, M) with M | R and R <= R_max."""
    return tuple((R, M) for R in range(1, R_max + 1) for M in range(1, R + 1) if R % M == 0)
