"""Partitions of the canonical cap grid into large ensembles, and decoupling ratios.

The extension of a cap-constant function is modelled by one frequency per
cap, S(x) = sum_q a_q e((c_q, |c_q|^2) . x); sub-sums over ensembles share
the same sample points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .expsum import as_weights, fit_exponent, interference_mass, phasors, ExponentFit
from .freqsets import CapGrid, FrequencySet, canonical_caps, lift_paraboloid
from .partitions import sample_partition
from .quadrature import (EvaluationDomain, SamplingPlan, _seed_rng, check_nyquist, integrate)
from .tubes import make_bush

# above this many sub-sums the covariance is obtained by a projected second pass
_FULL_COV_COLS = 64
_BLOCK_ENTRIES = 1 << 20


@dataclass(frozen=True, eq=False)
class EnsemblePartition:
    grid: CapGrid
    assignment: np.ndarray
    shape_label: str = ""

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.shape != (len(self.grid),):
            raise ValueError("one ensemble id per cap is required")
        ids = np.unique(a)
        if len(ids) == 0 or ids[0] != 1 or ids[-1] != len(ids):
            raise ValueError("ensemble ids must be contiguous from 1")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    @classmethod
    def from_labels(cls, grid: CapGrid, labels, shape_label="") -> EnsemblePartition:
        """Compact arbitrary labels to ids 1..N in order of first label value."""
        _, inv = np.unique(np.asarray(labels), return_inverse=True)
        return cls(grid, inv.ravel() + 1, shape_label)

    @property
    def ensemble_count(self) -> int:
        return int(self.assignment.max())

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment)[1:]

    def split(self, i: int) -> EnsemblePartition:
        """Refinement: ensemble i loses its second half to a new ensemble."""
        a = self.assignment.copy()
        m = self.members(i)
        if len(m) < 2:
            raise ValueError("cannot split a single-cap ensemble")
        a[m[len(m) // 2:]] = self.ensemble_count + 1
        return EnsemblePartition(self.grid, a, self.shape_label + "+split")


@dataclass(frozen=True, eq=False)
class TestField:
    weights: np.ndarray
    recipe: str

    __test__ = False

    @classmethod
    def constant(cls, grid: CapGrid, value: complex = 1.0) -> TestField:
        return cls(np.full(len(grid), value, dtype=np.complex128), "constant")

    @classmethod
    def random_phase(cls, grid: CapGrid, seed: int) -> TestField:
        th = _seed_rng(seed, 0).random(len(grid))
        return cls(np.exp(2j * np.pi * th), f"random-phase({seed})")

    @classmethod
    def indicator(cls, grid: CapGrid, subset) -> TestField:
        w = np.zeros(len(grid), dtype=np.complex128)
        w[np.asarray(subset, dtype=np.int64)] = 1.0
        return cls(w, "indicator")

    def scaled(self, s: complex) -> TestField:
        return TestField(self.weights * s, self.recipe + f"*{s}")


@dataclass
class DecouplingReport:
    R: float
    p: float
    variant: str
    lhs: float
    rhs: float
    ratio: float
    lhs_std_error: float
    rhs_std_error: float
    ratio_std_error: float
    ensemble_count: int
    shape: str = ""
    seed: int | None = None

    def to_row(self) -> dict:
        return {"shape": self.shape, "R": self.R, "p": self.p, "variant": self.variant,
                "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
                "lhs_std_error": self.lhs_std_error, "rhs_std_error": self.rhs_std_error,
                "ratio_std_error": self.ratio_std_error, "ensemble_count": self.ensemble_count,
                "seed": self.seed}


# --- builders -------------------------------------------------------------

def _need_plane(grid: CapGrid):
    if grid.base_dim != 2:
        raise ValueError("ensemble builders need a two-dimensional cap grid (d = 3)")


def build_strips(grid: CapGrid) -> EnsemblePartition:
    """Rows of caps: ensemble i holds the caps whose second coordinate index is i - 1."""
    _need_plane(grid)
    return EnsemblePartition(grid, grid.axis_index()[:, 1] + 1, "strips")


def build_circles(grid: CapGrid, center=(0.0, 0.0)) -> EnsemblePartition:
    """Rings of width 1/sqrt(R) around ``center``; empty rings are dropped."""
    _need_plane(grid)
    r = np.sqrt(((grid.centers - np.asarray(center, dtype=np.float64)) ** 2).sum(axis=1))
    return EnsemblePartition.from_labels(grid, np.floor(r * math.sqrt(grid.R)).astype(np.int64),
                                         "circles")


def build_spread(grid: CapGrid, seed: int = 0) -> EnsemblePartition:
    """Each ensemble takes exactly one cap from every R^(-1/4) square.

    Within each square the caps are dealt to the sqrt(R) ensembles by a
    seeded permutation, one stream per square.
    """
    _need_plane(grid)
    m = int(round(grid.R ** 0.25))
    if m**4 != grid.R:
        raise ValueError("build_spread needs R^(1/4) to be an integer")
    n = grid.per_axis
    ij = grid.axis_index()
    block = (ij[:, 1] // m) * m + ij[:, 0] // m
    local = (ij[:, 1] % m) * m + ij[:, 0] % m
    a = np.empty(len(grid), dtype=np.int64)
    for b in range(n):
        perm = _seed_rng(seed, b).permutation(n)
        sel = block == b
        a[sel] = perm[local[sel]] + 1
    return EnsemblePartition(grid, a, "spread")


def build_random_msets(grid: CapGrid, M: int, seed: int) -> EnsemblePartition:
    """Uniform random partition of the caps into M-sets."""
    if M < 1 or len(grid) % M:
        raise ValueError(f"M={M} must divide the cap count {len(grid)}")
    P = sample_partition(len(grid), M, _seed_rng(seed, 0))
    a = np.empty(len(grid), dtype=np.int64)
    for k, cell in enumerate(P.cells):
        a[np.asarray(cell) - 1] = k + 1
    return EnsemblePartition(grid, a, f"msets({M})")


def check_geometry_condition(ep: EnsemblePartition) -> float:
    """max over aligned dyadic squares Q of #(ensembles meeting Q) / (L N)."""
    _need_plane(ep.grid)
    n = ep.grid.per_axis
    ij = ep.grid.axis_index()
    N = ep.ensemble_count
    worst = 0.0
    b = 1
    while b <= n:
        L = b * ep.grid.spacing
        nb = -(-n // b)
        q = (ij[:, 1] // b) * nb + ij[:, 0] // b
        pairs = np.unique(q * (N + 1) + ep.assignment)
        meet = np.bincount(pairs // (N + 1), minlength=nb * nb)
        worst = max(worst, float(meet.max()) / (L * N))
        if b == n:
            break
        b = min(2 * b, n)
    return worst


# --- ratios ---------------------------------------------------------------

def integer_lift(grid: CapGrid) -> FrequencySet:
    """(k, |k|^2) for the integer cap coordinates k; distinct integer frequencies
    make sub-sums exactly orthogonal on the unit torus."""
    k = grid.axis_index().astype(np.float64)
    return FrequencySet.build(np.column_stack([k, (k**2).sum(axis=1)]), "integer-lift")


class _Pieces:
    """|sum over all|^p and |sum over group g|^p for every group, from shared samples."""

    def __init__(self, fset, w, labels, n_groups, p):
        order = np.argsort(labels, kind="stable")
        keep = order[labels[order] >= 0]
        self.pts = fset.points[keep]
        self.w = w[keep]
        lab = labels[keep]
        self.starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
        if len(np.unique(lab)) != n_groups:
            raise ValueError("every group needs at least one frequency")
        self.n_groups, self.p = n_groups, p

    def columns(self, X):
        step = max(1, _BLOCK_ENTRIES // max(1, len(self.pts)))
        out = np.empty((len(X), self.n_groups + 1))
        for a in range(0, len(X), step):
            E = phasors(self.pts, X[a:a + step]) * self.w
            G = np.add.reduceat(E, self.starts, axis=1)
            out[a:a + step, 0] = np.abs(G.sum(axis=1)) ** self.p
            out[a:a + step, 1:] = np.abs(G) ** self.p
        return out


def _piece_moments(fset, w, labels, n_groups, p, domain, plan, threads, grad_fn):
    """Means of the piece moments and the variance of a log-ratio estimator.

    ``grad_fn(mean) -> g`` gives the gradient of the log ratio with respect
    to the mean vector; the variance is g' Cov g.
    """
    pc = _Pieces(fset, w, labels, n_groups, p)
    ncols = n_groups + 1
    check_nyquist(domain, plan, fset.max_norm(), p)
    if plan.method == "grid" or ncols <= _FULL_COV_COLS:
        res = integrate(pc.columns, domain, fset.dim, plan, ncols, threads)
        g = grad_fn(res.mean)
        return res, float(g @ res.cov @ g), res.cov
    first = integrate(pc.columns, domain, fset.dim, plan, ncols, threads, cov="diag")
    g = grad_fn(first.mean)

    def proj(X):
        F = pc.columns(X)
        return np.column_stack([F[:, 0], F[:, 1:] @ g[1:]])

    second = integrate(proj, domain, fset.dim, plan, 2, threads)
    h = np.array([g[0], 1.0])
    return first, float(h @ second.cov @ h), None


def _weights_and_set(grid, field, fset):
    fset = fset if fset is not None else lift_paraboloid(grid)
    if len(fset) != len(grid):
        raise ValueError("frequency set must carry one frequency per cap")
    return fset, as_weights(fset, field.weights)


def decoupling_ratio(ep: EnsemblePartition, field: TestField, p: float, variant: str = "l2",
                     domain: EvaluationDomain | None = None, plan: SamplingPlan | None = None,
                     threads: int = 1, fset: FrequencySet | None = None) -> DecouplingReport:
    """||S||_p over the l2 (or normalised lp) aggregate of the ensemble sub-sums.

    l2: rhs = (sum_i ||S_i||_p^2)^(1/2).
    lp: rhs = N^(1/2 - 1/p) (sum_i ||S_i||_p^p)^(1/p), N the ensemble count.
    """
    if variant not in ("l2", "lp"):
        raise ValueError(f"unknown variant {variant!r}")
    if p < 1:
        raise ValueError("p must be >= 1")
    domain = domain or EvaluationDomain.ball(ep.grid.R)
    plan = plan or SamplingPlan()
    fset, w = _weights_and_set(ep.grid, field, fset)
    if not np.any(w):
        raise ValueError("zero right-hand side: all weights vanish")
    N = ep.ensemble_count

    def grad(m):
        g = np.zeros_like(m)
        g[0] = 1 / (p * m[0])
        mi = m[1:]
        if variant == "l2":
            t = mi ** (2 / p)
            g[1:] = -(t / np.where(mi > 0, mi, 1)) / (p * t.sum())
        else:
            g[1:] = -1 / (p * mi.sum())
        return g

    res, var_log, _ = _piece_moments(fset, w, ep.assignment - 1, N, p, domain, plan, threads, grad)
    V = res.volume
    m = res.mean
    se = res.std_error
    lhs = (V * m[0]) ** (1 / p)
    if variant == "l2":
        rhs = math.sqrt(float(((V * m[1:]) ** (2 / p)).sum()))
        t = (V * m[1:]) ** (2 / p)
        # marginal errors only; the ratio error below uses the full covariance
        rhs_se = float(np.sqrt(((t / (p * np.where(m[1:] > 0, m[1:], 1)) * se[1:]) ** 2).sum())) / rhs
    else:
        tot = float(m[1:].sum())
        rhs = N ** (0.5 - 1 / p) * (V * tot) ** (1 / p)
        rhs_se = rhs * float(np.sqrt((se[1:] ** 2).sum())) / (p * tot)
    if not rhs > 0:
        raise ValueError("zero right-hand side")
    ratio = lhs / rhs
    return DecouplingReport(ep.grid.R, float(p), variant, lhs, rhs, ratio,
                            lhs * float(se[0]) / (p * m[0]) if m[0] > 0 else 0.0, rhs_se,
                            ratio * math.sqrt(max(var_log, 0.0)), N, ep.shape_label,
                            plan.seed if plan.method != "grid" else None)


def coarse_square_labels(grid: CapGrid, K: int) -> np.ndarray:
    """Index of the 1/K square containing each cap center."""
    _need_plane(grid)
    k = np.minimum(np.floor(grid.centers * K).astype(np.int64), K - 1)
    return k[:, 1] * K + k[:, 0]


def recoupling_ratio(grid: CapGrid, K: int, field: TestField, p: float, ball_radius: float,
                     plan: SamplingPlan | None = None, squares=None, threads: int = 1,
                     fset: FrequencySet | None = None,
                     domain: EvaluationDomain | None = None) -> DecouplingReport:
    """(sum_a ||S_a||_p^p)^(1/p) / ||S||_p for the sub-sums over 1/K squares.

    ``squares`` lists the occupied squares as (column, row) pairs; by default
    every square holding a cap with nonzero weight. ``domain`` overrides the
    ball B(0, ball_radius).
    """
    if not 1 <= K <= math.sqrt(grid.R) + 1e-9:
        raise ValueError("K must lie in [1, sqrt(R)]")
    if domain is None:
        if ball_radius < K:
            raise ValueError("ball radius must be at least K")
        domain = EvaluationDomain.ball(ball_radius)
    plan = plan or SamplingPlan()
    fset, w = _weights_and_set(grid, field, fset)
    sq = coarse_square_labels(grid, K)
    if squares is None:
        chosen = np.unique(sq[w != 0])
    else:
        chosen = np.array([int(b) * K + int(a) for a, b in squares], dtype=np.int64)
        if len(np.unique(chosen)) != len(chosen):
            raise ValueError("squares overlap")
        if np.any((chosen < 0) | (chosen >= K * K)):
            raise ValueError("square index out of range")
    lookup = {int(s): i for i, s in enumerate(np.sort(chosen))}
    labels = np.array([lookup.get(int(s), -1) for s in sq], dtype=np.int64)
    n = len(lookup)

    def grad(m):
        g = np.zeros_like(m)
        g[0] = -1 / (p * m[0])
        g[1:] = 1 / (p * m[1:].sum())
        return g

    res, var_log, _ = _piece_moments(fset, w, labels, n, p, domain, plan, threads, grad)
    V, m, se = res.volume, res.mean, res.std_error
    if not m[0] > 0:
        raise ValueError("zero right-hand side")
    tot = float(m[1:].sum())
    lhs = (V * tot) ** (1 / p)
    rhs = (V * m[0]) ** (1 / p)
    ratio = lhs / rhs
    return DecouplingReport(grid.R, float(p), "recoupling", lhs, rhs, ratio,
                            lhs * float(np.sqrt((se[1:] ** 2).sum())) / (p * tot),
                            rhs * float(se[0]) / (p * m[0]), ratio * math.sqrt(max(var_log, 0.0)),
                            n, f"squares(1/{K})", plan.seed if plan.method != "grid" else None)


# --- flat strips ----------------------------------------------------------

@dataclass
class StripScan:
    """Growth exponents of the strip decoupling inequality for a = 1.

    ``lhs_fit``: |S| near the origin (lower bound via interference_mass);
    ``mass_fit``: L^1 tube mass of one strip; ``count_fit``: strip count.
    ``p_star`` solves p a_L = p c / 2 + b.
    """

    lhs_fit: ExponentFit
    mass_fit: ExponentFit
    count_fit: ExponentFit
    p_star: float
    rows: list[dict] = field(default_factory=list)
    table: list[dict] = field(default_factory=list)


def strip_sharpness_scan(R_list=(64, 128, 256, 512, 1024), p_list=(2.0, 2.5, 3.0, 3.5, 4.0),
                         delta: float = 0.0) -> StripScan:
    if any(not 2 <= p <= 4 for p in p_list):
        raise ValueError("p values must lie in [2, 4]")
    rows = []
    for R in R_list:
        grid = canonical_caps(R, 3)
        fset = lift_paraboloid(grid)
        lhs = interference_mass(fset) * len(fset)
        strips = build_strips(grid)
        bush = make_bush(grid, delta)
        masses = [bush.subset(strips.members(i)).total_mass()
                  for i in range(1, strips.ensemble_count + 1)]
        rows.append({"R": R, "lhs": lhs, "strip_mass": float(np.mean(masses)),
                     "strip_count": strips.ensemble_count})
    Rs = [r["R"] for r in rows]
    lf = fit_exponent(Rs, [r["lhs"] for r in rows])
    mf = fit_exponent(Rs, [r["strip_mass"] for r in rows])
    cf = fit_exponent(Rs, [r["strip_count"] for r in rows])
    a, b, c = lf.slope, mf.slope, cf.slope
    denom = a - c / 2
    p_star = b / denom if denom > 0 else math.inf
    table = [{"p": p, "lhs_exponent": p * a, "rhs_exponent": p * c / 2 + b,
              "margin": p * a - (p * c / 2 + b)} for p in p_list]
    return StripScan(lf, mf, cf, p_star, rows, table)
