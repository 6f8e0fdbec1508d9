"""Bush of tubes through the origin: incidence counts and L^r norms of tube sums.

Each tube is a capsule: the points within ``radius`` of the axis segment
{t u : |t| <= length / 2}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .expsum import NormEstimate
from .freqsets import CapGrid
from .quadrature import EvaluationDomain, SamplingPlan, integrate


@dataclass(frozen=True)
class Tube:
    direction: tuple[float, float, float]
    length: float
    radius: float

    def __post_init__(self):
        if abs(math.hypot(*self.direction) - 1) > 1e-12:
            raise ValueError("tube direction must be a unit vector")
        if not self.radius < self.length:
            raise ValueError("tube radius must be smaller than its length")


@dataclass(frozen=True, eq=False)
class TubeFamily:
    directions: np.ndarray
    R: float
    delta: float
    length: float
    radius: float

    def __len__(self):
        return len(self.directions)

    def __getitem__(self, i) -> Tube:
        return Tube(tuple(float(v) for v in self.directions[i]), self.length, self.radius)

    def subset(self, index) -> TubeFamily:
        return TubeFamily(self.directions[np.asarray(index)], self.R, self.delta, self.length,
                          self.radius)

    def tube_volume(self) -> float:
        return math.pi * self.radius**2 * self.length + 4 / 3 * math.pi * self.radius**3

    def total_mass(self) -> float:
        """Closed form of the integral of sum 1_T over B(0, R)."""
        if self.length / 2 + self.radius > self.R * (1 + 1e-12):
            raise ValueError("tubes stick out of B(0, R); no closed form")
        return len(self) * self.tube_volume()

    def to_json(self) -> dict:
        return {"R": self.R, "delta": self.delta,
                "tubes": [{"direction": [float(v) for v in u], "length": self.length,
                           "radius": self.radius} for u in self.directions]}


def make_bush(grid: CapGrid, delta: float = 0.0) -> TubeFamily:
    """One tube per cap, along the unit normal-flow direction (-2c, 1)."""
    if grid.base_dim != 2:
        raise ValueError("make_bush needs a two-dimensional cap grid")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    c = grid.centers
    v = np.column_stack([-2 * c, np.ones(len(c))])
    u = v / np.sqrt((v**2).sum(axis=1))[:, None]
    u.setflags(write=False)
    R = grid.R
    return TubeFamily(u, R, float(delta), R, R ** (0.5 + delta))


def _segment_dist2(U: np.ndarray, half: float, X: np.ndarray) -> np.ndarray:
    t = np.clip(X @ U.T, -half, half)
    return (X**2).sum(axis=1)[:, None] - 2 * t * (X @ U.T) + t**2


def incidence_count(family: TubeFamily, x) -> int:
    """L(x): number of tubes containing x (brute force over all tubes)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    d2 = _segment_dist2(family.directions, family.length / 2, x)
    return int((d2 <= family.radius**2).sum())


def incidence_counts(family: TubeFamily, X: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Vectorized L(x) over the rows of X.

    For |x| <= length/2 the segment and line distances coincide, so tubes are
    counted with a ball query on the unit sphere of directions (both x/|x|
    and -x/|x|); points past the segment ends fall back to brute force.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    U = family.directions
    half, rho = family.length / 2, family.radius
    r = np.sqrt((X**2).sum(axis=1))
    out = np.zeros(len(X), dtype=np.int64)
    core = r <= rho
    out[core] = len(U)
    mid = (~core) & (r <= half)
    if mid.any():
        if tree is None:
            tree = cKDTree(U)
        xm, rm = X[mid], r[mid]
        xhat = xm / rm[:, None]
        chord = 2 * np.sin(np.arcsin(rho / rm) / 2)
        out[mid] = (tree.query_ball_point(xhat, chord, return_length=True)
                    + tree.query_ball_point(-xhat, chord, return_length=True))
    far = (~core) & (r > half) & (r <= half + rho)
    if far.any():
        idx = np.flatnonzero(far)
        step = max(1, (1 << 20) // len(U))
        for a in range(0, len(idx), step):
            blk = idx[a:a + step]
            out[blk] = (_segment_dist2(U, half, X[blk]) <= rho**2).sum(axis=1)
    return out


def _default_plan():
    return SamplingPlan(count=10**6, stratification="radial")


def tube_integrals(family: TubeFamily, powers, plan: SamplingPlan | None = None,
                   threads: int = 1):
    """Shared-sample averages of L^r over B(0, R) for every r in ``powers``."""
    plan = plan or _default_plan()
    tree = cKDTree(family.directions)
    powers = np.asarray(powers, dtype=np.float64)

    def f(X):
        L = incidence_counts(family, X, tree).astype(np.float64)
        return L[:, None] ** powers[None, :]

    return integrate(f, EvaluationDomain.ball(family.R), 3, plan, len(powers), threads)


def tube_lr_norm(family: TubeFamily, r: float, plan: SamplingPlan | None = None,
                 threads: int = 1) -> NormEstimate:
    """Estimate of ||sum 1_T||_{L^r(B(0,R))}; see ``NormEstimate.norm``."""
    if r < 1:
        raise ValueError("r must be >= 1")
    plan = plan or _default_plan()
    res = tube_integrals(family, [r], plan, threads)
    return NormEstimate(float(r), float(res.mean[0]), float(res.std_error[0]), res.count,
                        res.volume, plan.seed, plan.method)


@dataclass
class RhsProfile:
    """Both integrals bounding the averaged l^p decoupling, and the predicted ceiling."""

    R: float
    M: float
    p: float
    int_L_half: float
    int_L_half_se: float
    weighted_int_L: float
    weighted_int_L_se: float
    predicted: float

    @property
    def measured(self) -> float:
        return self.int_L_half + self.weighted_int_L

    @property
    def ratio(self) -> float:
        return self.measured / self.predicted


def trelation_rhs_profile(family: TubeFamily, M: float, p: float,
                          plan: SamplingPlan | None = None, threads: int = 1) -> RhsProfile:
    """MC estimates of int L^(p/2) and (R/M)^(p/2-1) int L over B(0, R)."""
    R = family.R
    if not 2 <= p <= 4:
        raise ValueError("p must lie in [2, 4]")
    if not 1 <= M <= R:
        raise ValueError("M must lie in [1, R]")
    res = tube_integrals(family, [p / 2, 1.0], plan, threads)
    vol = res.volume
    factor = (R / M) ** (p / 2 - 1)
    se = res.std_error
    predicted = R ** ((3 + p) / 2) + R**3 * factor
    return RhsProfile(R, M, p, res.mean[0] * vol, se[0] * vol, factor * res.mean[1] * vol,
                      factor * se[1] * vol, predicted)
