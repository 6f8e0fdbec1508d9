"""Domains, sampling plans and the chunked stratified integrator.

Sample streams are keyed by ``(seed, chunk_index)`` with a fixed chunk size,
and chunk partial sums are reduced in chunk order, so results do not depend
on the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

CHUNK = 8192
MIN_MC_COUNT = 1000


class NyquistError(ValueError):
    """Grid spacing too coarse for the requested moment."""


@dataclass(frozen=True)
class EvaluationDomain:
    """``ball`` of radius, ``box`` of side (centred), or ``torus`` [0, side)^d."""

    kind: str
    radius_or_side: float
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("ball", "box", "torus"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if not self.radius_or_side > 0:
            raise ValueError("radius_or_side must be positive")

    @classmethod
    def ball(cls, radius, center=None):
        return cls("ball", float(radius), center)

    @classmethod
    def box(cls, side, center=None):
        return cls("box", float(side), center)

    @classmethod
    def torus(cls, side=1.0):
        return cls("torus", float(side))

    def center_vec(self, dim: int) -> np.ndarray:
        if self.center is None:
            return np.zeros(dim)
        c = np.asarray(self.center, dtype=np.float64)
        if c.shape != (dim,):
            raise ValueError(f"center has dimension {c.shape}, expected {dim}")
        return c

    def lower(self, dim: int) -> np.ndarray:
        """Lower corner of the bounding box."""
        if self.kind == "torus":
            return np.zeros(dim)
        half = self.radius_or_side if self.kind == "ball" else self.radius_or_side / 2
        return self.center_vec(dim) - half

    def box_side(self) -> float:
        return 2 * self.radius_or_side if self.kind == "ball" else self.radius_or_side

    def volume(self, dim: int) -> float:
        if self.kind == "ball":
            return ball_volume(dim, self.radius_or_side)
        return self.radius_or_side**dim


def ball_volume(dim: int, radius: float) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * radius**dim


@dataclass(frozen=True)
class SamplingPlan:
    """Quadrature recipe.

    ``grid``: composite midpoint rule with at most ``spacing`` per axis.
    ``monte-carlo``: ``count`` stratified uniform samples. ``stratification``
    is ``radial`` (log-spaced shells, balls only), ``box`` (``strata`` cells
    per axis of the bounding box) or ``none``.
    """

    method: str = "monte-carlo"
    count: int = 10**6
    spacing: float | None = None
    seed: int = 0
    stratification: str = "auto"
    strata: int | None = None

    def __post_init__(self):
        if self.method not in ("grid", "monte-carlo"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "grid":
            if self.spacing is None or not self.spacing > 0:
                raise ValueError("grid plans need a positive spacing")
        else:
            if self.count < MIN_MC_COUNT:
                raise ValueError(f"monte-carlo count must be >= {MIN_MC_COUNT}")
            if self.stratification not in ("auto", "radial", "box", "none"):
                raise ValueError(f"unknown stratification {self.stratification!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @classmethod
    def grid(cls, spacing):
        return cls(method="grid", spacing=float(spacing))

    @classmethod
    def mc(cls, count=10**6, seed=0, stratification="auto", strata=None):
        return cls(count=int(count), seed=int(seed), stratification=stratification, strata=strata)


@dataclass
class Integral:
    """Domain average of a vector integrand with estimator covariance."""

    mean: np.ndarray
    cov: np.ndarray
    count: int
    volume: float

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))


def grid_points_per_axis(domain: EvaluationDomain, spacing: float) -> int:
    return max(1, math.ceil(domain.box_side() / spacing - 1e-9))


def check_nyquist(domain: EvaluationDomain, plan: SamplingPlan, max_freq: float, p: float):
    """Refuse grid plans coarser than 1 / (2 p max|xi|)."""
    if plan.method != "grid" or max_freq == 0:
        return
    G = grid_points_per_axis(domain, plan.spacing)
    h = domain.box_side() / G
    limit = 1.0 / (2 * p * max_freq)
    if h > limit * (1 + 1e-12):
        raise NyquistError(f"grid spacing {h:.4g} exceeds alias limit {limit:.4g}")


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for the sub-task ``keys`` of a run."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def _seed_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, chunk])))


class _Strata:
    """Equal allocation: global sample i belongs to stratum i mod S."""

    def __init__(self, domain: EvaluationDomain, dim: int, plan: SamplingPlan):
        self.domain, self.dim = domain, dim
        mode = plan.stratification
        if mode == "auto":
            mode = "radial" if domain.kind == "ball" else "box"
        if mode == "radial" and domain.kind != "ball":
            raise ValueError("radial stratification needs a ball domain")
        self.mode = mode
        R = domain.radius_or_side
        if mode == "radial":
            K = plan.strata or max(1, math.ceil(math.log2(max(R, 1.0))) + 2)
            edges = np.concatenate([[0.0], R * 2.0 ** (np.arange(1, K + 1) - K)])
            self.edges_pow = edges**dim
            self.S = K
            self.volumes = np.diff(self.edges_pow) * ball_volume(dim, 1.0)
        elif mode == "box":
            k = plan.strata or max(1, int(round((256) ** (1 / dim))))
            self.k = k
            self.S = k**dim
            self.volumes = np.full(self.S, (domain.box_side() / k) ** dim)
        else:
            self.S = 1
            self.volumes = np.array([domain.volume(dim) if domain.kind == "ball"
                                     else domain.box_side() ** dim])
        if plan.count < 2 * self.S:
            raise ValueError(f"{plan.count} samples cannot fill {self.S} strata")
        self.center = domain.center_vec(dim) if domain.kind != "torus" else None
        self.lower = domain.lower(dim)

    def sample(self, strat: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n, d = len(strat), self.dim
        side = self.domain.box_side()
        if self.mode == "radial" or (self.mode == "none" and self.domain.kind == "ball"):
            if self.mode == "none":
                lo = np.zeros(n)
                hi = np.full(n, self.domain.radius_or_side**d)
            else:
                lo, hi = self.edges_pow[strat], self.edges_pow[strat + 1]
            r = (lo + rng.random(n) * (hi - lo)) ** (1.0 / d)
            g = rng.standard_normal((n, d))
            g /= np.sqrt((g * g).sum(axis=1))[:, None]
            return self.center + r[:, None] * g, np.ones(n, dtype=bool)
        if self.mode == "box":
            cell = np.stack(np.unravel_index(strat, (self.k,) * d), axis=1)
            X = self.lower + (cell + rng.random((n, d))) * (side / self.k)
        else:
            X = self.lower + rng.random((n, d)) * side
        if self.domain.kind == "ball":
            inside = ((X - self.center) ** 2).sum(axis=1) <= self.domain.radius_or_side**2
        else:
            inside = np.ones(n, dtype=bool)
        return X, inside


def integrate(func, domain: EvaluationDomain, dim: int, plan: SamplingPlan, ncols: int,
              threads: int = 1, cov: str = "full") -> Integral:
    """Average of ``func(X) -> (n, ncols)`` over ``domain``.

    Monte Carlo uses stratified uniform sampling; for balls sampled through
    the bounding box the integrand is zeroed outside the ball. ``cov="diag"``
    keeps only the variances, for integrands with many columns.
    """
    if cov not in ("full", "diag"):
        raise ValueError(f"unknown covariance mode {cov!r}")
    full = cov == "full"
    vol = domain.volume(dim)
    if plan.method == "grid":
        return _integrate_grid(func, domain, dim, plan, ncols, threads, vol)
    st = _Strata(domain, dim, plan)
    n_chunks = -(-plan.count // CHUNK)

    def work(c):
        a, b = c * CHUNK, min(plan.count, (c + 1) * CHUNK)
        idx = np.arange(a, b)
        strat = idx % st.S
        X, inside = st.sample(strat, _seed_rng(plan.seed, c))
        F = np.zeros((len(idx), ncols))
        if inside.any():
            F[inside] = func(X[inside])
        order = np.argsort(strat, kind="stable")
        s_sorted, F = strat[order], F[order]
        starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
        ids = s_sorted[starts]
        sums = np.add.reduceat(F, starts, axis=0)
        if full:
            outer = np.add.reduceat(F[:, :, None] * F[:, None, :], starts, axis=0)
        else:
            outer = np.add.reduceat(F * F, starts, axis=0)
        return ids, np.diff(np.r_[starts, len(idx)]), sums, outer

    S = st.S
    cnt = np.zeros(S)
    tot = np.zeros((S, ncols))
    tot2 = np.zeros((S, ncols, ncols) if full else (S, ncols))
    for ids, n, sums, outer in _ordered_map(work, range(n_chunks), threads):
        cnt[ids] += n
        tot[ids] += sums
        tot2[ids] += outer
    mean_s = tot / cnt[:, None]
    w = st.volumes / vol
    mean = (w[:, None] * mean_s).sum(axis=0)
    if full:
        cov_s = (tot2 - cnt[:, None, None] * mean_s[:, :, None] * mean_s[:, None, :]) / (cnt - 1)[:, None, None]
        cov = ((w**2 / cnt)[:, None, None] * cov_s).sum(axis=0)
    else:
        var_s = (tot2 - cnt[:, None] * mean_s**2) / (cnt - 1)[:, None]
        cov = np.diag(((w**2 / cnt)[:, None] * var_s).sum(axis=0))
    return Integral(mean, cov, plan.count, vol)


def _integrate_grid(func, domain, dim, plan, ncols, threads, vol):
    G = grid_points_per_axis(domain, plan.spacing)
    h = domain.box_side() / G
    total = G**dim
    lower = domain.lower(dim)
    center = domain.center_vec(dim) if domain.kind == "ball" else None
    n_chunks = -(-total // CHUNK)

    def work(c):
        idx = np.arange(c * CHUNK, min(total, (c + 1) * CHUNK))
        cell = np.stack(np.unravel_index(idx, (G,) * dim), axis=1)
        X = lower + (cell + 0.5) * h
        F = np.zeros((len(idx), ncols))
        if center is not None:
            inside = ((X - center) ** 2).sum(axis=1) <= domain.radius_or_side**2
        else:
            inside = np.ones(len(idx), dtype=bool)
        if inside.any():
            F[inside] = func(X[inside])
        return F.sum(axis=0)

    acc = np.zeros(ncols)
    for part in _ordered_map(work, range(n_chunks), threads):
        acc += part
    mean = acc * h**dim / vol
    return Integral(mean, np.zeros((ncols, ncols)), total, vol)


def _ordered_map(fn, items, threads):
    if threads <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(fn, items)
