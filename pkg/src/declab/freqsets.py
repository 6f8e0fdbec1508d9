"""Frequency point sets: canonical caps, lattice points, curves and random selections."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np

MAX_LATTICE_N = 10**6
MAX_CELLS = 10**8
MAX_SELECT_ATTEMPTS = 64


class RetryExhausted(RuntimeError):
    """No accepted Bernoulli draw within the attempt budget."""


@dataclass(frozen=True, eq=False)
class FrequencySet:
    """An ordered list of ``dim``-dimensional frequency points.

    ``raw`` optionally keeps integer lattice coordinates the points were
    rescaled from; ``meta`` carries JSON-friendly provenance.
    """

    dim: int
    points: np.ndarray
    label: str = ""
    meta: dict[str, Any] = field(default_factory=dict)
    raw: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        pts = np.array(self.points, dtype=np.float64).reshape(-1, self.dim)
        if not np.all(np.isfinite(pts)):
            raise ValueError("frequency coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.raw is not None:
            raw = np.array(self.raw, dtype=np.int64)
            raw = raw.reshape(len(pts), raw.shape[-1] if raw.ndim == 2 else -1)
            raw.setflags(write=False)
            object.__setattr__(self, "raw", raw)

    @classmethod
    def build(cls, points, label="", meta=None, raw=None, *, allow_empty=False, distinct=True,
              dim=None):
        pts = np.asarray(points, dtype=np.float64)
        if dim is not None and pts.size == 0:
            pts = pts.reshape(0, dim)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError("points must be a 2-D array")
        if len(pts) == 0 and not allow_empty:
            raise ValueError("empty frequency set")
        if distinct and len(pts) > 1 and len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("duplicate frequency points")
        return cls(pts.shape[1], pts, label, dict(meta or {}), raw)

    def __len__(self):
        return len(self.points)

    def max_norm(self) -> float:
        if len(self.points) == 0:
            return 0.0
        return float(np.sqrt((self.points**2).sum(axis=1)).max())

    def subset(self, index, label=None) -> FrequencySet:
        index = np.asarray(index)
        raw = None if self.raw is None else self.raw[index]
        return FrequencySet.build(self.points[index], label or self.label, self.meta, raw,
                                  allow_empty=True, distinct=False, dim=self.dim)


@dataclass(frozen=True, eq=False)
class CapGrid:
    """Centers of the canonical 1/sqrt(R) squares on [0,1]^base_dim.

    For ``base_dim == 2`` the flat index is ``i * per_axis + j`` where ``j``
    indexes the first coordinate and ``i`` the second.
    """

    R: float
    base_dim: int
    centers: np.ndarray
    spacing: float
    per_axis: int

    def __len__(self):
        return len(self.centers)

    def axis_index(self) -> np.ndarray:
        """Integer (j, i, ...) grid coordinates of every cap."""
        return np.rint(self.centers / self.spacing - 0.5).astype(np.int64)


def canonical_caps(R: float, d: int) -> CapGrid:
    if not R >= 4:
        raise ValueError(f"R must be >= 4, got {R}")
    if d not in (2, 3):
        raise ValueError(f"unsupported ambient dimension d={d}")
    base = d - 1
    n = int(round(math.sqrt(R)))
    h = 1.0 / math.sqrt(R)
    axis = (np.arange(n) + 0.5) * h
    if base == 1:
        centers = axis[:, None]
    else:
        jj, ii = np.meshgrid(np.arange(n), np.arange(n))
        centers = np.column_stack([axis[jj.ravel()], axis[ii.ravel()]])
    centers.setflags(write=False)
    return CapGrid(float(R), base, centers, h, n)


def lift_paraboloid(grid: CapGrid) -> FrequencySet:
    c = grid.centers
    pts = np.column_stack([c, (c**2).sum(axis=1)])
    return FrequencySet.build(pts, f"paraboloid-caps R={grid.R:g}",
                              {"R": grid.R, "base_dim": grid.base_dim})


def _two_square_table(n_max: int):
    """CSR table of all (a, b) in Z^2 with a^2 + b^2 = k, for every k <= n_max."""
    s = math.isqrt(n_max)
    a = np.arange(-s, s + 1, dtype=np.int64)
    A, B = np.meshgrid(a, a, indexing="ij")
    A, B = A.ravel(), B.ravel()
    k = A * A + B * B
    keep = k <= n_max
    A, B, k = A[keep], B[keep], k[keep]
    order = np.argsort(k, kind="stable")
    A, B, k = A[order], B[order], k[order]
    start = np.searchsorted(k, np.arange(n_max + 2))
    return np.column_stack([A, B]), start


def _gather(pairs, start, ks):
    lo, hi = start[ks], start[ks + 1]
    counts = hi - lo
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(ks)), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return owner, pairs[np.repeat(lo, counts) + offs]


def lattice_sphere(N: int, d: int, *, bound: int = MAX_LATTICE_N) -> FrequencySet:
    """All n in Z^d with |n|^2 = N, returned as n / sqrt(N) in lexicographic order."""
    if d not in (3, 4):
        raise ValueError(f"unsupported dimension d={d}")
    N = int(N)
    if N < 1:
        raise ValueError("N must be a positive integer")
    if N > bound:
        raise ValueError(f"N={N} exceeds enumeration bound {bound}")
    pairs, start = _two_square_table(N)
    if d == 3:
        s = math.isqrt(N)
        head = np.arange(-s, s + 1, dtype=np.int64)[:, None]
    else:
        head = pairs[: start[N + 1]]
    ks = N - (head**2).sum(axis=1)
    owner, tail = _gather(pairs, start, ks)
    raw = np.column_stack([head[owner], tail]).reshape(-1, d)
    if len(raw):
        raw = raw[np.lexsort(raw.T[::-1])]
    pts = raw / math.sqrt(N)
    return FrequencySet.build(pts, f"lattice-sphere N={N} d={d}",
                              {"N": N, "count": len(raw)}, raw, allow_empty=True, dim=d)


def lattice_annulus(R: float) -> FrequencySet:
    """Lattice points n in Z^2 with | |n| - R | <= R^-1/2.

    ``points`` are rescaled by 1/R (magnitude about 1); ``raw`` keeps the
    integer coordinates for torus experiments.
    """
    if not R >= 4:
        raise ValueError(f"R must be >= 4, got {R}")
    w = R**-0.5
    lo, hi = (R - w) ** 2, (R + w) ** 2
    m = int(math.floor(R + w))
    x = np.arange(-m, m + 1, dtype=np.int64)
    X, Y = np.meshgrid(x, x, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    n2 = (X * X + Y * Y).astype(np.float64)
    keep = (n2 >= lo) & (n2 <= hi)
    raw = np.column_stack([X[keep], Y[keep]])
    return FrequencySet.build(raw / R, f"lattice-annulus R={R:g}",
                              {"R": R, "count": len(raw), "scale": 1.0 / R}, raw,
                              allow_empty=True, dim=2)


def _iroot(R: float, d: int) -> int:
    m = max(1, int(round(R ** (1.0 / d))))
    while (m + 1) ** d <= R:
        m += 1
    while m > 1 and m**d > R:
        m -= 1
    return m


def moment_curve_points(R: float, d: int) -> FrequencySet:
    if d < 2:
        raise ValueError("d must be >= 2")
    if not R >= 2**d:
        raise ValueError(f"R must be >= 2^d = {2**d}")
    m = _iroot(R, d)
    t = np.arange(1, m + 1) / m
    pts = np.column_stack([t**k for k in range(1, d + 1)])
    return FrequencySet.build(pts, f"moment-curve R={R:g} d={d}", {"R": R, "m": m})


# --- equal measure cells -------------------------------------------------

def surface_dim(surface: str) -> int:
    if surface in ("circle", "parabola-arc"):
        return 2
    if surface == "sphere-2":
        return 3
    if surface.startswith("moment-curve-"):
        d = int(surface.rsplit("-", 1)[1])
        if d < 2:
            raise ValueError(f"bad surface {surface!r}")
        return d
    raise ValueError(f"unknown surface {surface!r}")


def _curve(surface: str, t: np.ndarray) -> np.ndarray:
    if surface == "circle":
        ang = 2 * np.pi * t
        return np.column_stack([np.cos(ang), np.sin(ang)])
    d = surface_dim(surface)
    return np.column_stack([t**k for k in range(1, d + 1)])


def _lipschitz(surface: str) -> float:
    # |gamma'| bound per unit of (normalized) parameter
    if surface == "circle":
        return 2 * math.pi
    d = surface_dim(surface)
    return math.sqrt(sum(k * k for k in range(1, d + 1)))


@dataclass(frozen=True, eq=False)
class MeasureCellPartition:
    """Cells of equal measure for a normalized surface measure.

    One-parameter surfaces store ``cells`` as parameter intervals ``(lo, hi)``
    of the normalized parameter in [0, 1]. ``sphere-2`` stores
    ``(z_lo, z_hi, phi_lo, phi_hi)`` patches of the unit sphere.
    """

    surface: str
    cells: np.ndarray
    cell_measure: Fraction
    max_diameter: float

    def __len__(self):
        return len(self.cells)

    @property
    def dim(self) -> int:
        return surface_dim(self.surface)

    def representatives(self, index=None) -> np.ndarray:
        """Images of the parameter midpoints of the selected cells."""
        cells = self.cells if index is None else self.cells[index]
        if self.surface == "sphere-2":
            z = 0.5 * (cells[:, 0] + cells[:, 1])
            phi = 0.5 * (cells[:, 2] + cells[:, 3])
            rho = np.sqrt(np.clip(1 - z * z, 0, None))
            return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
        return _curve(self.surface, 0.5 * (cells[:, 0] + cells[:, 1]))

    def cell_measures(self) -> np.ndarray:
        if self.surface == "sphere-2":
            c = self.cells
            return (c[:, 1] - c[:, 0]) * (c[:, 3] - c[:, 2]) / (4 * np.pi)
        return self.cells[:, 1] - self.cells[:, 0]

    def cell_diameters(self) -> np.ndarray:
        """Chord diameters; for sphere patches a rigorous upper bound."""
        c = self.cells
        if self.surface == "circle":
            dt = c[:, 1] - c[:, 0]
            return np.where(dt >= 0.5, 2.0, 2 * np.sin(np.pi * dt))
        if self.surface == "sphere-2":
            return _sphere_cell_bound(c)
        # every coordinate of t -> (t, ..., t^d) is monotone on [0, 1]
        a, b = _curve(self.surface, c[:, 0]), _curve(self.surface, c[:, 1])
        return np.sqrt(((b - a) ** 2).sum(axis=1))


def _sphere_cell_bound(c: np.ndarray) -> np.ndarray:
    th_hi = np.arccos(np.clip(c[:, 0], -1, 1))
    th_lo = np.arccos(np.clip(c[:, 1], -1, 1))
    dphi = c[:, 3] - c[:, 2]
    smax = np.where((th_lo <= np.pi / 2) & (th_hi >= np.pi / 2), 1.0,
                    np.maximum(np.sin(th_lo), np.sin(th_hi)))
    bound = (th_hi - th_lo) + smax * dphi
    north = c[:, 1] >= 1.0
    south = c[:, 0] <= -1.0
    bound = np.where(north, np.where(th_hi <= np.pi / 2, 2 * np.sin(th_hi), 2.0), bound)
    bound = np.where(south, np.where(th_lo >= np.pi / 2, 2 * np.sin(th_lo), 2.0), bound)
    return np.minimum(bound, 2.0)


def _sphere_cells(max_diameter: float, cap: int) -> np.ndarray:
    s = max_diameter / 2.5
    for _ in range(200):
        n = math.ceil(4 * math.pi / (s * s))
        n = max(n, 2)
        if n > cap:
            raise ValueError(f"{n} cells exceed the cell cap {cap}")
        cells = _zonal(n, s)
        if cells is not None and np.all(_sphere_cell_bound(cells) <= max_diameter):
            return cells
        s *= 0.9
    raise RuntimeError("zonal partition did not converge")


def _zonal(n: int, s: float) -> np.ndarray | None:
    theta_c = math.acos(1 - 2 / n)
    if n == 2:
        counts = []
    else:
        span = math.pi - 2 * theta_c
        K = max(1, round(span / s))
        edges = theta_c + span * np.arange(K + 1) / K
        ideal = (np.cos(edges[:-1]) - np.cos(edges[1:])) / 2 * n
        cum = np.rint(np.cumsum(ideal)).astype(np.int64)
        cum[-1] = n - 2
        counts = np.diff(np.concatenate([[0], cum]))
        if np.any(counts < 1):
            return None
    rows = [(1 - 2 / n, 1.0, 0.0, 2 * math.pi)]
    done = 1
    for m in counts:
        z_hi = 1 - 2 * done / n
        z_lo = 1 - 2 * (done + m) / n
        phi = 2 * math.pi * np.arange(m + 1) / m
        rows.extend((z_lo, z_hi, phi[k], phi[k + 1]) for k in range(m))
        done += m
    rows.append((-1.0, -1 + 2 / n, 0.0, 2 * math.pi))
    return np.array(rows, dtype=np.float64)


def equal_measure_partition(surface: str, max_diameter: float, *, count: int | None = None,
                            cell_cap: int = MAX_CELLS) -> MeasureCellPartition:
    """Partition a surface into cells of equal normalized measure.

    Curves are split into equal parameter intervals (arclength for the
    circle); ``count`` overrides the minimal cell count implied by
    ``max_diameter`` for one-parameter surfaces.
    """
    surface_dim(surface)
    if not 0 < max_diameter <= 2:
        raise ValueError(f"max_diameter must lie in (0, 2], got {max_diameter}")
    if surface == "sphere-2":
        cells = _sphere_cells(max_diameter, cell_cap)
        return MeasureCellPartition(surface, cells, Fraction(1, len(cells)), float(max_diameter))
    n = math.ceil(_lipschitz(surface) / max_diameter - 1e-12)
    if count is not None:
        if count < n:
            raise ValueError(f"count={count} cannot meet max_diameter (needs {n})")
        n = int(count)
    if n > cell_cap:
        raise ValueError(f"{n} cells exceed the cell cap {cell_cap}")
    edges = np.arange(n + 1, dtype=np.float64) / n
    cells = np.column_stack([edges[:-1], edges[1:]])
    return MeasureCellPartition(surface, cells, Fraction(1, n), float(max_diameter))


# --- random selection ------------------------------------------------------

def bernoulli_keep(n: int, delta: float, seed: int) -> np.ndarray:
    """Independent {0,1} draws with mean ``delta`` from a seeded PCG64 stream."""
    rng = np.random.default_rng(seed % 2**64)
    return rng.random(n) < delta


def selection_delta(n_cells: int, R: float, p: float, d: int) -> float:
    return min(1.0, R ** (2 * d / p) / n_cells)


def tight_random_select(cells: MeasureCellPartition, R: float, p: float, seed: int,
                        *, max_attempts: int = MAX_SELECT_ATTEMPTS) -> FrequencySet:
    """Random thinning of cell representatives down to about R^(2d/p) points.

    A draw is accepted when the kept count lies in [N delta / 2, 3 N delta / 2];
    otherwise it is redrawn with seed + 1.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    d = cells.dim
    target = R ** (2 * d / p)
    N = len(cells)
    if N < target:
        raise ValueError(f"{N} cells is fewer than R^(2d/p) = {target:.6g}")
    diam_limit = R ** (-1 - d / p)
    if cells.max_diameter > diam_limit * (1 + 1e-12):
        warnings.warn(f"cell diameter {cells.max_diameter:.3g} exceeds R^(-1-d/p) = {diam_limit:.3g}",
                      stacklevel=2)
    delta = selection_delta(N, R, p, d)
    expected = N * delta
    for attempt in range(max_attempts):
        keep = bernoulli_keep(N, delta, seed + attempt)
        k = int(keep.sum())
        if expected / 2 <= k <= 1.5 * expected:
            idx = np.flatnonzero(keep)
            meta = {"R": R, "p": p, "delta": delta, "cells": N, "kept": k,
                    "seed": int(seed), "seed_used": int((seed + attempt) % 2**64),
                    "attempts": attempt + 1, "surface": cells.surface}
            return FrequencySet.build(cells.representatives(idx),
                                      f"tight {cells.surface} R={R:g} p={p:g}", meta)
    raise RetryExhausted(f"no accepted draw in {max_attempts} attempts (N delta = {expected:.3g})")


def cap_concentrated_subset(fset: FrequencySet, R: float) -> FrequencySet:
    """Points in the densest cap of diameter R^-1/2.

    The cap is centred at the point with the most neighbours within
    R^-1/2 / 2 (squared distances, ties to the lowest index).
    """
    if len(fset) == 0:
        raise ValueError("empty frequency set")
    r2 = (0.5 * R**-0.5) ** 2
    P = fset.points
    counts = np.empty(len(P), dtype=np.int64)
    step = max(1, 2**22 // max(1, len(P)))
    for a in range(0, len(P), step):
        blk = P[a:a + step]
        d2 = ((blk[:, None, :] - P[None, :, :]) ** 2).sum(axis=2)
        counts[a:a + step] = (d2 <= r2).sum(axis=1)
    best = int(np.argmax(counts))
    d2 = ((P - P[best]) ** 2).sum(axis=1)
    idx = np.flatnonzero(d2 <= r2)
    sub = fset.subset(idx, f"cap-concentrated {fset.label}")
    return FrequencySet.build(sub.points, sub.label, {**fset.meta, "center_index": best},
                              sub.raw, distinct=False)
