"""Exponential sums, their L^p means over balls/boxes/tori, and exponent fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .freqsets import FrequencySet
from .quadrature import (EvaluationDomain, SamplingPlan, check_nyquist, integrate)

# cap on phase-matrix entries per block (complex128)
_BLOCK_ENTRIES = 1 << 20


def as_weights(fset: FrequencySet, w=None) -> np.ndarray:
    if w is None:
        return np.ones(len(fset), dtype=np.complex128)
    w = np.asarray(w, dtype=np.complex128).ravel()
    if len(w) != len(fset):
        raise ValueError(f"{len(w)} weights for {len(fset)} frequencies")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def phasors(points: np.ndarray, X: np.ndarray) -> np.ndarray:
    """exp(2 pi i xi.x) with the phase reduced mod 1 before the trig call."""
    ph = X @ points.T
    ph -= np.floor(ph)
    return np.exp(2j * np.pi * ph)


def eval_many(points: np.ndarray, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """S(x) for every row of X; each row is reduced with numpy's pairwise sum."""
    X = np.atleast_2d(X)
    out = np.empty(len(X), dtype=np.complex128)
    step = max(1, _BLOCK_ENTRIES // max(1, len(points)))
    for a in range(0, len(X), step):
        out[a:a + step] = (phasors(points, X[a:a + step]) * w).sum(axis=1)
    return out


def eval_sum(fset: FrequencySet, w, x) -> complex:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != (fset.dim,):
        raise ValueError(f"point of dimension {x.shape[0]} for a {fset.dim}-dimensional set")
    return complex(eval_many(fset.points, as_weights(fset, w), x[None, :])[0])


@dataclass
class NormEstimate:
    """Domain average of |S|^p (``mean_power``) with its standard error."""

    p: float
    mean_power: float
    std_error: float
    sample_count: int
    volume: float = 1.0
    seed: int | None = None
    method: str = "monte-carlo"

    def integral(self) -> float:
        return self.mean_power * self.volume

    def norm(self) -> float:
        return self.integral() ** (1 / self.p)

    def norm_std_error(self) -> float:
        I = self.integral()
        if I == 0:
            return 0.0
        return I ** (1 / self.p - 1) * self.std_error * self.volume / self.p

    def to_row(self, **extra) -> dict:
        return {**extra, "p": self.p, "mean_power": self.mean_power, "std_error": self.std_error,
                "sample_count": self.sample_count, "seed": self.seed}


@dataclass
class Ratio:
    value: float
    std_error: float

    def __float__(self):
        return float(self.value)


def lp_mean(fset: FrequencySet, w, domain: EvaluationDomain, plan: SamplingPlan, p: float,
            threads: int = 1) -> NormEstimate:
    """(1/|D|) * integral over D of |sum_n a_n e(xi_n . x)|^p."""
    if p < 1:
        raise ValueError("p must be >= 1")
    w = as_weights(fset, w)
    plan = plan or SamplingPlan()
    check_nyquist(domain, plan, fset.max_norm(), p)
    pts = fset.points

    def f(X):
        return (np.abs(eval_many(pts, w, X)) ** p)[:, None]

    res = integrate(f, domain, fset.dim, plan, 1, threads)
    return NormEstimate(float(p), float(res.mean[0]), float(res.std_error[0]), res.count,
                        res.volume, plan.seed if plan.method != "grid" else None, plan.method)


def sqrt_cancel_ratio(fset: FrequencySet, w, domain: EvaluationDomain, plan: SamplingPlan,
                      p: float, threads: int = 1) -> Ratio:
    """lp_mean divided by (sum |a_n|^2)^(p/2)."""
    wv = as_weights(fset, w)
    l2 = float((np.abs(wv) ** 2).sum())
    if l2 == 0:
        raise ValueError("all weights are zero")
    est = lp_mean(fset, wv, domain, plan, p, threads)
    scale = l2 ** (p / 2)
    return Ratio(est.mean_power / scale, est.std_error / scale)


def interference_stencil(fset: FrequencySet) -> np.ndarray:
    """3^d points inside |x| <= 1 / (100 max(1, max|xi|)), corners on the boundary."""
    r = 1.0 / (100 * max(1.0, fset.max_norm()))
    h = r / np.sqrt(fset.dim)
    axes = [np.array([-h, 0.0, h])] * fset.dim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, fset.dim)


def interference_mass(fset: FrequencySet, w=None, p: float | None = None, R: float = 1.0) -> float:
    """min over a small stencil around 0 of |S(x)| / N, with all weights 1."""
    if R < 1:
        raise ValueError("R must be >= 1")
    if w is not None and not np.all(np.asarray(w) == 1):
        raise ValueError("interference_mass requires unit weights")
    if len(fset) == 0:
        raise ValueError("empty frequency set")
    vals = np.abs(eval_many(fset.points, np.ones(len(fset), complex), interference_stencil(fset)))
    return float(vals.min() / len(fset))


@dataclass
class ExponentFit:
    """Least-squares fit of log(value) = slope * log(R) + intercept."""

    pairs: list[tuple[float, float]]
    slope: float
    intercept: float
    slope_std_error: float
    slope_mc_error: float = 0.0
    value_errors: list[float] = field(default_factory=list)

    def to_rows(self, **extra) -> list[dict]:
        errs = self.value_errors or [0.0] * len(self.pairs)
        return [{**extra, "R": R, "value": v, "value_std_error": e}
                for (R, v), e in zip(self.pairs, errs)]

    def summary(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "slope_std_error": self.slope_std_error, "slope_mc_error": self.slope_mc_error,
                "n": len(self.pairs)}


def fit_exponent(R_values: Sequence[float], values: Sequence[float],
                 errors: Sequence[float] | None = None) -> ExponentFit:
    R = np.asarray(R_values, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if len(R) < 3 or len(R) != len(v):
        raise ValueError("need at least 3 (R, value) pairs")
    if np.any(np.diff(R) <= 0):
        raise ValueError("R values must be strictly increasing")
    if np.any(~(v > 0)):
        raise ValueError("non-positive value in exponent fit")
    x, y = np.log(R), np.log(v)
    xc = x - x.mean()
    sxx = float((xc**2).sum())
    slope = float((xc * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = len(x) - 2
    se = float(np.sqrt((resid**2).sum() / dof / sxx)) if dof > 0 else 0.0
    mc = 0.0
    errs = []
    if errors is not None:
        errs = [float(e) for e in errors]
        sig = np.asarray(errs) / v
        mc = float(np.sqrt(((xc / sxx) ** 2 * sig**2).sum()))
    return ExponentFit([(float(a), float(b)) for a, b in zip(R, v)], slope, intercept, se, mc, errs)


def scan_exponent(recipe: Callable[[float], FrequencySet], R_list: Sequence[float], p: float,
                  domain_rule: Callable[[float, FrequencySet], EvaluationDomain] | None = None,
                  plan: SamplingPlan | None = None, weights=None, threads: int = 1) -> ExponentFit:
    """Fit the growth exponent of sqrt_cancel_ratio over a scan of R.

    ``recipe(R)`` builds the frequency set; ``domain_rule(R, fset)`` the
    domain (default: the ball B(0, R)).
    """
    if len(R_list) < 3 or any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise ValueError("R_list must be strictly increasing with at least 3 entries")
    plan = plan or SamplingPlan()
    vals, errs = [], []
    for R in R_list:
        fset = recipe(R)
        dom = domain_rule(R, fset) if domain_rule else EvaluationDomain.ball(R)
        w = weights(fset) if callable(weights) else weights
        r = sqrt_cancel_ratio(fset, w, dom, plan, p, threads)
        vals.append(r.value)
        errs.append(r.std_error)
    return fit_exponent(R_list, vals, errs)
