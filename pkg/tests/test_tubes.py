import json
import math

import numpy as np
import pytest

from declab.expsum import fit_exponent
from declab.freqsets import CapGrid, canonical_caps
from declab.quadrature import SamplingPlan
from declab.tubes import (Tube, incidence_count, incidence_counts, make_bush, tube_lr_norm,
                          trelation_rhs_profile)


def point_segment_distance(u, half, x):
    """Scalar distance from x to the segment {t u : |t| <= half}."""
    t = max(-half, min(half, sum(a * b for a, b in zip(u, x))))
    return math.sqrt(sum((xi - t * ui) ** 2 for xi, ui in zip(x, u)))


def brute_count(family, x):
    return sum(point_segment_distance(u, family.length / 2, x) <= family.radius
               for u in family.directions.tolist())


def test_origin_cap_points_up():
    g = CapGrid(16.0, 2, np.array([[0.0, 0.0]]), 0.25, 1)
    assert make_bush(g).directions[0].tolist() == [0.0, 0.0, 1.0]


def test_bush_shape():
    g = canonical_caps(64, 3)
    b = make_bush(g)
    assert len(b) == 64 and b.length == 64 and b.radius == pytest.approx(8)
    assert np.allclose(np.linalg.norm(b.directions, axis=1), 1)
    assert len({tuple(np.round(u, 12)) for u in b.directions}) == 64
    assert make_bush(g, 0.1).radius == pytest.approx(64**0.6)
    with pytest.raises(ValueError):
        make_bush(canonical_caps(16, 2))
    with pytest.raises(ValueError):
        Tube((1.0, 0.0, 0.0), 2.0, 3.0)
    with pytest.raises(ValueError):
        Tube((1.0, 1.0, 0.0), 4.0, 1.0)


def test_adjacent_angle():
    R = 1024
    g = canonical_caps(R, 3)
    b = make_bush(g)
    ij = g.axis_index()
    k0 = int(np.flatnonzero((ij[:, 0] == 0) & (ij[:, 1] == 0))[0])
    k1 = int(np.flatnonzero((ij[:, 0] == 1) & (ij[:, 1] == 0))[0])
    ang = math.acos(float(np.clip(b.directions[k0] @ b.directions[k1], -1, 1)))
    assert ang == pytest.approx(2 * R**-0.5, rel=2 * R**-0.5)


def test_incidence_examples():
    g = canonical_caps(64, 3)
    b = make_bush(g)
    assert incidence_count(b, [0, 0, 0]) == 64
    assert incidence_count(b, [0, 0, 64 + 9]) == 0
    x = b.directions[1] * 32
    c = incidence_count(b, x)
    assert 1 <= c <= 16 and c == brute_count(b, x)


def test_vectorized_matches_brute_force():
    rng = np.random.default_rng(0)
    for R, delta in ((64, 0.0), (256, 0.1)):
        b = make_bush(canonical_caps(R, 3), delta)
        X = rng.normal(size=(400, 3))
        X *= (rng.uniform(0, 1.1, 400) * R / np.linalg.norm(X, axis=1))[:, None]
        X[:100] = b.directions[rng.integers(0, len(b), 100)] * rng.uniform(-R / 2, R / 2, (100, 1))
        fast = incidence_counts(b, X)
        slow = [brute_count(b, x) for x in X.tolist()]
        assert fast.tolist() == slow


def test_delta_monotone():
    g = canonical_caps(256, 3)
    rng = np.random.default_rng(1)
    X = rng.uniform(-200, 200, (2000, 3))
    prev = np.zeros(len(X), dtype=np.int64)
    for delta in (0.0, 0.05, 0.1, 0.2):
        cur = incidence_counts(make_bush(g, delta), X)
        assert np.all(cur >= prev)
        prev = cur


def test_r1_matches_closed_form():
    for R in (64, 256):
        b = make_bush(canonical_caps(R, 3))
        est = tube_lr_norm(b, 1.0, SamplingPlan(count=100000, seed=R, stratification="radial"))
        assert abs(est.integral() - b.total_mass()) <= 3 * est.std_error * est.volume
        assert b.total_mass() == R * (math.pi * R * R + 4 / 3 * math.pi * R**1.5)


def test_single_tube_norm():
    b = make_bush(canonical_caps(64, 3)).subset([5])
    est = tube_lr_norm(b, 2.0, SamplingPlan(count=100000, seed=3, stratification="radial"))
    # the indicator is idempotent: int 1_T^r = vol(T)
    assert abs(est.integral() - b.tube_volume()) <= 4 * est.std_error * est.volume
    assert est.norm() == pytest.approx(b.tube_volume() ** 0.5, rel=0.05)
    with pytest.raises(ValueError):
        tube_lr_norm(b, 0.5)


def test_profile_collapses():
    b = make_bush(canonical_caps(64, 3))
    plan = SamplingPlan(count=20000, seed=4, stratification="radial")
    pr = trelation_rhs_profile(b, 8, 2, plan)
    assert pr.int_L_half == pytest.approx(pr.weighted_int_L, rel=1e-12)
    pr = trelation_rhs_profile(b, 64, 3, plan)
    ref = trelation_rhs_profile(b, 64, 2, plan)
    assert pr.weighted_int_L == pytest.approx(ref.weighted_int_L, rel=1e-12)
    assert pr.predicted == pytest.approx(64**3 + 64**3)
    with pytest.raises(ValueError):
        trelation_rhs_profile(b, 8, 5, plan)
    with pytest.raises(ValueError):
        trelation_rhs_profile(b, 100, 3, plan)


def test_profile_ratio_bounded():
    Rs = [256, 512, 1024, 2048]
    ratios, errs = [], []
    for R in Rs:
        b = make_bush(canonical_caps(R, 3))
        pr = trelation_rhs_profile(b, math.sqrt(R), 3,
                                   SamplingPlan(count=50000, seed=R, stratification="radial"))
        ratios.append(pr.ratio)
        errs.append(math.hypot(pr.int_L_half_se, pr.weighted_int_L_se) / pr.predicted)
    assert fit_exponent(Rs, ratios, errors=errs).slope <= 0.15


def test_to_json():
    b = make_bush(canonical_caps(16, 3))
    d = json.loads(json.dumps(b.to_json()))
    assert len(d["tubes"]) == 16 and d["R"] == 16
    t = d["tubes"][0]
    assert set(t) == {"direction", "length", "radius"}
    assert Tube(tuple(t["direction"]), t["length"], t["radius"]) == b[0]
