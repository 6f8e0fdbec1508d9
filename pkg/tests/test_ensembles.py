import math

import numpy as np
import pytest

from declab.ensembles import (EnsemblePartition, TestField, build_circles, build_random_msets,
                              build_spread, build_strips, check_geometry_condition,
                              coarse_square_labels, decoupling_ratio, integer_lift,
                              recoupling_ratio, strip_sharpness_scan)
from declab.freqsets import canonical_caps, lift_paraboloid
from declab.quadrature import EvaluationDomain, SamplingPlan, check_nyquist
from declab.tubes import make_bush, tube_lr_norm

TORUS = EvaluationDomain.torus()


def torus_plan(fset, p=2):
    # finest convenient grid that passes the alias rule
    return SamplingPlan.grid(1 / math.ceil(2 * p * fset.max_norm() + 1))


def assert_partition(ep):
    a = ep.assignment
    assert len(a) == len(ep.grid)
    ids = np.unique(a)
    assert ids[0] == 1 and ids[-1] == len(ids) == ep.ensemble_count
    assert ep.sizes().sum() == len(ep.grid)


# --- builders ------------------------------------------------------------

def test_strips_small():
    ep = build_strips(canonical_caps(16, 3))
    assert ep.ensemble_count == 4 and np.all(ep.sizes() == 4)
    for i in range(1, 5):
        c = ep.grid.centers[ep.members(i)]
        assert np.ptp(c[:, 1]) == 0
        assert np.ptp(c[:, 0]) + ep.grid.spacing == pytest.approx(1.0)
    with pytest.raises(ValueError):
        build_strips(canonical_caps(16, 2))


def test_strip_geometry_condition():
    ep = build_strips(canonical_caps(64, 3))
    assert check_geometry_condition(ep) <= 2
    # direct oracle: dyadic squares of side L meet ceil(L sqrt R) strips
    n = 8
    for b in (1, 2, 4, 8):
        L = b / n
        assert math.ceil(L * n) <= 2 * L * n


def test_circles():
    g = canonical_caps(16, 3)
    ep = build_circles(g, (0.0, 0.0))
    k = int(np.flatnonzero(np.all(g.centers == [0.375, 0.375], axis=1))[0])
    q = int(np.flatnonzero(np.all(g.centers == [0.125, 0.375], axis=1))[0])
    assert math.floor(math.hypot(0.375, 0.375) * 4) + 1 == 3
    assert ep.assignment[k] == 3
    assert ep.assignment[q] == 2
    assert math.floor(math.hypot(0.25, 0.25) * 4) + 1 == 2
    assert_partition(ep)
    assert check_geometry_condition(build_circles(canonical_caps(64, 3))) <= 2


def test_circles_compacts_empty_rings():
    g = canonical_caps(16, 3)
    ep = build_circles(g, (10.0, 10.0))
    assert_partition(ep)


def test_spread_small_and_audit():
    ep = build_spread(canonical_caps(16, 3))
    assert ep.ensemble_count == 4
    for R in (16, 256):
        g = canonical_caps(R, 3)
        ep = build_spread(g, seed=3)
        m = round(R**0.25)
        ij = g.axis_index()
        block = (ij[:, 1] // m) * m + ij[:, 0] // m
        n = round(math.sqrt(R))
        assert ep.ensemble_count == n and np.all(ep.sizes() == n)
        for i in range(1, n + 1):
            assert sorted(block[ep.members(i)]) == list(range(n))
    with pytest.raises(ValueError):
        build_spread(canonical_caps(64, 3))
    assert check_geometry_condition(build_spread(canonical_caps(256, 3))) > 0


def test_random_msets():
    g = canonical_caps(64, 3)
    for s in range(100):
        ep = build_random_msets(g, 4, s)
        assert np.all(ep.sizes() == 4)
    assert build_random_msets(g, 64, 0).ensemble_count == 1
    assert build_random_msets(g, 1, 0).ensemble_count == 64
    with pytest.raises(ValueError):
        build_random_msets(g, 5, 0)


def test_builders_are_partitions():
    g = canonical_caps(256, 3)
    for ep in (build_strips(g), build_circles(g, (0.3, 0.6)), build_spread(g),
               build_random_msets(g, 8, 1)):
        assert_partition(ep)


def test_assignment_validation():
    g = canonical_caps(16, 3)
    with pytest.raises(ValueError):
        EnsemblePartition(g, np.full(16, 2))
    with pytest.raises(ValueError):
        EnsemblePartition(g, np.ones(15))


def test_single_ensemble_geometry_reported():
    g = canonical_caps(64, 3)
    c = check_geometry_condition(EnsemblePartition(g, np.ones(64, dtype=int)))
    assert c == pytest.approx(8.0)


# --- decoupling ratios ---------------------------------------------------

def test_one_ensemble_ratio_is_one():
    g = canonical_caps(16, 3)
    ep = EnsemblePartition(g, np.ones(16, dtype=int))
    r = decoupling_ratio(ep, TestField.random_phase(g, 2), 3, "l2", plan=SamplingPlan.mc(4000))
    assert r.ratio == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("builder", ["strips", "circles", "msets1", "msets2", "spread"])
def test_pythagoras_on_torus(builder):
    g = canonical_caps(16, 3)
    ep = {"strips": build_strips(g), "circles": build_circles(g),
          "msets1": build_random_msets(g, 1, 0), "msets2": build_random_msets(g, 2, 5),
          "spread": build_spread(g, 1)}[builder]
    fs = integer_lift(g)
    f = TestField.random_phase(g, 4)
    r = decoupling_ratio(ep, f, 2, "l2", TORUS, torus_plan(fs), fset=fs)
    assert r.ratio == pytest.approx(1.0, abs=1e-10)
    assert r.lhs**2 == pytest.approx((np.abs(f.weights) ** 2).sum(), rel=1e-10)


def test_refinement_at_p2():
    g = canonical_caps(16, 3)
    fs = integer_lift(g)
    f = TestField.random_phase(g, 8)
    ep = build_strips(g)
    a = decoupling_ratio(ep, f, 2, "l2", TORUS, torus_plan(fs), fset=fs)
    b = decoupling_ratio(ep.split(2), f, 2, "l2", TORUS, torus_plan(fs), fset=fs)
    assert b.lhs <= a.lhs * (1 + 1e-12)
    assert b.rhs >= a.rhs * (1 - 1e-10)


def test_scaling_invariance():
    g = canonical_caps(64, 3)
    ep = build_strips(g)
    f = TestField.random_phase(g, 1)
    plan = SamplingPlan.mc(5000, seed=6)
    for variant in ("l2", "lp"):
        a = decoupling_ratio(ep, f, 3, variant, plan=plan)
        b = decoupling_ratio(ep, f.scaled(3 - 4j), 3, variant, plan=plan)
        assert b.ratio == pytest.approx(a.ratio, rel=1e-10)


def test_many_ensembles_projected_errors():
    # above the full-covariance threshold the error comes from a projected second pass
    g = canonical_caps(100, 3)
    ep = build_random_msets(g, 1, 0)
    f = TestField.random_phase(g, 3)
    plan = SamplingPlan.mc(20000, seed=1)
    r = decoupling_ratio(ep, f, 3, "l2", plan=plan)
    assert r.ensemble_count == 100 and r.ratio_std_error > 0
    # the shared-sample estimate beats the naive independent-error bound
    naive = r.ratio * math.hypot(r.lhs_std_error / r.lhs, r.rhs_std_error / r.rhs)
    assert r.ratio_std_error < 3 * naive


def test_lp_variant_msets_factor():
    g = canonical_caps(16, 3)
    fs = integer_lift(g)
    ep = build_random_msets(g, 1, 0)
    f = TestField.constant(g)
    r = decoupling_ratio(ep, f, 2, "lp", TORUS, torus_plan(fs), fset=fs)
    # p = 2 removes the normalising factor; orthogonality makes both sides sqrt(16)
    assert r.ratio == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        decoupling_ratio(ep, f, 2, "l7")


def test_zero_rhs_rejected():
    g = canonical_caps(16, 3)
    f = TestField(np.zeros(16, dtype=complex), "zero")
    with pytest.raises(ValueError):
        decoupling_ratio(build_strips(g), f, 2, "l2", plan=SamplingPlan.mc(2000))


# --- recoupling ----------------------------------------------------------

def test_recoupling_one_square():
    g = canonical_caps(64, 3)
    sq = coarse_square_labels(g, 2)
    f = TestField.indicator(g, np.flatnonzero(sq == 3))
    r = recoupling_ratio(g, 2, f, 4, 8.0, SamplingPlan.mc(4000))
    assert r.ratio == pytest.approx(1.0, rel=1e-12) and r.ensemble_count == 1


def test_recoupling_torus_orthogonality():
    g = canonical_caps(16, 3)
    fs = integer_lift(g)
    f = TestField.random_phase(g, 1)
    r = recoupling_ratio(g, 2, f, 2, 2, torus_plan(fs), fset=fs, domain=TORUS)
    assert r.ratio <= 1 + 1e-10


def test_recoupling_squares_validation():
    g = canonical_caps(64, 3)
    f = TestField.constant(g)
    with pytest.raises(ValueError):
        recoupling_ratio(g, 2, f, 4, 8.0, SamplingPlan.mc(2000), squares=[(0, 0), (0, 0)])
    with pytest.raises(ValueError):
        recoupling_ratio(g, 2, f, 4, 1.0, SamplingPlan.mc(2000))
    with pytest.raises(ValueError):
        recoupling_ratio(g, 16, f, 4, 16.0, SamplingPlan.mc(2000))
    r = recoupling_ratio(g, 2, f, 4, 8.0, SamplingPlan.mc(2000), squares=[(0, 0), (1, 1)])
    assert r.ensemble_count == 2


def test_recoupling_random_phases_bounded():
    g = canonical_caps(256, 3)
    worst = 0.0
    for s in range(20):
        r = recoupling_ratio(g, 4, TestField.random_phase(g, s), 4, 256.0,
                             SamplingPlan.mc(20000, seed=s))
        worst = max(worst, r.ratio)
    assert worst <= 2


# --- flat strips ---------------------------------------------------------

def test_strip_scan_exponents():
    s = strip_sharpness_scan()
    assert abs(s.lhs_fit.slope - 1.0) <= 0.05
    assert abs(s.mass_fit.slope - 2.5) <= 0.05
    # round(sqrt R) strips, so non-square R nudge the count slope off 1/2
    assert s.count_fit.slope == pytest.approx(0.5, abs=0.01)
    assert [t["p"] for t in s.table] == [2.0, 2.5, 3.0, 3.5, 4.0]
    with pytest.raises(ValueError):
        strip_sharpness_scan(p_list=(5.0,))


def test_strip_mass_closed_form_vs_monte_carlo():
    g = canonical_caps(64, 3)
    bush = make_bush(g)
    strip = bush.subset(build_strips(g).members(3))
    est = tube_lr_norm(strip, 1.0, SamplingPlan(count=200000, seed=2, stratification="radial"))
    assert abs(est.integral() - strip.total_mass()) <= 3 * est.std_error * est.volume


def test_field_recipes():
    g = canonical_caps(16, 3)
    assert TestField.constant(g).recipe == "constant"
    w = TestField.random_phase(g, 5).weights
    assert np.allclose(np.abs(w), 1)
    assert np.array_equal(w, TestField.random_phase(g, 5).weights)
    assert TestField.indicator(g, [0, 3]).weights.sum() == 2
    check_nyquist(TORUS, torus_plan(integer_lift(g)), integer_lift(g).max_norm(), 2)
    assert lift_paraboloid(g).dim == 3
