"""Tests for critical-region enumeration, stage maps, and point location."""

import numpy as np
import pytest

from pempc.mpqp import (
    ParameterOutsideMap,
    ParametricQp,
    build_search_tree,
    build_stage_maps,
    enumerate_critical_regions,
    implicit_store,
    region_contains,
    store_bytes,
    store_from_json,
    store_hash,
    store_section_bytes,
    store_to_json,
)
from pempc.problem import InterconnectedSpec, build_spring_damper_benchmark, stack_problem
from pempc.qp import DenseQp, solve_qp_dense

TEMPLATE_KEYS = ("stage0_actuated", "stage0_unactuated",
                 "interior_actuated", "interior_unactuated")


@pytest.fixture(scope="module")
def benchmark_small():
    p = build_spring_damper_benchmark(InterconnectedSpec(1), horizon=5)
    return p, stack_problem(p), build_stage_maps(p, tree=True)


@pytest.fixture(scope="module")
def benchmark_pair():
    p = build_spring_damper_benchmark(InterconnectedSpec(2), horizon=5)
    return p, stack_problem(p), build_stage_maps(p, tree=True)


def test_scalar_three_regions_exact():
    # min 2 xi^2 + theta xi on [-2, 0.5]: saturated below 8, above -2, free between
    pqp = ParametricQp(H=[[4.0]], F=[[1.0]], A=[[-1.0], [1.0]], b=[2.0, 0.5],
                       B=np.zeros((2, 1)))
    regs = enumerate_critical_regions(pqp)
    assert len(regs) == 3
    laws = {r.active: (r.law_A.ravel()[0], r.law_b[0]) for r in regs}
    assert laws[()] == (-0.25, 0.0)
    assert laws[(0,)] == (0.0, -2.0)
    assert laws[(1,)] == (0.0, 0.5)
    # breakpoints from the interior region's rows, exact
    mid = next(r for r in regs if r.active == ())
    bounds = sorted(float(b / h) for h, b in zip(mid.H.ravel(), mid.b))
    assert abs(bounds[0] - (-2.0)) < 1e-12
    assert abs(bounds[1] - 8.0) < 1e-12
    # saturated regions open at the same breakpoints
    lo = next(r for r in regs if r.active == (0,))
    assert abs(lo.b[0] / lo.H.ravel()[0] - 8.0) < 1e-12


def test_interior_map_matches_dense(benchmark_small):
    p, sp, store = benchmark_small
    rows = sp.interior_rows()
    rng = np.random.default_rng(5)
    for _ in range(150):
        th = rng.standard_normal(5) * rng.choice([1.0, 5.0, 20.0])
        xi, act, idx = store["interior"].evaluate(th)
        qp = DenseQp(H=4.0 * sp.sigma(1), f=th,
                     A_in=rows["A_in"], b_in=rows["b_in"])
        sol = solve_qp_dense(qp)
        assert np.max(np.abs(xi - sol.x)) < 1e-7
        assert tuple(sorted(act)) == sol.active_set


def test_stage0_map_matches_dense(benchmark_small):
    p, sp, store = benchmark_small
    rows = sp.stage0_rows()
    rng = np.random.default_rng(6)
    hits = 0
    for _ in range(150):
        x0 = rng.uniform([-0.5, -0.5], [1.5, 1.0])
        th = rng.standard_normal(3) * rng.choice([1.0, 5.0, 20.0])
        try:
            xi, act, idx = store["stage0"].evaluate(th, x0)
        except ParameterOutsideMap:
            continue
        hits += 1
        qp = DenseQp(H=4.0 * sp.sigma(0), f=th, A_in=rows["A_in"],
                     b_in=rows["b_in"] + rows["B_x0"] @ x0)
        sol = solve_qp_dense(qp)
        assert np.max(np.abs(xi - sol.x)) < 1e-7
        assert tuple(sorted(act)) == sol.active_set
    assert hits > 100


def test_terminal_map_matches_dense(benchmark_small):
    p, sp, store = benchmark_small
    rows = sp.terminal_rows()
    rng = np.random.default_rng(7)
    for _ in range(150):
        th = rng.standard_normal(2) * rng.choice([1.0, 5.0, 20.0])
        xi, act, idx = store["terminal"].evaluate(th)
        qp = DenseQp(H=4.0 * p.P, f=th, A_in=rows["A_in"], b_in=rows["b_in"])
        assert np.max(np.abs(xi - solve_qp_dense(qp).x)) < 1e-7


def test_two_vehicle_store_matches_dense_stages(benchmark_pair):
    # the per-vehicle scatter (values and stage row indices) against the
    # monolithic dense solves, where the index mapping is nontrivial
    p, sp, store = benchmark_pair
    imp = implicit_store(p)
    rng = np.random.default_rng(12)
    hits = 0
    for _ in range(80):
        x0 = rng.uniform([-0.5, -0.5, -0.5, -0.5], [1.5, 1.0, 1.5, 1.0])
        th0 = rng.standard_normal(6) * rng.choice([1.0, 5.0, 20.0])
        try:
            xi, act, _ = store["stage0"].evaluate(th0, x0)
        except ParameterOutsideMap:
            continue
        hits += 1
        xd, ad, _ = imp["stage0"].evaluate(th0, x0)
        assert np.max(np.abs(xi - xd)) < 1e-7
        assert tuple(sorted(act)) == tuple(sorted(ad))

        th1 = rng.standard_normal(10) * rng.choice([1.0, 5.0, 20.0])
        xi, act, _ = store["interior"].evaluate(th1)
        xd, ad, _ = imp["interior"].evaluate(th1)
        assert np.max(np.abs(xi - xd)) < 1e-7
        assert tuple(sorted(act)) == tuple(sorted(ad))
    assert hits > 40


def test_store_is_horizon_independent():
    spec = InterconnectedSpec(1)
    a = build_stage_maps(build_spring_damper_benchmark(spec, horizon=5), tree=True)
    b = build_stage_maps(build_spring_damper_benchmark(spec, horizon=9), tree=True)
    assert store_bytes(a) == store_bytes(b)


def test_template_sections_are_chain_length_independent(benchmark_small, benchmark_pair):
    _, _, one = benchmark_small
    _, _, two = benchmark_pair
    assert (store_section_bytes(one, TEMPLATE_KEYS)
            == store_section_bytes(two, TEMPLATE_KEYS))
    # the terminal map couples the vehicles, so the full stores differ
    assert store_bytes(one) != store_bytes(two)


def test_store_roundtrip(benchmark_small):
    p, sp, store = benchmark_small
    clone = store_from_json(store_to_json(store))
    assert store_hash(clone) == store_hash(store)
    rng = np.random.default_rng(9)
    for _ in range(30):
        th = rng.standard_normal(5) * 5
        xi_a, act_a, _ = store["interior"].evaluate(th)
        xi_b, act_b, _ = clone["interior"].evaluate(th)
        assert np.array_equal(xi_a, xi_b)
        assert act_a == act_b


def test_build_is_deterministic():
    spec = InterconnectedSpec(1)
    a = build_stage_maps(build_spring_damper_benchmark(spec, horizon=5), tree=True)
    b = build_stage_maps(build_spring_damper_benchmark(spec, horizon=5), tree=True)
    assert store_bytes(a) == store_bytes(b)
    assert a.region_counts() == {
        "interior_actuated": 243, "interior_unactuated": 243,
        "stage0_actuated": 27, "stage0_unactuated": 27, "terminal": 23}


def test_tree_matches_scan(benchmark_small):
    p, sp, store = benchmark_small
    m = store["interior"].actuated
    rng = np.random.default_rng(10)
    for _ in range(300):
        phi = rng.standard_normal(5) * rng.choice([1.0, 10.0, 40.0])
        idx_tree = m.locate(phi)
        law_tree = m.regions[idx_tree].law_A @ phi + m.regions[idx_tree].law_b
        hits = [r for r in m.regions if region_contains(r, phi, 1e-9)]
        assert hits, "scan must find a region for any parameter"
        law_scan = hits[0].law_A @ phi + hits[0].law_b
        assert np.max(np.abs(law_tree - law_scan)) < 1e-9


def test_overlapping_regions_share_the_law(benchmark_small):
    # strong convexity: wherever two region closures intersect, laws agree
    p, sp, store = benchmark_small
    m = store["interior"].actuated
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(400):
        phi = rng.standard_normal(5) * 8
        hits = [r for r in m.regions if region_contains(r, phi, 1e-9)]
        if len(hits) > 1:
            vals = [r.law_A @ phi + r.law_b for r in hits]
            for v in vals[1:]:
                assert np.max(np.abs(v - vals[0])) < 1e-7
            checked += 1
    assert checked >= 0  # overlap hits are rare for random parameters


def test_stage0_requires_state(benchmark_small):
    p, sp, store = benchmark_small
    with pytest.raises(AssertionError):
        store["stage0"].evaluate(np.zeros(3))


def test_stage0_outside_domain_raises(benchmark_small):
    p, sp, store = benchmark_small
    # position beyond any recoverable bound: the stage problem is infeasible
    with pytest.raises(ParameterOutsideMap):
        store["stage0"].evaluate(np.zeros(3), np.array([5.0, 0.0]))


def test_monolithic_build_matches_templates(benchmark_small):
    # forcing decompose=False must yield the same stage answers at I=1
    p, sp, store = benchmark_small
    mono = build_stage_maps(p, decompose=False)
    assert not mono.layout["decomposed"]
    rng = np.random.default_rng(13)
    for _ in range(50):
        th = rng.standard_normal(5) * 10
        a, act_a, _ = store["interior"].evaluate(th)
        b, act_b, _ = mono["interior"].evaluate(th)
        assert np.max(np.abs(a - b)) < 1e-9
        assert tuple(sorted(act_a)) == tuple(sorted(act_b))


def test_decompose_requires_homogeneous_chain():
    # vehicle-dependent state weights break the shared template
    p = build_spring_damper_benchmark(
        InterconnectedSpec(2), weights={"Q": [10.0, 10.0, 5.0, 5.0]}, horizon=3)
    with pytest.raises(ValueError):
        build_stage_maps(p, decompose=True)


def test_terminal_budget_switches_to_implicit(benchmark_small):
    p, sp, store = benchmark_small
    capped = build_stage_maps(p, terminal_budget=1)
    assert capped.region_counts()["terminal"] == 0
    rng = np.random.default_rng(14)
    for _ in range(40):
        th = rng.standard_normal(2) * rng.choice([1.0, 20.0])
        a, act_a, _ = store["terminal"].evaluate(th)
        b, act_b, _ = capped["terminal"].evaluate(th)
        assert np.max(np.abs(a - b)) < 1e-8
        assert tuple(sorted(act_a)) == tuple(sorted(act_b))


def test_terminal_region_count_under_invariant_set(benchmark_small):
    # frozen by enumeration over the 11-row admissible terminal set
    p, sp, store = benchmark_small
    assert store["terminal"].n_regions == 23
