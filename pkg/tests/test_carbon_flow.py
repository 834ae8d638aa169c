"""
Tests for carbon emission flow: matrix assembly, the reachability check,
the linear solve and its fixed-point cross-check.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.carbon_flow import (
    CarbonFlowInfeasible,
    CarbonFlowMatrices,
    FeasibilityStatus,
    SingularMatrix,
    UnsuppliedLoad,
    build_matrices,
    check_feasibility,
    compute_carbon_flow,
    nodal_conservation,
    solve,
    solve_fixed_point_oracle,
)
from core.flow_graph import FlowGraph
from core.model import Generator
from core.power_flow import Dispatch, ImplausibleFlow, NoConvergence, solve_power_flow
from tests.networks import random_network, ring_matrices, triangle_network, two_bus_network


def _triangle_flow(dirty_mw=30.0, clean_mw=70.0, **kwargs):
    network = triangle_network(**kwargs)
    pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=[dirty_mw, clean_mw]), model="dc")
    return network, pf


def test_two_bus_intensity():
    """Test that a single source passes its factor straight to the load."""
    print("\n=== Testing two-bus carbon flow ===")

    network = two_bus_network(emission_factor=0.9)
    pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=[100.0]), model="dc")
    cf = compute_carbon_flow(network, pf)
    print(f"w: {cf.w}, load rate: {cf.r_load}")

    np.testing.assert_allclose(cf.w, [0.9, 0.9])
    assert cf.r_load[0] == pytest.approx(90.0)
    assert cf.r_branch_from[0] == pytest.approx(90.0)
    assert cf.r_gen[0] == pytest.approx(90.0)

    print("✓ Two-bus carbon flow works!")


def test_triangle_mixing():
    """Test proportional sharing at the load bus of the triangle."""
    print("\n=== Testing triangle carbon flow ===")

    network, pf = _triangle_flow(30.0, 70.0)
    cf = compute_carbon_flow(network, pf)
    print(f"w: {cf.w}")

    # all generation ends at bus 3, so its intensity is the generation mix
    assert cf.w[2] == pytest.approx(2.0 * 30.0 / 100.0)
    assert cf.w[1] == pytest.approx(0.0)
    # bus 1 mixes its own output with the 40/3 MW pushed back from bus 2
    assert cf.w[0] == pytest.approx(60.0 / (30.0 + 40.0 / 3.0))
    assert np.all(cf.w >= 0)
    assert np.max(np.abs(nodal_conservation(network, cf))) < 1e-10
    assert cf.r_load.sum() == pytest.approx(cf.r_gen.sum())

    print("✓ Triangle mixing works!")


def test_solver_matches_fixed_point():
    """Test that the LU solve agrees with the fixed-point oracle."""
    print("\n=== Testing fixed-point cross-check ===")

    network, pf = _triangle_flow(55.0, 45.0, clean_factor=0.3)
    matrices = build_matrices(network, pf)
    w = solve(matrices)
    w_oracle = solve_fixed_point_oracle(matrices)
    print(f"LU: {w}, fixed point: {w_oracle}")

    np.testing.assert_allclose(w, w_oracle, atol=1e-10)

    print("✓ Fixed-point cross-check works!")


def test_random_networks():
    """Test LU against fixed point, intensity bounds and a nonnegative inverse on random AC grids."""
    print("\n=== Testing random networks ===")

    rng = np.random.default_rng(20261019)
    solved = 0
    worst = 0.0
    for _ in range(100):
        network, gen_p = random_network(rng)
        try:
            pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=gen_p), model="ac")
            matrices = build_matrices(network, pf)
        except (NoConvergence, ImplausibleFlow):
            continue
        verdict = check_feasibility(matrices)
        assert verdict.feasible, verdict.to_dict()
        solved += 1

        w = solve(matrices)
        worst = max(worst, float(np.max(np.abs(w - solve_fixed_point_oracle(matrices)))))

        index = network.index()
        supplying = index.emission_factors[pf.gen_p > 1e-9]
        assert np.all(w >= -1e-9)
        assert np.all(w <= supplying.max() + 1e-9)

        active = matrices.active
        inverse = np.linalg.inv(matrices.p_c[np.ix_(active, active)])
        assert inverse.min() >= -1e-12
    print(f"Solved {solved}/100, largest LU/fixed-point gap {worst:.3e}")

    assert solved >= 90
    assert worst <= 1e-9

    print("✓ Random networks work!")


def test_generator_at_every_bus_is_feasible():
    """Test that a network with a generator on every bus passes the check."""
    print("\n=== Testing all-generator network ===")

    network = triangle_network()
    buses = tuple(
        bus if bus.generators else bus.model_copy(update={
            "generators": (Generator(p_max=200.0, emission_factor=0.4),),
        })
        for bus in network.buses
    )
    network = network.model_copy(update={"buses": buses})
    pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=[30.0, 30.0, 40.0]), model="dc")
    matrices = build_matrices(network, pf)
    verdict = check_feasibility(matrices)

    assert verdict.feasible
    assert set(verdict.dominant) == {1, 2, 3}
    assert np.linalg.inv(matrices.p_c).min() >= -1e-12

    print("✓ All-generator network is feasible!")


def test_scale_invariance():
    """Test that scaling every power leaves the intensities unchanged."""
    print("\n=== Testing scale invariance ===")

    network, pf = _triangle_flow(40.0, 60.0)
    w = solve(build_matrices(network, pf))
    for s in (1e-3, 7.0, 1e3):
        w_scaled = solve(build_matrices(network, pf.scaled(s)))
        np.testing.assert_allclose(w_scaled, w, rtol=1e-9, atol=1e-12)

    print("✓ Intensities are scale invariant!")


def test_rates_scale_linearly():
    """Test that scaling a lossy AC flow scales every carbon rate and keeps w."""
    print("\n=== Testing rate scaling ===")

    network = triangle_network()
    network = network.model_copy(update={
        "branches": tuple(br.model_copy(update={"g": 1.0}) for br in network.branches),
    })
    pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=[0.0, 60.0]), model="ac")
    base = compute_carbon_flow(network, pf)
    assert np.all(pf.p_loss > 0)

    for s in (0.5, 2.0, 10.0):
        scaled = compute_carbon_flow(network, pf.scaled(s))
        print(f"s={s}: w {scaled.w}")
        np.testing.assert_allclose(scaled.w, base.w, rtol=0, atol=1e-10)
        for name in ("r_branch_from", "r_branch_to", "r_loss", "r_load", "r_gen"):
            np.testing.assert_allclose(getattr(scaled, name), s * getattr(base, name),
                                       rtol=1e-9, atol=1e-12, err_msg=name)

    print("✓ Carbon rates scale with the flows!")


def test_matrix_structure():
    """Test that P_C is diagonally dominant with nonpositive off-diagonals."""
    print("\n=== Testing matrix structure ===")

    network, pf = _triangle_flow(30.0, 70.0)
    matrices = build_matrices(network, pf)
    p_c = matrices.p_c
    off = p_c - np.diag(np.diag(p_c))
    print(f"P_C:\n{p_c}")

    assert np.all(off <= 0)
    assert np.all(np.diag(p_c) >= -off.sum(axis=1) - 1e-12)
    verdict = check_feasibility(matrices)
    assert verdict.feasible
    assert set(verdict.dominant) >= {1, 2}
    assert verdict.witness_paths[3][-1] in verdict.dominant

    print("✓ Matrix structure is as expected!")


def test_circulating_ring_is_singular():
    """Test the three-node loop with one unit circulating and no injection."""
    print("\n=== Testing circulating ring ===")

    matrices = ring_matrices()
    verdict = check_feasibility(matrices)
    print(f"Verdict: {verdict.to_dict()}")

    assert verdict.status == FeasibilityStatus.CONDITION_FAILED
    assert verdict.stranded == [1, 2, 3]
    assert verdict.numerically_singular
    assert verdict.circulating_loops == [[1, 2, 3]]
    assert abs(np.linalg.det(matrices.p_c)) < 1e-12
    assert np.linalg.cond(matrices.p_c) > 1e12
    with pytest.raises(SingularMatrix):
        solve(matrices)

    print("✓ Circulating ring is rejected!")


def test_unsupplied_load():
    """Test that demand without inflow is reported before solving."""
    print("\n=== Testing unsupplied load ===")

    matrices = CarbonFlowMatrices.from_arrays(
        p_n=[10.0, 0.0], p_b=np.zeros((2, 2)), r_g=[5.0, 0.0], demand=[10.0, 4.0],
    )
    verdict = check_feasibility(matrices)
    assert verdict.status == FeasibilityStatus.UNSUPPLIED_LOAD
    assert verdict.unsupplied == [2]
    with pytest.raises(UnsuppliedLoad):
        solve(matrices)

    print("✓ Unsupplied load is reported!")


def test_idle_node_excluded():
    """Test that a node with no inflow and no demand gets zero intensity."""
    print("\n=== Testing excluded nodes ===")

    matrices = CarbonFlowMatrices.from_arrays(
        p_n=[10.0, 0.0, 10.0], p_b=[[0, 0, 0], [0, 0, 0], [10.0, 0, 0]], r_g=[8.0, 0.0, 0.0],
    )
    assert matrices.excluded == frozenset({1})
    w = solve(matrices)
    np.testing.assert_allclose(w, [0.8, 0.0, 0.8])

    print("✓ Idle nodes are excluded!")


def test_implausible_flow():
    """Test that ends disagreeing on the direction are rejected."""
    print("\n=== Testing implausible flow ===")

    network = two_bus_network()
    pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=[100.0]), model="dc")
    broken = replace(pf, p_to=-pf.p_to)
    with pytest.raises(ImplausibleFlow):
        build_matrices(network, broken)

    print("✓ Implausible flow is rejected!")


def test_compute_raises_on_infeasible():
    """Test that compute_carbon_flow wraps a failed check in CarbonFlowInfeasible."""
    print("\n=== Testing compute_carbon_flow failure ===")

    network = two_bus_network()
    pf = solve_power_flow(network, Dispatch.for_period(network, 0, gen_p=[100.0]), model="dc")
    starved = replace(pf, gen_p=np.zeros(1), p_from=np.zeros(1), p_to=np.zeros(1))
    with pytest.raises(CarbonFlowInfeasible) as info:
        compute_carbon_flow(network, starved)
    assert info.value.verdict.unsupplied == [2]

    print("✓ Infeasible carbon flow is reported!")


def test_flow_graph():
    """Test FlowGraph queries on a small supply chain."""
    print("\n=== Testing FlowGraph ===")

    p_b = np.array([[0, 0, 0], [5.0, 0, 0], [0, 5.0, 0]])
    graph = FlowGraph.from_inflow_matrix(p_b, ["a", "b", "c"])
    print(f"Graph: {graph}, stats: {graph.get_statistics()}")

    assert len(graph) == 3
    assert "b" in graph
    assert graph.get_upstream("c") == {"b"}
    assert graph.get_downstream("a") == {"b"}
    assert graph.reaching({"a"}) == {"a", "b", "c"}
    assert graph.witness_paths({"a"})["c"] == ["c", "b", "a"]
    assert not graph.has_cycle()
    assert graph.circulating_loops() == []

    print("✓ FlowGraph works!")


@settings(max_examples=40, deadline=None)
@given(
    dirty_share=st.floats(min_value=0.0, max_value=1.0),
    dirty_factor=st.floats(min_value=0.0, max_value=3.0),
    clean_factor=st.floats(min_value=0.0, max_value=3.0),
)
def test_intensity_bounded_by_generation(dirty_share, dirty_factor, clean_factor):
    """Test that every intensity lies between the smallest and largest active factor."""
    network, pf = _triangle_flow(100.0 * dirty_share, 100.0 * (1 - dirty_share),
                                 dirty_factor=dirty_factor, clean_factor=clean_factor)
    matrices = build_matrices(network, pf)
    if not check_feasibility(matrices).feasible:
        return
    w = solve(matrices)
    active = [f for f, p in ((dirty_factor, pf.gen_p[0]), (clean_factor, pf.gen_p[1])) if p > 1e-9]
    assert np.all(w[matrices.active] >= min(active) - 1e-9)
    assert np.all(w <= max(active) + 1e-9)


if __name__ == "__main__":
    test_two_bus_intensity()
    test_triangle_mixing()
    test_solver_matches_fixed_point()
    test_random_networks()
    test_generator_at_every_bus_is_feasible()
    test_scale_invariance()
    test_rates_scale_linearly()
    test_matrix_structure()
    test_circulating_ring_is_singular()
    test_unsupplied_load()
    test_idle_node_excluded()
    test_implausible_flow()
    test_compute_raises_on_infeasible()
    test_flow_graph()
