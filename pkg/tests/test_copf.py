"""
Tests for OPF, C-OPF and the residual evaluation of dispatch solutions.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import SolverConfig
from core.copf import (
    DispatchSolution,
    Infeasible,
    InvalidProblem,
    NoConvergence,
    evaluate_solution,
    solve_copf,
    solve_opf,
)
from core.dispatch_model import CarbonPolicy, DispatchProblem
from core.model import Branch, Bus, Generator, Load, Network
from core.nlp import solve_nlp
from core.power_flow import Dispatch, solve_power_flow
from tests.networks import fixture_case, two_bus_problem


def test_opf_two_bus():
    """Test the OPF baseline: one generator covers the load."""
    print("\n=== Testing OPF ===")

    solution = solve_opf(two_bus_problem())
    print(f"Dispatch: {solution.gen_p}, objective: {solution.objective}")

    assert solution.stage == "opf"
    assert not solution.carbon
    assert solution.gen_p[0, 0] == pytest.approx(100.0, abs=1e-4)
    assert solution.objective == pytest.approx(2100.0, rel=1e-6)
    assert solution.emissions_ton == pytest.approx(90.0, rel=1e-6)
    np.testing.assert_allclose(solution.w[0], [0.9, 0.9], atol=1e-9)
    assert solution.residuals.passed()

    print("✓ OPF works!")


def test_copf_without_caps_matches_opf():
    """Test that C-OPF with no binding cap reproduces the OPF cost."""
    print("\n=== Testing C-OPF without caps ===")

    problem = two_bus_problem()
    opf = solve_opf(problem)
    copf = solve_copf(problem)
    print(f"OPF {opf.objective:.6f} $, C-OPF {copf.objective:.6f} $ at stage {copf.stage}")

    assert copf.carbon
    assert copf.objective == pytest.approx(opf.objective, rel=1e-5)
    np.testing.assert_allclose(copf.w[0], [0.9, 0.9], atol=1e-6)
    assert copf.max_complementarity() <= 1e-6
    assert copf.residuals.passed()

    print("✓ C-OPF reduces to OPF!")


def test_copf_without_caps_matches_opf_on_cases():
    """Test that removing every cap makes C-OPF cost what OPF costs on the shipped cases."""
    print("\n=== Testing C-OPF without caps on cases ===")

    for name in ("three_bus", "six_bus"):
        case = fixture_case(name)
        problem = case.problem(policy=CarbonPolicy())
        settings = case.solver_config(SolverConfig())
        opf = solve_opf(problem, settings)
        copf = solve_copf(problem, settings)
        print(f"{name}: OPF {opf.objective:.6f} $, C-OPF {copf.objective:.6f} $")
        assert copf.objective == pytest.approx(opf.objective, rel=1e-6)

    print("✓ Uncapped C-OPF matches OPF on the cases!")


def test_copf_rejects_non_stationary_point(mocker):
    """Test that a feasible point failing the KKT tolerance is not accepted."""
    print("\n=== Testing KKT acceptance ===")

    def stalled(*args, **kwargs):
        return replace(solve_nlp(*args, **kwargs), kkt_residual=1.0)

    mocker.patch("core.copf.solve_nlp", side_effect=stalled)
    with pytest.raises(NoConvergence) as info:
        solve_copf(two_bus_problem())
    print(f"Error: {info.value}")

    assert info.value.residuals.kkt == pytest.approx(1.0)
    assert info.value.residuals.feasibility <= 1e-6
    assert "kkt 1.000e+00" in str(info.value)

    print("✓ Non-stationary points are rejected!")


def _at(series, t):
    return series[t] if len(series) > 1 else series[0]


def _quadratic(gen, p):
    c2, c1, c0 = gen.cost
    return c2 * p ** 2 + c1 * p + c0


def _cheapest_period(demand, gens, t, step):
    """Best (cost, coal, gas, wind) over a gas x wind grid, coal covering the rest."""
    coal, gas, wind = gens
    G, W = np.meshgrid(np.arange(0.0, _at(gas.p_max, t) + step / 2, step),
                       np.arange(0.0, _at(wind.p_max, t) + step / 2, step))
    C = demand - G - W
    cost = _quadratic(coal, C) + _quadratic(gas, G) + _quadratic(wind, W)
    cost = np.where((C >= 0.0) & (C <= _at(coal.p_max, t)), cost, np.inf)
    k = int(np.argmin(cost))
    return cost.flat[k], C.flat[k], G.flat[k], W.flat[k]


def _six_bus_grid_search(problem, step=0.5):
    """Brute-force the six-bus DC dispatch over storage, gas and wind set points."""
    network = problem.network
    index = network.index()
    gens = [ref.unit for ref in index.generators]
    unit = index.storage[0].unit
    loads = [index.load_p(t).sum() for t in range(2)]

    best = (np.inf, None)
    for net in np.arange(-unit.p_dc_max, unit.p_ch_max + step / 2, step):
        ch1, dc1 = max(net, 0.0), max(-net, 0.0)
        e1 = unit.kappa * unit.e_init + unit.eta_ch * ch1 - dc1 / unit.eta_dc
        if not unit.e_min <= e1 <= unit.e_max:
            continue
        # the horizon must end at the starting energy
        gap = unit.e_init - unit.kappa * e1
        ch2, dc2 = (gap / unit.eta_ch, 0.0) if gap >= 0 else (0.0, -gap * unit.eta_dc)
        if ch2 > unit.p_ch_max or dc2 > unit.p_dc_max:
            continue
        first = _cheapest_period(loads[0] + ch1 - dc1, gens, 0, step)
        second = _cheapest_period(loads[1] + ch2 - dc2, gens, 1, step)
        total = first[0] + second[0] + unit.degradation_cost * (ch1 + dc1 + ch2 + dc2)
        if total < best[0]:
            best = (total, [(first[1:], ch1, dc1), (second[1:], ch2, dc2)])
    return best


def test_six_bus_opf_matches_grid_search():
    """Test the six-bus DC OPF against a brute-force search of its set points."""
    print("\n=== Testing six-bus OPF against grid search ===")

    case = fixture_case("six_bus")
    problem = case.problem()
    assert problem.grid.delta_t == 1.0
    opf = solve_opf(problem, case.solver_config(SolverConfig()))
    cost, periods = _six_bus_grid_search(problem)
    print(f"OPF {opf.objective:.4f} $, grid search {cost:.4f} $")

    # the search skips ramps and line limits; its optimum must satisfy both
    network = problem.network
    coal = network.index().generators[0].unit
    coal_p = [gens[0] for gens, _, _ in periods]
    assert coal.ramp_down <= coal_p[1] - coal_p[0] <= coal.ramp_up
    limits = np.array([br.s_max for br in network.branches]) * network.base_mva
    for t, (gens, ch, dc) in enumerate(periods):
        dispatch = Dispatch.for_period(network, t, gen_p=list(gens), storage_ch=[ch], storage_dc=[dc])
        pf = solve_power_flow(network, dispatch, model="dc")
        assert np.all(np.abs(pf.p_from) <= limits + 1e-6)

    assert opf.objective == pytest.approx(cost, rel=1e-3)

    print("✓ Six-bus OPF matches the grid search!")


def test_hard_cap_below_floor():
    """Test that a hard cap below every available factor is rejected up front."""
    print("\n=== Testing hard cap precheck ===")

    problem = two_bus_problem(policy=CarbonPolicy(nci_cap_by_bus={2: 0.5}))
    with pytest.raises(Infeasible) as info:
        solve_copf(problem)
    print(f"Error: {info.value}")

    assert info.value.kind == "infeasible_hard_cap"
    offending = info.value.diagnostics["offending"]
    assert offending[0]["bus"] == 2
    assert offending[0]["minimum"] == pytest.approx(0.9)

    print("✓ Hard cap precheck works!")


def test_soft_cap_prices_violation():
    """Test that soft mode pays the penalty for the unavoidable excess."""
    print("\n=== Testing soft cap ===")

    policy = CarbonPolicy(nci_cap_by_bus={2: 0.5}, soft=True, slack_penalty=1000.0)
    solution = solve_copf(two_bus_problem(policy=policy))
    print(f"Slack: {solution.slack_nci}, objective: {solution.objective}")

    assert solution.slack_nci[0, 1] == pytest.approx(0.4, abs=1e-5)
    assert solution.slack_nci[0, 0] == pytest.approx(0.0, abs=1e-9)
    assert solution.objective == pytest.approx(2500.0, rel=1e-5)
    assert solution.residuals.cap_violation <= 1e-6

    print("✓ Soft cap works!")


def test_three_bus_cap_shifts_dispatch():
    """Test that capping the load bus moves output to the clean unit."""
    print("\n=== Testing three-bus C-OPF ===")

    case = fixture_case("three_bus")
    problem = case.problem()
    opf = solve_opf(problem)
    copf = solve_copf(problem, case.solver_config(SolverConfig()))
    print(f"OPF dispatch {opf.gen_p[0]}, C-OPF dispatch {copf.gen_p[0]}, w {copf.w[0]}")

    assert opf.w[0, 2] > 1.0
    assert copf.w[0, 2] <= 1.0 + 1e-6
    assert copf.gen_p[0, 1] >= 50.0 - 1e-3
    assert copf.gen_p[0, 0] == pytest.approx(50.0, abs=1e-3)
    assert copf.objective > opf.objective
    assert copf.emissions_ton < opf.emissions_ton
    assert copf.residuals.passed()

    print("✓ Three-bus C-OPF works!")


def test_warm_start():
    """Test that a warm start from a previous C-OPF gives the same optimum."""
    print("\n=== Testing warm start ===")

    problem = fixture_case("three_bus").problem()
    cold = solve_copf(problem)
    warm = solve_copf(problem, warm_start=cold)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-5)

    print("✓ Warm start works!")


def test_storage_copf():
    """Test the six-bus case with storage: energy returns to its start and residuals pass."""
    print("\n=== Testing C-OPF with storage ===")

    case = fixture_case("six_bus")
    solution = solve_copf(case.problem(), case.solver_config(SolverConfig()))
    print(f"Stored energy: {solution.storage_e[:, 0]}, w_es: {solution.storage_w_es[:, 0]}")

    unit_e_init = case.network.index().storage[0].unit.e_init
    assert solution.storage_e[0, 0] == pytest.approx(unit_e_init, abs=1e-6)
    assert solution.storage_e[-1, 0] == pytest.approx(unit_e_init, abs=1e-6)
    assert np.all(np.minimum(solution.storage_ch, solution.storage_dc) <= 1e-6)
    assert solution.residuals.passed()

    print("✓ C-OPF with storage works!")


def test_evaluate_detects_faults():
    """Test that a tampered dispatch fails the independent evaluation."""
    print("\n=== Testing evaluate_solution ===")

    problem = two_bus_problem()
    solution = solve_opf(problem)

    shifted = replace(solution, gen_p=solution.gen_p + 10.0)
    report = evaluate_solution(problem, shifted)
    print(f"Residuals: {report.to_dict()}")
    assert report.power_balance > 1e-3
    assert "power_balance" in report.failures(SolverConfig())

    overlapping = replace(solution, p_hat_from_fwd=solution.p_hat_from_fwd + 5.0,
                          p_hat_from_rev=solution.p_hat_from_rev + 5.0)
    report = evaluate_solution(problem, overlapping)
    assert report.complementarity >= 25.0 - 1e-9
    assert report.complementarity_min >= 5.0 - 1e-9

    print("✓ evaluate_solution detects faults!")


def test_solution_dict():
    """Test that a serialized solution evaluates the same after reloading."""
    problem = fixture_case("three_bus").problem()
    solution = solve_copf(problem)
    data = solution.to_dict()
    assert data["stage"] == solution.stage
    assert data["residuals"]["feasibility"] == solution.residuals.feasibility

    restored = DispatchSolution.from_dict(data)
    assert restored.objective == solution.objective
    np.testing.assert_array_equal(restored.gen_p, solution.gen_p)
    assert evaluate_solution(problem, restored).passed()


def test_invalid_problem():
    """Test that validation failures surface as InvalidProblem."""
    network = Network(
        buses=(
            Bus(id=1, is_slack=True, generators=(Generator(p_max=100.0),)),
            Bus(id=2, is_slack=True, loads=(Load(p=10.0),)),
        ),
        branches=(Branch(from_bus=1, to_bus=2, b=-10.0),),
    )
    with pytest.raises(InvalidProblem) as info:
        solve_opf(DispatchProblem(network=network))
    assert "slack" in {v.code for v in info.value.report.violations}


if __name__ == "__main__":
    test_opf_two_bus()
    test_copf_without_caps_matches_opf()
    test_copf_without_caps_matches_opf_on_cases()
    test_six_bus_opf_matches_grid_search()
    test_hard_cap_below_floor()
    test_soft_cap_prices_violation()
    test_three_bus_cap_shifts_dispatch()
    test_warm_start()
    test_storage_copf()
    test_evaluate_detects_faults()
    test_solution_dict()
    test_invalid_problem()
