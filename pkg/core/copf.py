"""
Carbon-aware OPF module.

OPF baseline, C-OPF with dual power flow variables and a relaxed
complementarity homotopy, cap sweeps and an independent residual
evaluation of dispatch solutions.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import SolverConfig, cfg
from core.accounting import trace_horizon
from core.carbon_flow import (
    CarbonFlowError,
    build_matrices,
    check_feasibility,
    solve as solve_carbon_flow,
)
from core.dispatch_model import (
    CarbonPolicy,
    DispatchModel,
    DispatchProblem,
    StageOptions,
    radial_directions,
)
from core.model import Network, TimeGrid, ValidationReport, series_at
from core.nlp import NlpResult, solve_nlp
from core.power_flow import (
    PowerFlowError,
    PowerFlowSolution,
    ac_branch_flows,
    dc_branch_flows,
    nodal_mismatch,
    split_flows,
)
from core.storage_carbon import EsModelKind, StorageOperationError
from core.task_queue import TaskQueue

logger = logging.getLogger(__name__)

ZERO_LOAD_MW = 1e-9
INFEASIBLE_VIOLATION = 1e-3
SWEEP_COST_RTOL = 1e-6

__all__ = [
    "AllPatternsInfeasible",
    "CarbonPolicy",
    "DispatchError",
    "DispatchProblem",
    "DispatchSolution",
    "Infeasible",
    "InvalidProblem",
    "NoConvergence",
    "ResidualReport",
    "SweepPoint",
    "evaluate_solution",
    "solve_copf",
    "solve_opf",
    "sweep_cap",
]


class DispatchError(Exception):
    """Base class for dispatch failures."""
    pass


class Infeasible(DispatchError):
    """Raised when the problem has no feasible point."""

    def __init__(self, kind: str, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.kind = kind
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class NoConvergence(DispatchError):
    """Raised when a solve stage stops short of the acceptance tolerances."""

    def __init__(self, stage: str, residuals: Optional["ResidualReport"] = None):
        self.stage = stage
        self.residuals = residuals
        detail = (f" (feasibility {residuals.feasibility:.3e}, kkt {residuals.kkt:.3e})"
                  if residuals is not None else "")
        super().__init__(f"dispatch did not converge at stage {stage}{detail}")


class AllPatternsInfeasible(DispatchError):
    """Raised when no direction pattern of the enumeration oracle is feasible."""
    pass


class InvalidProblem(DispatchError):
    """Raised when a problem fails validation."""

    def __init__(self, report: ValidationReport):
        self.report = report
        super().__init__("; ".join(report.messages()) or "invalid problem")


@dataclass
class ResidualReport:
    """
    Constraint residual maxima of a dispatch solution.

    Balances, linking, energy and thermal residuals are in p.u.; the carbon
    flow residual in ton/h relative to max(1, carbon inflow); complementarity
    products in MW^2 and the smaller dual flow in MW.
    """
    power_balance: float = 0.0
    reactive_balance: float = 0.0
    flow_linking: float = 0.0
    energy_dynamics: float = 0.0
    storage_intensity: float = 0.0
    bound_violation: float = 0.0
    ramp_violation: float = 0.0
    thermal_violation: float = 0.0
    cap_violation: float = 0.0
    carbon_flow: float = 0.0
    intensity_recompute: float = 0.0
    complementarity: float = 0.0
    complementarity_min: float = 0.0
    simultaneous_storage: float = 0.0
    kkt: float = 0.0
    carbon_feasible: bool = True
    notes: List[str] = field(default_factory=list)

    FEASIBILITY_FIELDS = (
        "power_balance", "reactive_balance", "flow_linking", "energy_dynamics",
        "storage_intensity", "bound_violation", "ramp_violation", "thermal_violation",
        "cap_violation", "carbon_flow",
    )

    @property
    def feasibility(self) -> float:
        return max(getattr(self, name) for name in self.FEASIBILITY_FIELDS)

    def failures(self, settings: SolverConfig) -> List[str]:
        """Names of residuals above the acceptance tolerances."""
        failed = [name for name in self.FEASIBILITY_FIELDS if getattr(self, name) > settings.tol_feas]
        if self.complementarity > settings.tol_comp:
            failed.append("complementarity")
        if self.intensity_recompute > 1e-6:
            failed.append("intensity_recompute")
        return failed

    def passed(self, settings: Optional[SolverConfig] = None) -> bool:
        return not self.failures(settings or cfg().solver)

    def to_dict(self) -> Dict[str, Any]:
        out = {name: getattr(self, name) for name in self.FEASIBILITY_FIELDS}
        out.update({
            "intensity_recompute": self.intensity_recompute,
            "complementarity": self.complementarity,
            "complementarity_min": self.complementarity_min,
            "simultaneous_storage": self.simultaneous_storage,
            "kkt": self.kkt,
            "carbon_feasible": self.carbon_feasible,
            "feasibility": self.feasibility,
            "notes": self.notes,
        })
        return out


@dataclass
class DispatchSolution:
    """
    Multi-period dispatch in physical units.

    Arrays are indexed by period first. Powers in MW/MVAr, energies in MWh,
    stored emissions in ton, intensities in ton/MWh, cost in $.
    """
    model: str
    es_model: EsModelKind
    carbon: bool
    bus_ids: List[int]
    gen_keys: List[str]
    branch_keys: List[str]
    storage_keys: List[str]
    load_keys: List[str]
    gen_p: np.ndarray
    gen_q: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    p_hat_from_fwd: np.ndarray
    p_hat_from_rev: np.ndarray
    p_hat_to_fwd: np.ndarray
    p_hat_to_rev: np.ndarray
    storage_ch: np.ndarray
    storage_dc: np.ndarray
    storage_e: np.ndarray
    storage_E: np.ndarray
    storage_w_es: np.ndarray
    w: np.ndarray
    slack_nci: np.ndarray
    slack_user: np.ndarray
    slack_node: np.ndarray
    objective: float
    emissions_ton: float
    stage: str = ""
    iterations: int = 0
    kkt_residual: float = 0.0
    residuals: Optional[ResidualReport] = None
    pattern: Optional[tuple] = None
    x: Optional[np.ndarray] = None

    @property
    def periods(self) -> int:
        return int(self.gen_p.shape[0])

    def power_flow(self, network: Network, t: int) -> PowerFlowSolution:
        """Power flow state of period t, with branch flows evaluated from V and theta."""
        index = network.index()
        base = network.base_mva
        if self.model == "ac":
            pf, pt, qf, qt = ac_branch_flows(self.vm[t], self.va[t], index)
        else:
            pf = dc_branch_flows(self.va[t], index)
            pt = pf.copy()
            qf = qt = np.zeros(index.n_branch)
        return PowerFlowSolution(
            model=self.model,
            bus_ids=tuple(self.bus_ids),
            vm=np.asarray(self.vm[t], dtype=float),
            va=np.asarray(self.va[t], dtype=float),
            p_from=pf * base, p_to=pt * base, q_from=qf * base, q_to=qt * base,
            p_loss=np.abs(pf - pt) * base,
            gen_p=np.asarray(self.gen_p[t], dtype=float),
            gen_q=np.asarray(self.gen_q[t], dtype=float),
            load_p=index.load_p(t),
            load_q=index.load_q(t),
            storage_ch=np.asarray(self.storage_ch[t], dtype=float),
            storage_dc=np.asarray(self.storage_dc[t], dtype=float),
        )

    def power_flows(self, network: Network) -> List[PowerFlowSolution]:
        return [self.power_flow(network, t) for t in range(self.periods)]

    def max_complementarity(self) -> float:
        products = [self.p_hat_from_fwd * self.p_hat_from_rev, self.p_hat_to_fwd * self.p_hat_to_rev]
        return float(max((p.max() for p in products if p.size), default=0.0))

    def to_dict(self) -> Dict[str, Any]:
        def arr(a):
            return np.asarray(a, dtype=float).tolist()

        return {
            "model": self.model,
            "es_model": EsModelKind(self.es_model).value,
            "carbon": self.carbon,
            "stage": self.stage,
            "objective": self.objective,
            "emissions_ton": self.emissions_ton,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "pattern": list(self.pattern) if self.pattern is not None else None,
            "bus_ids": self.bus_ids,
            "gen_keys": self.gen_keys,
            "branch_keys": self.branch_keys,
            "storage_keys": self.storage_keys,
            "load_keys": self.load_keys,
            "gen_p_mw": arr(self.gen_p),
            "gen_q_mvar": arr(self.gen_q),
            "vm_pu": arr(self.vm),
            "va_rad": arr(self.va),
            "p_hat_from_fwd_mw": arr(self.p_hat_from_fwd),
            "p_hat_from_rev_mw": arr(self.p_hat_from_rev),
            "p_hat_to_fwd_mw": arr(self.p_hat_to_fwd),
            "p_hat_to_rev_mw": arr(self.p_hat_to_rev),
            "storage_ch_mw": arr(self.storage_ch),
            "storage_dc_mw": arr(self.storage_dc),
            "storage_e_mwh": arr(self.storage_e),
            "storage_E_ton": arr(self.storage_E),
            "storage_w_es_ton_per_mwh": arr(self.storage_w_es),
            "w_ton_per_mwh": arr(self.w),
            "slack_nci": arr(self.slack_nci),
            "slack_user": arr(self.slack_user),
            "slack_node": arr(self.slack_node),
            "residuals": self.residuals.to_dict() if self.residuals is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DispatchSolution":
        """Rebuild a solution written by to_dict (residuals are re-evaluated by the caller)."""
        def arr(key):
            return np.asarray(data[key], dtype=float)

        return cls(
            model=data["model"],
            es_model=EsModelKind(data["es_model"]),
            carbon=bool(data["carbon"]),
            bus_ids=list(data["bus_ids"]),
            gen_keys=list(data["gen_keys"]),
            branch_keys=list(data["branch_keys"]),
            storage_keys=list(data["storage_keys"]),
            load_keys=list(data["load_keys"]),
            gen_p=arr("gen_p_mw"), gen_q=arr("gen_q_mvar"),
            vm=arr("vm_pu"), va=arr("va_rad"),
            p_hat_from_fwd=arr("p_hat_from_fwd_mw"), p_hat_from_rev=arr("p_hat_from_rev_mw"),
            p_hat_to_fwd=arr("p_hat_to_fwd_mw"), p_hat_to_rev=arr("p_hat_to_rev_mw"),
            storage_ch=arr("storage_ch_mw"), storage_dc=arr("storage_dc_mw"),
            storage_e=arr("storage_e_mwh"), storage_E=arr("storage_E_ton"),
            storage_w_es=arr("storage_w_es_ton_per_mwh"),
            w=arr("w_ton_per_mwh"),
            slack_nci=arr("slack_nci"), slack_user=arr("slack_user"), slack_node=arr("slack_node"),
            objective=float(data["objective"]),
            emissions_ton=float(data["emissions_ton"]),
            stage=data.get("stage", ""),
            iterations=int(data.get("iterations", 0)),
            kkt_residual=float(data.get("kkt_residual", 0.0)),
            pattern=tuple(data["pattern"]) if data.get("pattern") is not None else None,
        )


@dataclass
class SweepPoint:
    """One point of a cap sweep."""
    cap: float
    cost: float
    emissions_ton: float
    status: str
    message: str = ""
    solution: Optional[DispatchSolution] = None


# helpers


def _check(problem: DispatchProblem):
    report = problem.validate_problem()
    if not report.ok:
        raise InvalidProblem(report)


def generation_emissions(network: Network, grid: TimeGrid, gen_p: np.ndarray) -> float:
    """Scope-1 emissions over the horizon (ton)."""
    factors = network.index().emission_factors
    if not factors.size:
        return 0.0
    return float(grid.delta_t * np.sum(np.asarray(gen_p) @ factors))


def _opf_start(model: DispatchModel) -> np.ndarray:
    lay, base = model.layout, model.base
    x = np.zeros(model.n)
    if model.G:
        share = model.load_p_bus.sum(axis=1, keepdims=True) / model.G
        lo = np.nan_to_num(model.p_min, neginf=-1e6)
        hi = np.nan_to_num(model.p_max, posinf=1e6)
        lay.put(x, "pg", np.clip(share, lo, hi) / base)
    if model.ac:
        vm = np.ones(model.N)
        for bus_id, v in model.problem.v_start.items():
            if bus_id in model.index.position:
                vm[model.index.position[bus_id]] = v
        lay.put(x, "vm", np.tile(vm, (model.T, 1)))
    if model.S:
        e_init = np.array([ref.unit.e_init for ref in model.index.storage]) / base
        lay.put(x, "e", np.tile(e_init, (model.T + 1, 1)))
    return x


def solution_from_vector(
    model: DispatchModel,
    x: np.ndarray,
    stage: str,
    result: Optional[NlpResult] = None,
) -> DispatchSolution:
    lay, base, ix = model.layout, model.base, model.index
    T, N, B, S = model.T, model.N, model.B, model.S
    va = lay.get(x, "va").reshape(T, N)
    vm = lay.get(x, "vm").reshape(T, N) if model.ac else np.ones((T, N))
    gen_p = lay.get(x, "pg").reshape(T, model.G) * base
    gen_q = lay.get(x, "qg").reshape(T, model.G) * base if model.ac else np.zeros((T, model.G))

    if model.carbon:
        hf_fwd, hf_rev = lay.get(x, "hf_fwd") * base, lay.get(x, "hf_rev") * base
        if model.ac:
            ht_fwd, ht_rev = lay.get(x, "ht_fwd") * base, lay.get(x, "ht_rev") * base
        else:
            ht_fwd, ht_rev = hf_fwd.copy(), hf_rev.copy()
        w = lay.get(x, "w").reshape(T, N)
        if model.water_tank and S:
            w_es = lay.get(x, "wes").reshape(T + 1, S)
        else:
            w_es = np.zeros((T + 1, S))
    else:
        hf_fwd, hf_rev, ht_fwd, ht_rev = (np.zeros((T, B)) for _ in range(4))
        w = np.zeros((T, N))
        w_es = np.zeros((T + 1, S))

    e = lay.get(x, "e").reshape(T + 1, S) * base
    soft = model.carbon and model.problem.policy.soft
    solution = DispatchSolution(
        model=model.problem.pf_model,
        es_model=EsModelKind(model.problem.es_model),
        carbon=model.carbon,
        bus_ids=list(ix.bus_ids),
        gen_keys=[ref.key for ref in ix.generators],
        branch_keys=list(ix.branch_keys),
        storage_keys=[ref.key for ref in ix.storage],
        load_keys=[ref.key for ref in ix.loads],
        gen_p=gen_p, gen_q=gen_q, vm=vm, va=va,
        p_hat_from_fwd=hf_fwd, p_hat_from_rev=hf_rev,
        p_hat_to_fwd=ht_fwd, p_hat_to_rev=ht_rev,
        storage_ch=lay.get(x, "pch").reshape(T, S) * base,
        storage_dc=lay.get(x, "pdc").reshape(T, S) * base,
        storage_e=e,
        storage_E=w_es * e,
        storage_w_es=w_es,
        w=w,
        slack_nci=lay.get(x, "a_nci") if soft else np.zeros((T, N)),
        slack_user=lay.get(x, "a_user") if soft else np.zeros(model.L),
        slack_node=lay.get(x, "a_node") if soft else np.zeros(N),
        objective=float(model.objective(x)[0]),
        emissions_ton=generation_emissions(model.network, model.problem.grid, gen_p),
        stage=stage,
        iterations=result.iterations if result is not None else 0,
        kkt_residual=result.kkt_residual if result is not None else 0.0,
        x=np.array(x, dtype=float),
    )
    if not model.carbon:
        _attach_flows_and_trace(model, solution)
    return solution


def _attach_flows_and_trace(model: DispatchModel, solution: DispatchSolution):
    """Fill dual flows and carbon quantities of an OPF solution by tracing its flows."""
    network, grid = model.network, model.problem.grid
    flows = solution.power_flows(network)
    for t, pf in enumerate(flows):
        pairs = split_flows(pf)
        solution.p_hat_from_fwd[t] = pairs.from_end.p_hat_fwd
        solution.p_hat_from_rev[t] = pairs.from_end.p_hat_rev
        solution.p_hat_to_fwd[t] = pairs.to_end.p_hat_fwd
        solution.p_hat_to_rev[t] = pairs.to_end.p_hat_rev
    try:
        trace = trace_horizon(network, grid, flows, model.problem.es_model)
    except (CarbonFlowError, PowerFlowError, StorageOperationError) as e:
        logger.warning(f"Carbon trace of the OPF dispatch failed: {e}")
        return
    for t, cf in enumerate(trace.carbon_flows):
        solution.w[t] = cf.w
    if model.water_tank and model.S:
        for s, states in enumerate(trace.storage_states):
            w_es = np.array([state.w_es for state in states], dtype=float)
            solution.storage_w_es[:, s] = w_es
            solution.storage_E[:, s] = w_es * solution.storage_e[:, s]


def seed_from_solution(model: DispatchModel, seed: DispatchSolution) -> np.ndarray:
    """Starting point of the C-OPF from an OPF or C-OPF solution of the same network."""
    lay, base = model.layout, model.base
    x = np.zeros(model.n)
    lay.put(x, "pg", seed.gen_p / base)
    lay.put(x, "va", seed.va)
    if model.ac:
        lay.put(x, "qg", seed.gen_q / base)
        lay.put(x, "vm", seed.vm)
    lay.put(x, "pch", seed.storage_ch / base)
    lay.put(x, "pdc", seed.storage_dc / base)
    lay.put(x, "e", seed.storage_e / base)
    lay.put(x, "hf_fwd", seed.p_hat_from_fwd / base)
    lay.put(x, "hf_rev", seed.p_hat_from_rev / base)
    if model.ac:
        lay.put(x, "ht_fwd", seed.p_hat_to_fwd / base)
        lay.put(x, "ht_rev", seed.p_hat_to_rev / base)
    lay.put(x, "w", seed.w)
    if model.water_tank and model.S:
        lay.put(x, "wes", seed.storage_w_es)
    if model.problem.policy.soft:
        excess = np.where(np.isfinite(model.caps), np.maximum(seed.w - model.caps, 0.0), 0.0)
        lay.put(x, "a_nci", excess)
    return x


def _minimum_intensity(problem: DispatchProblem, t: int) -> float:
    index = problem.network.index()
    available = [ref.unit.emission_factor for ref in index.generators if series_at(ref.unit.p_max, t) > 0]
    floor = min(available) if available else math.inf
    dischargeable = [ref.unit for ref in index.storage if ref.unit.p_dc_max > 0]
    if dischargeable:
        if EsModelKind(problem.es_model) == EsModelKind.LOAD_CLEAN_GEN:
            floor = 0.0
        else:
            floor = min(floor, min(u.w_es_init for u in dischargeable))
    return floor


def precheck_hard_caps(problem: DispatchProblem):
    """
    Reject hard caps below the lowest intensity any dispatch can reach.

    Raises:
        Infeasible: kind "infeasible_hard_cap"
    """
    policy = problem.policy
    if policy.soft or not policy.has_caps:
        return
    index = problem.network.index()
    T, dt = problem.grid.periods, problem.grid.delta_t
    caps = policy.nci_cap_matrix(index, T)
    floors = [_minimum_intensity(problem, t) for t in range(T)]
    offending = []
    for t in range(T):
        load = index.bus_load_p(t)
        for i in range(index.n_bus):
            if load[i] > ZERO_LOAD_MW and caps[t, i] < floors[t] - 1e-9:
                offending.append({"period": t, "bus": index.bus_ids[i],
                                  "cap": float(caps[t, i]), "minimum": float(floors[t])})

    load_keys = [ref.key for ref in index.loads]
    for key, cap in policy.user_cap.items():
        l = load_keys.index(key)
        least = sum(dt * floors[t] * index.load_p(t)[l] for t in range(T))
        if cap < least - 1e-9:
            offending.append({"load": key, "cap": cap, "minimum": least})
    for bus_id, cap in policy.node_cap.items():
        i = index.position[bus_id]
        least = sum(dt * floors[t] * index.bus_load_p(t)[i] for t in range(T))
        if cap < least - 1e-9:
            offending.append({"bus": bus_id, "cap": cap, "minimum": least})

    if offending:
        raise Infeasible(
            "infeasible_hard_cap",
            f"{len(offending)} hard carbon cap(s) lie below the lowest attainable intensity; "
            "enable soft mode to price violations instead",
            {"offending": offending},
        )


def _classify_failure(problem: DispatchProblem, stage: str, residuals: ResidualReport,
                      result: Optional[NlpResult] = None):
    clearly_infeasible = residuals.feasibility > INFEASIBLE_VIOLATION
    if result is not None and result.violation > INFEASIBLE_VIOLATION:
        clearly_infeasible = True
    if clearly_infeasible:
        policy = problem.policy
        kind = "infeasible_hard_cap" if stage != "opf" and policy.has_caps and not policy.soft else "infeasible"
        message = f"no feasible dispatch found at stage {stage}"
        if kind == "infeasible_hard_cap":
            message += "; enable soft mode to price cap violations"
        raise Infeasible(kind, message, residuals.to_dict())
    raise NoConvergence(stage, residuals)


# operations


def solve_opf(
    problem: DispatchProblem,
    settings: Optional[SolverConfig] = None,
) -> DispatchSolution:
    """
    Multi-period OPF without carbon variables.

    Minimizes generation and storage cost (plus the emission price term)
    subject to power flow, limits, ramps and storage dynamics.

    Raises:
        InvalidProblem: If validation fails
        Infeasible: If no dispatch satisfies the constraints
        NoConvergence: If the solver stops short of the tolerances
    """
    _check(problem)
    settings = settings or cfg().solver
    model = DispatchModel(problem, carbon=False)
    logger.info(f"Solving OPF ({problem.pf_model}, T={model.T}, {model.n} variables)")
    result = solve_nlp(
        model.program(_opf_start(model)),
        method=settings.method, max_iter=settings.max_iter,
        ftol=settings.ftol, tol_feas=settings.tol_feas,
    )
    solution = solution_from_vector(model, result.x, "opf", result)
    solution.residuals = evaluate_solution(problem, solution)
    if solution.residuals.failures(settings):
        _classify_failure(problem, "opf", solution.residuals, result)
    logger.info(f"OPF objective {solution.objective:.6g} $")
    return solution


def solve_copf(
    problem: DispatchProblem,
    settings: Optional[SolverConfig] = None,
    warm_start: Optional[DispatchSolution] = None,
) -> DispatchSolution:
    """
    Carbon-aware OPF.

    Seeds from an OPF solution (or warm_start), drives the complementarity
    relaxation eps_start -> eps_end, then fixes the flow directions of the
    last stage and re-solves the smooth direction-fixed problem.

    Args:
        problem: Dispatch problem with its carbon policy
        settings: Solver settings; defaults to the global configuration
        warm_start: Previous OPF or C-OPF solution on the same network

    Returns:
        Accepted DispatchSolution with residuals attached

    Raises:
        InvalidProblem: If validation fails
        Infeasible: If hard caps cannot be met (kind "infeasible_hard_cap")
        NoConvergence: If a stage ends above the acceptance tolerances
    """
    _check(problem)
    settings = settings or cfg().solver
    precheck_hard_caps(problem)

    seed = warm_start if warm_start is not None else solve_opf(problem, settings)
    model = DispatchModel(problem, carbon=True)
    x = seed_from_solution(model, seed)

    fixed = radial_directions(problem.network, model.T) if settings.prefix_radial else None
    if fixed is not None and fixed.any():
        logger.info(f"Radial pre-scan fixed {int(np.count_nonzero(fixed[0]))} branch direction(s)")
    dir_to = fixed if model.ac else None

    logger.info(f"Solving C-OPF ({problem.pf_model}, T={model.T}, {model.n} variables)")
    eps = settings.eps_start
    stage = "seed"
    result = None
    while eps >= settings.eps_end * (1 - 1e-9):
        stage = f"eps={eps:.0e}"
        result = solve_nlp(
            model.program(x, StageOptions(eps=eps, dir_from=fixed, dir_to=dir_to)),
            method=settings.method, max_iter=settings.max_iter,
            ftol=settings.ftol, tol_feas=settings.tol_feas,
        )
        x = result.x
        logger.info(
            f"Stage {stage}: objective {model.objective(x)[0]:.6g} $, "
            f"violation {result.violation:.2e}, {result.message}"
        )
        eps *= settings.eps_factor

    if settings.polish:
        x, stage, result = _polish(model, x, settings, stage, result)

    solution = solution_from_vector(model, x, stage, result)
    solution.residuals = evaluate_solution(problem, solution)
    if solution.residuals.failures(settings):
        _classify_failure(problem, stage, solution.residuals, result)
    if solution.kkt_residual > settings.tol_kkt:
        logger.warning(f"KKT residual {solution.kkt_residual:.2e} above {settings.tol_kkt:.0e} at stage {stage}")
        _classify_failure(problem, stage, solution.residuals, result)
    logger.info(f"C-OPF objective {solution.objective:.6g} $ ({solution.emissions_ton:.6g} ton)")
    return solution


def _polish(model: DispatchModel, x: np.ndarray, settings: SolverConfig, stage: str,
            result: Optional[NlpResult]):
    lay = model.layout
    dir_from = np.where(lay.get(x, "hf_fwd") >= lay.get(x, "hf_rev"), 1, -1)
    dir_to = np.where(lay.get(x, "ht_fwd") >= lay.get(x, "ht_rev"), 1, -1) if model.ac else None
    modes = np.where(lay.get(x, "pch") >= lay.get(x, "pdc"), 1, -1) if model.S else None
    polished = solve_nlp(
        model.program(x, StageOptions(eps=None, dir_from=dir_from, dir_to=dir_to, storage_modes=modes)),
        method=settings.method, max_iter=settings.max_iter,
        ftol=settings.ftol, tol_feas=settings.tol_feas,
    )
    if polished.violation <= settings.tol_feas:
        logger.info(f"Polish: objective {model.objective(polished.x)[0]:.6g} $")
        return polished.x, "polish", polished
    logger.warning(f"Polish left violation {polished.violation:.2e}; keeping stage {stage}")
    return x, stage, result


def _copf_point(problem: DispatchProblem, settings: SolverConfig,
                warm_start: Optional[DispatchSolution], cap: float) -> SweepPoint:
    try:
        solution = solve_copf(problem, settings, warm_start=warm_start)
    except Infeasible as e:
        return SweepPoint(cap, math.nan, math.nan, e.kind, str(e))
    except NoConvergence as e:
        return SweepPoint(cap, math.nan, math.nan, "no_convergence", str(e))
    return SweepPoint(cap, solution.objective, solution.emissions_ton, "optimal", solution=solution)


def _improves_on(point: SweepPoint, previous: SweepPoint) -> bool:
    """A looser cap must not raise the cost of an accepted point."""
    if point.status != "optimal":
        return False
    return point.cost <= previous.cost + SWEEP_COST_RTOL * max(1.0, abs(previous.cost))


def _better_point(first: SweepPoint, second: SweepPoint) -> SweepPoint:
    if first.status != "optimal":
        return second if second.status == "optimal" else first
    if second.status == "optimal" and second.cost < first.cost:
        return second
    return first


def sweep_cap(
    problem: DispatchProblem,
    caps: Sequence[float],
    settings: Optional[SolverConfig] = None,
    workers: Optional[int] = None,
    executor: Optional[str] = None,
) -> List[SweepPoint]:
    """
    Solve the C-OPF for a sequence of uniform nodal intensity caps.

    With one worker each point warm-starts from the previous accepted one
    and is re-solved from the OPF seed when that start fails or costs more
    than the tighter cap did; with more workers points fan out through the
    task queue, each seeded from the OPF solution. Per-point failures are
    recorded, not raised.

    Args:
        problem: Base problem; its nci caps are replaced per point
        caps: Ascending caps (ton/MWh)
        settings: Solver settings
        workers: Worker count; defaults to the runtime configuration
        executor: "thread" or "process"

    Returns:
        One SweepPoint per cap, in input order
    """
    caps = [float(c) for c in caps]
    if any(b < a for a, b in zip(caps, caps[1:])):
        raise ValueError("caps must be ascending")
    settings = settings or cfg().solver
    runtime = cfg().runtime
    workers = workers or runtime.workers
    executor = executor or runtime.executor

    baseline = solve_opf(problem, settings)
    problems = [problem.with_policy(problem.policy.with_uniform_cap(cap)) for cap in caps]

    if workers > 1 and len(caps) > 1:
        queue = TaskQueue()
        for k, (cap, sub) in enumerate(zip(caps, problems)):
            queue.add_task(k, _copf_point, sub, settings, baseline, cap)
        done = queue.run(workers=workers, executor=executor)
        points = []
        for k, cap in enumerate(caps):
            task = done[k]
            points.append(task.result if task.error is None
                          else SweepPoint(cap, math.nan, math.nan, "error", task.error))
    else:
        points = []
        previous: Optional[SweepPoint] = None
        for cap, sub in zip(caps, problems):
            seed = previous.solution if previous is not None else baseline
            point = _copf_point(sub, settings, seed, cap)
            if previous is not None and not _improves_on(point, previous):
                logger.info(f"Sweep cap {cap:.4g}: warm start gave {point.status}; re-solving from the OPF seed")
                point = _better_point(point, _copf_point(sub, settings, baseline, cap))
            points.append(point)
            if point.status == "optimal":
                previous = point

    for point in points:
        logger.info(f"Sweep cap {point.cap:.4g}: {point.status} cost {point.cost:.6g}")
    return points


def evaluate_solution(
    problem: DispatchProblem,
    solution: DispatchSolution,
) -> ResidualReport:
    """
    Recompute every constraint residual of a dispatch from physical quantities.

    Balances come from power_flow.nodal_mismatch, intensities are re-solved
    with carbon_flow on the fixed flows of each period.
    """
    network, grid = problem.network, problem.grid
    index = network.index()
    base = network.base_mva
    dt = grid.delta_t
    T = solution.periods
    report = ResidualReport(kkt=solution.kkt_residual)

    def bump(name: str, value: float):
        if np.isfinite(value):
            setattr(report, name, max(getattr(report, name), float(value)))

    es_kind = EsModelKind(problem.es_model)
    caps = problem.policy.nci_cap_matrix(index, T)
    for t in range(T):
        pf = solution.power_flow(network, t)
        dp, dq = nodal_mismatch(network, pf)
        bump("power_balance", np.max(np.abs(dp), initial=0.0))
        if solution.model == "ac":
            bump("reactive_balance", np.max(np.abs(dq), initial=0.0))

        from_signed = solution.p_hat_from_fwd[t] - solution.p_hat_from_rev[t]
        to_signed = solution.p_hat_to_fwd[t] - solution.p_hat_to_rev[t]
        bump("flow_linking", np.max(np.abs(from_signed - pf.p_from), initial=0.0) / base)
        bump("flow_linking", np.max(np.abs(to_signed - pf.p_to), initial=0.0) / base)
        for fwd, rev in ((solution.p_hat_from_fwd[t], solution.p_hat_from_rev[t]),
                         (solution.p_hat_to_fwd[t], solution.p_hat_to_rev[t])):
            bump("complementarity", np.max(fwd * rev, initial=0.0))
            bump("complementarity_min", np.max(np.minimum(fwd, rev), initial=0.0))
            bump("bound_violation", max(0.0, -np.min(fwd, initial=0.0), -np.min(rev, initial=0.0)) / base)

        for g, ref in enumerate(index.generators):
            p = solution.gen_p[t, g]
            bump("bound_violation", max(series_at(ref.unit.p_min, t) - p, p - series_at(ref.unit.p_max, t)) / base)
            if solution.model == "ac":
                q = solution.gen_q[t, g]
                bump("bound_violation",
                     max(series_at(ref.unit.q_min, t) - q, q - series_at(ref.unit.q_max, t)) / base)
            if t > 0:
                step = p - solution.gen_p[t - 1, g]
                bump("ramp_violation", max(ref.unit.ramp_down - step, step - ref.unit.ramp_up) / base)

        for i, bus in enumerate(network.buses):
            if solution.model == "ac":
                bump("bound_violation", max(bus.v_limits[0] - pf.vm[i], pf.vm[i] - bus.v_limits[1]))
            bump("bound_violation", max(bus.theta_limits[0] - pf.va[i], pf.va[i] - bus.theta_limits[1]))

        finite = np.isfinite(index.s_max)
        if finite.any():
            if solution.model == "ac":
                for p, q in ((pf.p_from, pf.q_from), (pf.p_to, pf.q_to)):
                    s = np.hypot(p[finite], q[finite]) / base
                    bump("thermal_violation", np.max(s - index.s_max[finite]))
            else:
                bump("thermal_violation", np.max(np.abs(pf.p_from[finite]) / base - index.s_max[finite]))

        for s, ref in enumerate(index.storage):
            unit = ref.unit
            ch, dc = solution.storage_ch[t, s], solution.storage_dc[t, s]
            e_now, e_next = solution.storage_e[t, s], solution.storage_e[t + 1, s]
            bump("energy_dynamics",
                 abs(e_next - unit.kappa * e_now - dt * (unit.eta_ch * ch - dc / unit.eta_dc)) / base)
            bump("bound_violation", max(-ch, -dc, ch - unit.p_ch_max, dc - unit.p_dc_max) / base)
            bump("bound_violation", max(unit.e_min - e_next, e_next - unit.e_max) / base)
            bump("simultaneous_storage", min(ch, dc))
            if solution.carbon and es_kind == EsModelKind.WATER_TANK:
                w_now, w_next = solution.storage_w_es[t, s], solution.storage_w_es[t + 1, s]
                retained = unit.kappa * e_now
                charged = dt * unit.eta_ch * ch
                w_node = solution.w[t, ref.bus_pos]
                bump("storage_intensity",
                     abs(w_next * (retained + charged) - retained * w_now - charged * w_node) / base)

        if solution.carbon:
            _carbon_residuals(problem, solution, pf, t, caps[t], report, bump)

    for s, ref in enumerate(index.storage):
        bump("energy_dynamics", abs(solution.storage_e[0, s] - ref.unit.e_init) / base)
        bump("energy_dynamics", abs(solution.storage_e[T, s] - ref.unit.e_init) / base)

    if solution.carbon:
        _horizon_cap_residuals(problem, solution, report, bump)
    return report


def _carbon_residuals(problem, solution, pf, t, caps_t, report, bump):
    network = problem.network
    es_kind = EsModelKind(problem.es_model)
    w_es = solution.storage_w_es[t] if es_kind == EsModelKind.WATER_TANK else None
    try:
        matrices = build_matrices(network, pf, period=t, es_kind=es_kind, w_es=w_es)
    except PowerFlowError as e:
        report.carbon_feasible = False
        report.notes.append(f"period {t}: {e}")
        return

    w = solution.w[t]
    active = matrices.active
    if active.size:
        lhs = matrices.p_c[np.ix_(active, active)] @ w[active]
        rhs = matrices.r_g[active]
        bump("carbon_flow", np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))))

    verdict = check_feasibility(matrices)
    if verdict.feasible:
        try:
            recomputed = solve_carbon_flow(matrices)
            if active.size:
                bump("intensity_recompute", np.max(np.abs(recomputed[active] - w[active])))
        except CarbonFlowError as e:
            report.carbon_feasible = False
            report.notes.append(f"period {t}: {e}")
    else:
        report.carbon_feasible = False
        report.notes.append(f"period {t}: carbon flow {verdict.status.value}")

    finite = np.isfinite(caps_t)
    if finite.any():
        excess = w[finite] - caps_t[finite]
        if problem.policy.soft:
            excess = excess - solution.slack_nci[t][finite]
        bump("cap_violation", np.max(excess))


def _horizon_cap_residuals(problem, solution, report, bump):
    index = problem.network.index()
    dt, T = problem.grid.delta_t, solution.periods
    soft = problem.policy.soft
    keys = [ref.key for ref in index.loads]
    for key, cap in problem.policy.user_cap.items():
        l = keys.index(key)
        bus = index.loads[l].bus_pos
        emitted = sum(dt * solution.w[t, bus] * index.load_p(t)[l] for t in range(T))
        slack = solution.slack_user[l] if soft else 0.0
        bump("cap_violation", (emitted - cap - slack) / max(1.0, cap))
    for bus_id, cap in problem.policy.node_cap.items():
        i = index.position[bus_id]
        emitted = sum(dt * solution.w[t, i] * index.bus_load_p(t)[i] for t in range(T))
        slack = solution.slack_node[i] if soft else 0.0
        bump("cap_violation", (emitted - cap - slack) / max(1.0, cap))
