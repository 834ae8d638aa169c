"""
Carbon flow module for the carbon-aware OPF toolkit.

Builds and solves the carbon flow equations of one period: nodal carbon
intensities from proportional sharing, branch/load/loss carbon flow rates,
the diagonal-dominance feasibility check and a fixed-point oracle.
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from core.flow_graph import FlowGraph
from core.model import Network, NetworkIndex
from core.power_flow import ImplausibleFlow, PowerFlowSolution
from core.storage_carbon import EsModelKind

logger = logging.getLogger(__name__)

ZERO_FLOW_MW = 1e-9
SINGULAR_CONDITION = 1e12


class CarbonFlowError(Exception):
    """Base class for carbon flow failures."""
    pass


class SingularMatrix(CarbonFlowError):
    """Raised when the carbon flow matrix cannot be factorized."""
    pass


class NegativeIntensity(CarbonFlowError):
    """Raised when a solved nodal intensity is clearly negative."""
    pass


class UnsuppliedLoad(CarbonFlowError):
    """Raised when a node has demand but no power inflow."""
    pass


class NoConvergence(CarbonFlowError):
    """Raised when the fixed-point oracle exhausts its iterations."""
    pass


class CarbonFlowInfeasible(CarbonFlowError):
    """Raised when the flow pattern fails the feasibility check."""

    def __init__(self, verdict: "FeasibilityVerdict"):
        self.verdict = verdict
        super().__init__(f"carbon flow infeasible: {verdict.status.value}")


class FeasibilityStatus(Enum):
    """Outcome of check_feasibility."""
    FEASIBLE = "feasible"
    CONDITION_FAILED = "condition_failed"
    UNSUPPLIED_LOAD = "unsupplied_load"


@dataclass(frozen=True)
class CarbonFlowMatrices:
    """
    Matrix form of the carbon flow equations for one period.

    Attributes:
        bus_ids: Bus id per row
        p_n: Nodal power inflow P^in (MW), the diagonal of P_N
        p_b: Inflow matrix, p_b[i, k] = power received at i from k (MW)
        r_g: Nodal carbon injection from generators and discharge (ton/h)
        demand: Nodal outflow: loads, charging and power sent (MW)
        period: Period index the matrices describe
        discharge_w: Intensity assigned to each storage unit's discharge
    """
    bus_ids: Tuple[int, ...]
    p_n: np.ndarray
    p_b: np.ndarray
    r_g: np.ndarray
    demand: np.ndarray
    period: int = 0
    discharge_w: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_arrays(cls, p_n, p_b, r_g, bus_ids: Optional[Sequence[int]] = None,
                    demand=None) -> "CarbonFlowMatrices":
        """Build matrices directly; demand defaults to the inflow (balanced nodes)."""
        p_n = np.asarray(p_n, dtype=float)
        n = p_n.size
        return cls(
            bus_ids=tuple(bus_ids) if bus_ids is not None else tuple(range(1, n + 1)),
            p_n=p_n,
            p_b=np.asarray(p_b, dtype=float).reshape(n, n),
            r_g=np.asarray(r_g, dtype=float),
            demand=p_n.copy() if demand is None else np.asarray(demand, dtype=float),
        )

    @property
    def p_c(self) -> np.ndarray:
        """P_C = P_N - P_B."""
        return np.diag(self.p_n) - self.p_b

    @property
    def excluded(self) -> FrozenSet[int]:
        """Rows with neither inflow nor demand; their intensity is defined as 0."""
        return frozenset(
            i for i in range(self.p_n.size)
            if self.p_n[i] <= ZERO_FLOW_MW and self.demand[i] <= ZERO_FLOW_MW
        )

    @property
    def unsupplied(self) -> FrozenSet[int]:
        """Rows with demand but no inflow."""
        return frozenset(
            i for i in range(self.p_n.size)
            if self.p_n[i] <= ZERO_FLOW_MW < self.demand[i]
        )

    @property
    def dominant(self) -> FrozenSet[int]:
        """Strictly diagonally dominant rows of P_C."""
        off = self.p_b.sum(axis=1) - np.diag(self.p_b)
        margin = self.p_n - off
        return frozenset(
            i for i in range(self.p_n.size)
            if margin[i] > 1e-12 * max(1.0, self.p_n[i])
        )

    @property
    def active(self) -> np.ndarray:
        excluded = self.excluded
        return np.array([i for i in range(self.p_n.size) if i not in excluded], dtype=int)


@dataclass
class FeasibilityVerdict:
    """Result of the reachability check on a carbon flow matrix."""
    status: FeasibilityStatus
    dominant: List[int] = field(default_factory=list)
    stranded: List[int] = field(default_factory=list)
    unsupplied: List[int] = field(default_factory=list)
    witness_paths: Dict[int, List[int]] = field(default_factory=dict)
    circulating_loops: List[List[int]] = field(default_factory=list)
    numerically_singular: bool = False
    condition_number: float = 1.0

    @property
    def feasible(self) -> bool:
        return self.status == FeasibilityStatus.FEASIBLE

    def to_dict(self) -> Dict:
        return {
            "status": self.status.value,
            "dominant": self.dominant,
            "stranded": self.stranded,
            "unsupplied": self.unsupplied,
            "witness_paths": {str(k): v for k, v in self.witness_paths.items()},
            "circulating_loops": self.circulating_loops,
            "numerically_singular": self.numerically_singular,
            "condition_number": self.condition_number,
        }


@dataclass(frozen=True)
class CarbonFlowSolution:
    """
    Carbon flow rates of one period.

    Intensities are in ton/MWh and rates in ton/h. Branch rates carry the sign
    of the corresponding power flow.
    """
    bus_ids: Tuple[int, ...]
    w: np.ndarray
    r_branch_from: np.ndarray
    r_branch_to: np.ndarray
    r_loss: np.ndarray
    r_load: np.ndarray
    r_gen: np.ndarray
    r_es_charge: np.ndarray
    r_es_discharge: np.ndarray
    storage_ch: np.ndarray = field(default_factory=lambda: np.zeros(0))
    storage_dc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    branch_keys: Tuple[str, ...] = ()
    load_keys: Tuple[str, ...] = ()
    gen_keys: Tuple[str, ...] = ()
    storage_keys: Tuple[str, ...] = ()
    period: int = 0


def _branch_direction(p_from: float, p_to: float, zero_mw: float) -> int:
    """+1 for from->to, -1 for to->from, 0 for zero flow."""
    if abs(p_from) <= zero_mw and abs(p_to) <= zero_mw:
        return 0
    if p_from * p_to < 0 and min(abs(p_from), abs(p_to)) > zero_mw:
        raise ImplausibleFlow(
            f"branch ends disagree on direction (from {p_from:.6g} MW, to {p_to:.6g} MW)"
        )
    lead = p_from if abs(p_from) > zero_mw else p_to
    return 1 if lead > 0 else -1


def build_matrices(
    network: Network,
    pf: PowerFlowSolution,
    period: int = 0,
    es_kind: EsModelKind = EsModelKind.WATER_TANK,
    w_es: Optional[Sequence[float]] = None,
    zero_flow_mw: float = ZERO_FLOW_MW,
) -> CarbonFlowMatrices:
    """
    Assemble P_N, P_B and r_G from a power flow solution.

    Receiving-end flows fill P_B. Discharging storage enters the inflow; its
    carbon enters r_G at w_es under the water-tank model and at zero under
    the load/clean generator model. Charging is demand.

    Args:
        network: Network description
        pf: Power flow state of the period
        period: Period index recorded on the matrices
        es_kind: Storage carbon model
        w_es: Internal intensity per storage unit; defaults to each unit's w_es_init
        zero_flow_mw: Flows at or below this magnitude count as zero

    Returns:
        CarbonFlowMatrices

    Raises:
        ImplausibleFlow: If the two ends of a branch disagree on direction
    """
    index = network.index()
    n = index.n_bus
    p_b = np.zeros((n, n))
    sent = np.zeros(n)
    for k in range(index.n_branch):
        f, t = index.branch_from[k], index.branch_to[k]
        direction = _branch_direction(pf.p_from[k], pf.p_to[k], zero_flow_mw)
        if direction > 0:
            p_b[t, f] += max(pf.p_to[k], 0.0)
            sent[f] += max(pf.p_from[k], 0.0)
        elif direction < 0:
            p_b[f, t] += max(-pf.p_from[k], 0.0)
            sent[t] += max(-pf.p_to[k], 0.0)

    gen_p = np.asarray(pf.gen_p, dtype=float)
    supplied = np.maximum(gen_p, 0.0)
    p_n = p_b.sum(axis=1)
    r_g = np.zeros(n)
    demand = sent.copy()
    if index.generators:
        np.add.at(p_n, index.gen_bus, supplied)
        np.add.at(r_g, index.gen_bus, index.emission_factors * supplied)
        np.add.at(demand, index.gen_bus, np.maximum(-gen_p, 0.0))
    if index.loads:
        np.add.at(demand, index.load_bus, pf.load_p)

    if w_es is None:
        w_es = [ref.unit.w_es_init for ref in index.storage]
    w_es = np.asarray(w_es, dtype=float)
    discharge_w = np.zeros(len(index.storage)) if es_kind == EsModelKind.LOAD_CLEAN_GEN else w_es
    if index.storage:
        np.add.at(p_n, index.storage_bus, pf.storage_dc)
        np.add.at(r_g, index.storage_bus, discharge_w * pf.storage_dc)
        np.add.at(demand, index.storage_bus, pf.storage_ch)

    return CarbonFlowMatrices(
        bus_ids=tuple(index.bus_ids),
        p_n=p_n,
        p_b=p_b,
        r_g=r_g,
        demand=demand,
        period=period,
        discharge_w=discharge_w,
    )


def check_feasibility(matrices: CarbonFlowMatrices) -> FeasibilityVerdict:
    """
    Check that every non-dominant row reaches a dominant row.

    Rows with no inflow and no demand are left out. A row with demand but no
    inflow makes the instance infeasible outright.

    Args:
        matrices: Carbon flow matrices of one period

    Returns:
        FeasibilityVerdict with witness paths or the stranded node set
    """
    labels = list(matrices.bus_ids)
    dominant = matrices.dominant
    excluded = matrices.excluded
    unsupplied = matrices.unsupplied

    graph = FlowGraph.from_inflow_matrix(matrices.p_b, labels)
    dominant_labels = {labels[i] for i in dominant}
    reaching = graph.reaching(dominant_labels)
    stranded = [
        labels[i] for i in range(len(labels))
        if i not in excluded and i not in unsupplied and labels[i] not in reaching
    ]
    paths = graph.witness_paths(dominant_labels)
    verdict = FeasibilityVerdict(
        status=FeasibilityStatus.FEASIBLE,
        dominant=sorted(dominant_labels),
        stranded=sorted(stranded),
        unsupplied=sorted(labels[i] for i in unsupplied),
        witness_paths={label: paths[label] for label in labels if label in paths},
        circulating_loops=graph.circulating_loops(),
    )

    if unsupplied:
        verdict.status = FeasibilityStatus.UNSUPPLIED_LOAD
    elif stranded:
        verdict.status = FeasibilityStatus.CONDITION_FAILED

    if not verdict.feasible:
        active = matrices.active
        sub = matrices.p_c[np.ix_(active, active)]
        verdict.condition_number = float(np.linalg.cond(sub)) if active.size else np.inf
        verdict.numerically_singular = not verdict.condition_number < SINGULAR_CONDITION
        logger.info(
            f"Carbon flow infeasible ({verdict.status.value}): stranded={verdict.stranded} "
            f"unsupplied={verdict.unsupplied} cond={verdict.condition_number:.3e}"
        )
    return verdict


def solve(matrices: CarbonFlowMatrices) -> np.ndarray:
    """
    Solve P_C w = r_G by dense LU with partial pivoting.

    Args:
        matrices: Carbon flow matrices that passed check_feasibility

    Returns:
        Nodal intensities per row (ton/MWh); excluded rows get 0

    Raises:
        UnsuppliedLoad: If a node has demand without inflow
        SingularMatrix: If the factorization breaks down or the residual is off
        NegativeIntensity: If some intensity is below -1e-9
    """
    if matrices.unsupplied:
        labels = sorted(matrices.bus_ids[i] for i in matrices.unsupplied)
        raise UnsuppliedLoad(f"load without supply at buses {labels}")

    n = matrices.p_n.size
    w = np.zeros(n)
    active = matrices.active
    if active.size == 0:
        return w

    a = matrices.p_c[np.ix_(active, active)]
    rhs = matrices.r_g[active]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(a)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= 1e-14 * max(1.0, pivots.max()):
        raise SingularMatrix("carbon flow matrix is singular")
    w_active = linalg.lu_solve((lu, piv), rhs)

    residual = np.max(np.abs(a @ w_active - rhs))
    scale = max(1.0, float(np.max(np.abs(rhs))))
    if not np.all(np.isfinite(w_active)) or residual > 1e-10 * scale * max(1.0, np.abs(a).max()):
        raise SingularMatrix(f"carbon flow solve residual {residual:.3e} too large")

    if w_active.min() < -1e-9:
        raise NegativeIntensity(f"negative nodal intensity {w_active.min():.3e}")
    w[active] = np.maximum(w_active, 0.0)
    return w


def solve_fixed_point_oracle(
    matrices: CarbonFlowMatrices,
    tol: float = 1e-13,
    max_iter: int = 1_000_000,
) -> np.ndarray:
    """
    Iterate w <- P_N^-1 (r_G + P_B w) until the update falls below tol.

    Independent cross-check of solve(); excluded rows stay at zero.

    Raises:
        NoConvergence: After max_iter iterations
    """
    active = matrices.active
    w = np.zeros(matrices.p_n.size)
    if active.size == 0:
        return w
    p_n = matrices.p_n[active]
    p_b = matrices.p_b[np.ix_(active, active)]
    r_g = matrices.r_g[active]
    x = np.zeros(active.size)
    for iteration in range(1, max_iter + 1):
        x_next = (r_g + p_b @ x) / p_n
        change = np.max(np.abs(x_next - x))
        x = x_next
        if change <= tol * max(1.0, np.max(np.abs(x))):
            logger.debug(f"Fixed-point oracle converged in {iteration} iterations")
            w[active] = x
            return w
    raise NoConvergence(f"fixed-point iteration did not converge in {max_iter} iterations")


def attribute(
    matrices: CarbonFlowMatrices,
    w: np.ndarray,
    network: Network,
    pf: PowerFlowSolution,
    zero_flow_mw: float = ZERO_FLOW_MW,
) -> CarbonFlowSolution:
    """
    Carbon flow rates from intensities by proportional sharing.

    Each branch carries the intensity of its sending bus at both ends and in
    its loss; loads and charging take their bus intensity; generators emit at
    their own factor; discharge carries the model-dependent intensity.
    """
    index: NetworkIndex = network.index()
    w_send = np.zeros(index.n_branch)
    for k in range(index.n_branch):
        direction = _branch_direction(pf.p_from[k], pf.p_to[k], zero_flow_mw)
        if direction > 0:
            w_send[k] = w[index.branch_from[k]]
        elif direction < 0:
            w_send[k] = w[index.branch_to[k]]

    storage_w = w[index.storage_bus] if index.storage else np.zeros(0)
    discharge_w = matrices.discharge_w if matrices.discharge_w.size else np.zeros(len(index.storage))
    return CarbonFlowSolution(
        bus_ids=tuple(index.bus_ids),
        w=np.asarray(w, dtype=float),
        r_branch_from=w_send * pf.p_from,
        r_branch_to=w_send * pf.p_to,
        r_loss=w_send * pf.p_loss,
        r_load=w[index.load_bus] * pf.load_p if index.loads else np.zeros(0),
        r_gen=index.emission_factors * pf.gen_p if index.generators else np.zeros(0),
        r_es_charge=storage_w * pf.storage_ch,
        r_es_discharge=discharge_w * pf.storage_dc,
        storage_ch=np.asarray(pf.storage_ch, dtype=float),
        storage_dc=np.asarray(pf.storage_dc, dtype=float),
        branch_keys=tuple(index.branch_keys),
        load_keys=tuple(ref.key for ref in index.loads),
        gen_keys=tuple(ref.key for ref in index.generators),
        storage_keys=tuple(ref.key for ref in index.storage),
        period=matrices.period,
    )


def nodal_conservation(network: Network, cf: CarbonFlowSolution) -> np.ndarray:
    """
    Relative carbon imbalance per node: (inflow - outflow) / max(1, inflow).

    Inflow counts received branch carbon, generation and discharge; outflow
    counts sent branch carbon, loads and charging.
    """
    index = network.index()
    inflow = np.zeros(index.n_bus)
    outflow = np.zeros(index.n_bus)
    f, t = index.branch_from, index.branch_to
    np.add.at(outflow, f, np.maximum(cf.r_branch_from, 0.0))
    np.add.at(inflow, t, np.maximum(cf.r_branch_to, 0.0))
    np.add.at(outflow, t, np.maximum(-cf.r_branch_to, 0.0))
    np.add.at(inflow, f, np.maximum(-cf.r_branch_from, 0.0))
    if index.generators:
        np.add.at(inflow, index.gen_bus, cf.r_gen)
    if index.loads:
        np.add.at(outflow, index.load_bus, cf.r_load)
    if index.storage:
        np.add.at(inflow, index.storage_bus, cf.r_es_discharge)
        np.add.at(outflow, index.storage_bus, cf.r_es_charge)
    return (inflow - outflow) / np.maximum(1.0, inflow)


def compute_carbon_flow(
    network: Network,
    pf: PowerFlowSolution,
    period: int = 0,
    es_kind: EsModelKind = EsModelKind.WATER_TANK,
    w_es: Optional[Sequence[float]] = None,
) -> CarbonFlowSolution:
    """
    Build, check, solve and attribute in one call.

    Raises:
        CarbonFlowInfeasible: If the feasibility check fails
    """
    matrices = build_matrices(network, pf, period=period, es_kind=es_kind, w_es=w_es)
    verdict = check_feasibility(matrices)
    if not verdict.feasible:
        raise CarbonFlowInfeasible(verdict)
    w = solve(matrices)
    return attribute(matrices, w, network, pf)
