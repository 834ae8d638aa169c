"""
Power flow module for the carbon-aware OPF toolkit.

DC and full AC power flow, both-end branch flows and losses, and the split of
signed flows into nonnegative forward/reverse pairs.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import networkx as nx
import numpy as np
from scipy import linalg

from config import PowerFlowConfig, cfg
from core.model import Network, NetworkIndex

logger = logging.getLogger(__name__)


class PowerFlowError(Exception):
    """Base class for power flow failures."""
    pass


class SingularSystem(PowerFlowError):
    """Raised when the network equations cannot be solved (e.g. disconnected grid)."""
    pass


class NoConvergence(PowerFlowError):
    """Raised when Newton-Raphson does not reach the mismatch tolerance."""

    def __init__(self, iterations: int, mismatch: float):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(
            f"Newton-Raphson did not converge after {iterations} iterations "
            f"(mismatch {mismatch:.3e} p.u.)"
        )


class ImplausibleFlow(PowerFlowError):
    """Raised when the two ends of a branch disagree on the flow direction."""
    pass


@dataclass
class Dispatch:
    """
    Device setpoints for one period (MW / MVAr).

    Attributes:
        gen_p: Generator active power, ordered as NetworkIndex.generators
        gen_q: Generator reactive power
        load_p: Load active power, ordered as NetworkIndex.loads
        load_q: Load reactive power
        storage_ch: Storage charging power, ordered as NetworkIndex.storage
        storage_dc: Storage discharging power
        v_set: Voltage magnitude setpoints by bus id; non-slack entries make PV buses
    """
    gen_p: np.ndarray
    gen_q: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    storage_ch: np.ndarray
    storage_dc: np.ndarray
    v_set: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def for_period(
        cls,
        network: Network,
        t: int,
        gen_p=None,
        gen_q=None,
        storage_ch=None,
        storage_dc=None,
        v_set: Optional[Dict[int, float]] = None,
    ) -> "Dispatch":
        """Dispatch with loads taken from the network at period t; missing setpoints are zero."""
        index = network.index()
        n_g, n_s = len(index.generators), len(index.storage)

        def _arr(value, n):
            return np.zeros(n) if value is None else np.asarray(value, dtype=float).copy()

        return cls(
            gen_p=_arr(gen_p, n_g),
            gen_q=_arr(gen_q, n_g),
            load_p=index.load_p(t),
            load_q=index.load_q(t),
            storage_ch=_arr(storage_ch, n_s),
            storage_dc=_arr(storage_dc, n_s),
            v_set=dict(v_set or {}),
        )

    def bus_injections(self, index: NetworkIndex) -> Tuple[np.ndarray, np.ndarray]:
        """Net active and reactive injection per bus (MW, MVAr)."""
        p = np.zeros(index.n_bus)
        q = np.zeros(index.n_bus)
        if index.generators:
            np.add.at(p, index.gen_bus, self.gen_p)
            np.add.at(q, index.gen_bus, self.gen_q)
        if index.loads:
            np.add.at(p, index.load_bus, -self.load_p)
            np.add.at(q, index.load_bus, -self.load_q)
        if index.storage:
            np.add.at(p, index.storage_bus, self.storage_dc - self.storage_ch)
        return p, q


@dataclass(frozen=True)
class PowerFlowSolution:
    """
    Power flow state for one period.

    Flows are in MW/MVAr. p_from is P^i_ij measured at the from-bus (positive
    when leaving it); p_to is P^j_ij measured at the to-bus (positive when
    arriving there).
    """
    model: str
    bus_ids: Tuple[int, ...]
    vm: np.ndarray
    va: np.ndarray
    p_from: np.ndarray
    p_to: np.ndarray
    q_from: np.ndarray
    q_to: np.ndarray
    p_loss: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    storage_ch: np.ndarray
    storage_dc: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    def scaled(self, s: float) -> "PowerFlowSolution":
        """Copy with every power quantity multiplied by s (voltages unchanged)."""
        return PowerFlowSolution(
            model=self.model, bus_ids=self.bus_ids, vm=self.vm, va=self.va,
            p_from=self.p_from * s, p_to=self.p_to * s,
            q_from=self.q_from * s, q_to=self.q_to * s, p_loss=self.p_loss * s,
            gen_p=self.gen_p * s, gen_q=self.gen_q * s,
            load_p=self.load_p * s, load_q=self.load_q * s,
            storage_ch=self.storage_ch * s, storage_dc=self.storage_dc * s,
            iterations=self.iterations, mismatch=self.mismatch,
        )


@dataclass(frozen=True)
class DualFlowPair:
    """Nonnegative forward/reverse flows measured at one branch end (MW)."""
    p_hat_fwd: np.ndarray
    p_hat_rev: np.ndarray

    @property
    def signed(self) -> np.ndarray:
        return self.p_hat_fwd - self.p_hat_rev

    @property
    def max_product(self) -> float:
        prod = self.p_hat_fwd * self.p_hat_rev
        return float(prod.max()) if prod.size else 0.0


@dataclass(frozen=True)
class BranchDualFlows:
    """Dual flow pairs at both ends of every branch."""
    from_end: DualFlowPair
    to_end: DualFlowPair


def dc_branch_flows(va: np.ndarray, index: NetworkIndex) -> np.ndarray:
    """DC branch flows P_ij = -b_ij (theta_i - theta_j) in p.u."""
    return -index.b * (va[index.branch_from] - va[index.branch_to])


def ac_branch_flows(
    vm: np.ndarray, va: np.ndarray, index: NetworkIndex
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Both-end AC branch flows in p.u.

    Returns:
        (P^i_ij, P^j_ij, Q^i_ij, Q^j_ij) where the to-end values are the flow
        from i to j as it arrives at j.
    """
    f, t, g, b = index.branch_from, index.branch_to, index.g, index.b
    vf, vt = vm[f], vm[t]
    d = va[f] - va[t]
    c, s = np.cos(d), np.sin(d)
    vv = vf * vt
    pf = (vf ** 2 - vv * c) * g - vv * s * b
    pt = -(vt ** 2 - vv * c) * g - vv * s * b
    qf = (vv * c - vf ** 2) * b - vv * s * g
    qt = -(vv * c - vt ** 2) * b - vv * s * g
    return pf, pt, qf, qt


def ac_branch_flow_partials(
    vm: np.ndarray, va: np.ndarray, index: NetworkIndex
) -> Dict[str, Dict[str, np.ndarray]]:
    """
    Partial derivatives of ac_branch_flows.

    Returns:
        Nested dict ``partials[quantity][variable]`` with quantity in
        {pf, pt, qf, qt} and variable in {vf, vt, af, at} (per branch arrays).
    """
    f, t, g, b = index.branch_from, index.branch_to, index.g, index.b
    vf, vt = vm[f], vm[t]
    d = va[f] - va[t]
    c, s = np.cos(d), np.sin(d)
    vv = vf * vt
    pf_a = vv * s * g - vv * c * b
    pt_a = -vv * s * g - vv * c * b
    qf_a = -vv * s * b - vv * c * g
    qt_a = vv * s * b - vv * c * g
    return {
        "pf": {"vf": 2 * vf * g - vt * c * g - vt * s * b,
               "vt": -vf * c * g - vf * s * b, "af": pf_a, "at": -pf_a},
        "pt": {"vf": vt * c * g - vt * s * b,
               "vt": -2 * vt * g + vf * c * g - vf * s * b, "af": pt_a, "at": -pt_a},
        "qf": {"vf": vt * c * b - 2 * vf * b - vt * s * g,
               "vt": vf * c * b - vf * s * g, "af": qf_a, "at": -qf_a},
        "qt": {"vf": -vt * c * b - vt * s * g,
               "vt": -vf * c * b + 2 * vt * b - vf * s * g, "af": qt_a, "at": -qt_a},
    }


def nodal_mismatch(network: Network, solution: PowerFlowSolution) -> Tuple[np.ndarray, np.ndarray]:
    """
    Re-evaluate nodal balance from voltages and device powers.

    Uses the branch formulas directly, independent of the solver path.

    Returns:
        Active and reactive mismatch per bus (p.u.)
    """
    index = network.index()
    base = network.base_mva
    dispatch = Dispatch(
        gen_p=solution.gen_p, gen_q=solution.gen_q,
        load_p=solution.load_p, load_q=solution.load_q,
        storage_ch=solution.storage_ch, storage_dc=solution.storage_dc,
    )
    p_inj, q_inj = dispatch.bus_injections(index)
    out_p = np.zeros(index.n_bus)
    out_q = np.zeros(index.n_bus)
    if solution.model == "dc":
        flow = dc_branch_flows(solution.va, index)
        np.add.at(out_p, index.branch_from, flow)
        np.add.at(out_p, index.branch_to, -flow)
        return p_inj / base - out_p, np.zeros(index.n_bus)
    pf, pt, qf, qt = ac_branch_flows(solution.vm, solution.va, index)
    np.add.at(out_p, index.branch_from, pf)
    np.add.at(out_p, index.branch_to, -pt)
    np.add.at(out_q, index.branch_from, qf)
    np.add.at(out_q, index.branch_to, -qt)
    return p_inj / base - out_p, q_inj / base - out_q


def _empty_dispatch(index: NetworkIndex) -> Dispatch:
    return Dispatch(
        gen_p=np.zeros(len(index.generators)), gen_q=np.zeros(len(index.generators)),
        load_p=np.zeros(len(index.loads)), load_q=np.zeros(len(index.loads)),
        storage_ch=np.zeros(len(index.storage)), storage_dc=np.zeros(len(index.storage)),
    )


def solve_dc(
    network: Network,
    injections,
    dispatch: Optional[Dispatch] = None,
) -> PowerFlowSolution:
    """
    Solve the DC power flow B theta = p with the slack angle fixed at zero.

    Args:
        network: Network description
        injections: Net active injection per bus (MW), ordered as network.buses
        dispatch: Optional device setpoints recorded on the solution

    Returns:
        Lossless PowerFlowSolution

    Raises:
        SingularSystem: If the network is disconnected or B is singular
        ValueError: If the injections do not sum to zero
    """
    index = network.index()
    p = np.asarray(injections, dtype=float) / network.base_mva
    if p.shape != (index.n_bus,):
        raise ValueError(f"expected {index.n_bus} injections, got {p.shape}")
    if abs(p.sum()) > 1e-9 * max(1.0, np.abs(p).sum()):
        raise ValueError(f"DC injections must sum to zero (sum {p.sum() * network.base_mva:.3e} MW)")
    if index.n_bus > 1 and not nx.is_connected(network.to_graph()):
        raise SingularSystem("network is disconnected")

    bp = np.zeros((index.n_bus, index.n_bus))
    np.add.at(bp, (index.branch_from, index.branch_from), -index.b)
    np.add.at(bp, (index.branch_to, index.branch_to), -index.b)
    np.add.at(bp, (index.branch_from, index.branch_to), index.b)
    np.add.at(bp, (index.branch_to, index.branch_from), index.b)

    keep = np.array([k for k in range(index.n_bus) if k != index.slack_pos], dtype=int)
    va = np.zeros(index.n_bus)
    if keep.size:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", linalg.LinAlgWarning)
                va[keep] = linalg.solve(bp[np.ix_(keep, keep)], p[keep])
        except (linalg.LinAlgError, linalg.LinAlgWarning) as e:
            raise SingularSystem(f"DC susceptance matrix is singular: {e}")

    flow = dc_branch_flows(va, index) * network.base_mva
    dispatch = dispatch or _empty_dispatch(index)
    return PowerFlowSolution(
        model="dc",
        bus_ids=tuple(index.bus_ids),
        vm=np.ones(index.n_bus),
        va=va,
        p_from=flow,
        p_to=flow.copy(),
        q_from=np.zeros(index.n_branch),
        q_to=np.zeros(index.n_branch),
        p_loss=np.zeros(index.n_branch),
        gen_p=np.asarray(dispatch.gen_p, dtype=float),
        gen_q=np.zeros(len(index.generators)),
        load_p=np.asarray(dispatch.load_p, dtype=float),
        load_q=np.asarray(dispatch.load_q, dtype=float),
        storage_ch=np.asarray(dispatch.storage_ch, dtype=float),
        storage_dc=np.asarray(dispatch.storage_dc, dtype=float),
    )


def build_ybus(index: NetworkIndex) -> np.ndarray:
    """Dense complex bus admittance matrix from series branch admittances."""
    y = index.g + 1j * index.b
    ybus = np.zeros((index.n_bus, index.n_bus), dtype=complex)
    np.add.at(ybus, (index.branch_from, index.branch_from), y)
    np.add.at(ybus, (index.branch_to, index.branch_to), y)
    np.add.at(ybus, (index.branch_from, index.branch_to), -y)
    np.add.at(ybus, (index.branch_to, index.branch_from), -y)
    return ybus


def _power_jacobian(ybus: np.ndarray, v: np.ndarray, pvpq: np.ndarray, pq: np.ndarray) -> np.ndarray:
    ibus = ybus @ v
    diag_v = np.diag(v)
    diag_vnorm = np.diag(v / np.abs(v))
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.diag(np.conj(ibus)) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - ybus @ diag_v)
    return np.block([
        [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
        [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
    ])


def solve_ac(
    network: Network,
    dispatch: Dispatch,
    warm_start: Optional[PowerFlowSolution] = None,
    settings: Optional[PowerFlowConfig] = None,
) -> PowerFlowSolution:
    """
    Newton-Raphson AC power flow.

    The slack bus holds its voltage at angle zero; buses with a v_set entry are
    PV buses; all others are PQ. After convergence the slack generators absorb
    the active mismatch and slack/PV generators share the reactive mismatch.

    Args:
        network: Network description
        dispatch: Setpoints for the period
        warm_start: Optional previous solution used instead of a flat start
        settings: Tolerance, iteration limit and damping

    Returns:
        PowerFlowSolution with both-end flows and losses

    Raises:
        NoConvergence: If the mismatch stays above tolerance after max_iter steps
        SingularSystem: If the Newton Jacobian is singular
    """
    settings = settings or cfg().power_flow
    index = network.index()
    base = network.base_mva
    ybus = build_ybus(index)

    ref = index.slack_pos
    pv = np.array(sorted(
        index.position[bus_id] for bus_id in dispatch.v_set
        if bus_id in index.position and index.position[bus_id] != ref
    ), dtype=int)
    pq = np.array([k for k in range(index.n_bus) if k != ref and k not in set(pv)], dtype=int)
    pvpq = np.r_[pv, pq].astype(int)
    n_pvpq = len(pvpq)

    p_inj, q_inj = dispatch.bus_injections(index)
    s_spec = (p_inj + 1j * q_inj) / base

    if warm_start is not None:
        vm = np.array(warm_start.vm, dtype=float)
        va = np.array(warm_start.va, dtype=float)
    else:
        vm = np.ones(index.n_bus)
        va = np.zeros(index.n_bus)
    for bus_id, v in dispatch.v_set.items():
        if bus_id in index.position:
            vm[index.position[bus_id]] = v
    va[ref] = 0.0
    v = vm * np.exp(1j * va)

    def mismatch(volt: np.ndarray) -> np.ndarray:
        mis = volt * np.conj(ybus @ volt) - s_spec
        return np.r_[mis[pvpq].real, mis[pq].imag]

    f_vec = mismatch(v)
    norm = float(np.max(np.abs(f_vec))) if f_vec.size else 0.0
    iterations = 0
    while norm > settings.tol and iterations < settings.max_iter:
        iterations += 1
        jac = _power_jacobian(ybus, v, pvpq, pq)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            lu = linalg.lu_factor(jac)
            dx = -linalg.lu_solve(lu, f_vec)
        if not np.all(np.isfinite(dx)):
            raise SingularSystem("Newton Jacobian is singular")

        step = 1.0
        for _ in range(4):
            va_new, vm_new = np.angle(v), np.abs(v)
            va_new[pvpq] += step * dx[:n_pvpq]
            vm_new[pq] += step * dx[n_pvpq:]
            v_new = vm_new * np.exp(1j * va_new)
            f_new = mismatch(v_new)
            new_norm = float(np.max(np.abs(f_new)))
            if new_norm <= norm:
                break
            step *= settings.damping
            logger.debug(f"Mismatch grew at iteration {iterations}, damping step to {step}")
        v, f_vec, norm = v_new, f_new, new_norm
        if not np.isfinite(norm):
            raise NoConvergence(iterations, norm)
        logger.debug(f"NR iteration {iterations}: mismatch {norm:.3e}")

    if norm > settings.tol:
        raise NoConvergence(iterations, norm)
    logger.info(f"AC power flow converged in {iterations} iterations (mismatch {norm:.2e})")

    vm, va = np.abs(v), np.angle(v)
    s_calc = v * np.conj(ybus @ v) * base
    gen_p = np.array(dispatch.gen_p, dtype=float)
    gen_q = np.array(dispatch.gen_q, dtype=float)
    other_p, other_q = p_inj.copy(), q_inj.copy()
    if index.generators:
        other_p -= np.bincount(index.gen_bus, weights=gen_p, minlength=index.n_bus)
        other_q -= np.bincount(index.gen_bus, weights=gen_q, minlength=index.n_bus)
    gens_at = {k: [g for g, ref_g in enumerate(index.generators) if ref_g.bus_pos == k]
               for k in range(index.n_bus)}

    slack_gens = gens_at[ref]
    if slack_gens:
        needed = s_calc[ref].real - other_p[ref]
        gen_p[slack_gens[0]] += needed - gen_p[slack_gens].sum()
    else:
        logger.warning("Slack bus has no generator; active mismatch is not assigned")
    for k in [ref, *pv.tolist()]:
        if gens_at[k]:
            gen_q[gens_at[k]] = (s_calc[k].imag - other_q[k]) / len(gens_at[k])
        else:
            logger.warning(f"Voltage-controlled bus {index.bus_ids[k]} has no generator")

    pf, pt, qf, qt = ac_branch_flows(vm, va, index)
    return PowerFlowSolution(
        model="ac",
        bus_ids=tuple(index.bus_ids),
        vm=vm,
        va=va,
        p_from=pf * base,
        p_to=pt * base,
        q_from=qf * base,
        q_to=qt * base,
        p_loss=np.abs(pf - pt) * base,
        gen_p=gen_p,
        gen_q=gen_q,
        load_p=np.asarray(dispatch.load_p, dtype=float),
        load_q=np.asarray(dispatch.load_q, dtype=float),
        storage_ch=np.asarray(dispatch.storage_ch, dtype=float),
        storage_dc=np.asarray(dispatch.storage_dc, dtype=float),
        iterations=iterations,
        mismatch=norm,
    )


def solve_power_flow(
    network: Network,
    dispatch: Dispatch,
    model: str = "dc",
    warm_start: Optional[PowerFlowSolution] = None,
    settings: Optional[PowerFlowConfig] = None,
) -> PowerFlowSolution:
    """
    Run the chosen power flow model for a dispatch.

    In DC mode the slack bus's first generator absorbs any imbalance so that
    the injections sum to zero.
    """
    if model == "ac":
        return solve_ac(network, dispatch, warm_start=warm_start, settings=settings)

    index = network.index()
    p_inj, _ = dispatch.bus_injections(index)
    imbalance = p_inj.sum()
    if abs(imbalance) > 1e-9:
        slack_gens = [g for g, ref in enumerate(index.generators) if ref.bus_pos == index.slack_pos]
        if not slack_gens:
            raise ValueError("DC dispatch is unbalanced and the slack bus has no generator")
        dispatch = Dispatch(**{**dispatch.__dict__, "gen_p": dispatch.gen_p.copy()})
        dispatch.gen_p[slack_gens[0]] -= imbalance
        p_inj, _ = dispatch.bus_injections(index)
        logger.debug(f"Slack generator absorbed {-imbalance:.4f} MW of DC imbalance")
    return solve_dc(network, p_inj, dispatch=dispatch)


def split_flows(solution: PowerFlowSolution) -> BranchDualFlows:
    """
    Split signed flows into nonnegative forward/reverse pairs at both ends.

    Exactly one entry of each pair is nonzero (both are zero for zero flow),
    and fwd - rev reproduces the signed flow exactly.
    """
    def _pair(signed: np.ndarray) -> DualFlowPair:
        return DualFlowPair(np.maximum(signed, 0.0), np.maximum(-signed, 0.0))

    return BranchDualFlows(from_end=_pair(solution.p_from), to_end=_pair(solution.p_to))

