"""
Dispatch model for the carbon-aware OPF toolkit.

Problem definition (carbon policy, dispatch problem) and the assembly of the
multi-period OPF / C-OPF as a NonlinearProgram with analytic derivatives.

Variables are per unit on baseMVA (storage energy in p.u.*h), intensities in
ton/MWh. The objective is evaluated in $ with powers in MW.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.model import Network, NetworkIndex, Series, TimeGrid, ValidationReport, series_at, validate
from core.nlp import NonlinearProgram
from core.power_flow import ac_branch_flow_partials, ac_branch_flows, dc_branch_flows
from core.storage_carbon import EsModelKind

logger = logging.getLogger(__name__)

INF = math.inf


class CarbonPolicy(BaseModel):
    """
    Carbon constraints of a dispatch problem. Intensities in ton/MWh, emissions in ton.

    Attributes:
        nci_cap: Uniform nodal carbon intensity cap
        nci_cap_by_bus: Per-bus cap series overriding nci_cap (length 1 or T)
        user_cap: Horizon emission cap per load key
        node_cap: Horizon emission cap per bus id on its total load
        soft: Convert caps to soft constraints with priced slacks
        slack_penalty: Price of one unit of slack ($/ton, $ per ton/MWh for intensity caps)
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    nci_cap: float = Field(default=INF, ge=0.0)
    nci_cap_by_bus: Dict[int, Series] = Field(default_factory=dict)
    user_cap: Dict[str, float] = Field(default_factory=dict)
    node_cap: Dict[int, float] = Field(default_factory=dict)
    soft: bool = False
    slack_penalty: float = Field(default=0.0, ge=0.0)

    @field_validator("nci_cap_by_bus", mode="before")
    @classmethod
    def broadcast_caps(cls, v):
        out = {}
        for bus, cap in dict(v or {}).items():
            out[int(bus)] = (float(cap),) if isinstance(cap, (int, float)) else tuple(float(c) for c in cap)
        return out

    @field_validator("nci_cap_by_bus", "user_cap", "node_cap")
    @classmethod
    def nonnegative_caps(cls, v):
        for key, cap in v.items():
            values = cap if isinstance(cap, tuple) else (cap,)
            if any(c < 0 for c in values):
                raise ValueError(f"cap for {key} must be nonnegative")
        return v

    @model_validator(mode="after")
    def soft_needs_penalty(self):
        if self.soft and not self.slack_penalty > 0:
            raise ValueError("soft caps require a positive slack_penalty")
        return self

    @property
    def has_caps(self) -> bool:
        finite = math.isfinite(self.nci_cap) or any(
            math.isfinite(c) for caps in self.nci_cap_by_bus.values() for c in caps
        )
        return finite or bool(self.user_cap) or bool(self.node_cap)

    def nci_cap_matrix(self, index: NetworkIndex, periods: int) -> np.ndarray:
        """(T, N) cap matrix with inf where a node is uncapped."""
        caps = np.full((periods, index.n_bus), float(self.nci_cap))
        for bus_id, series in self.nci_cap_by_bus.items():
            if bus_id in index.position:
                caps[:, index.position[bus_id]] = [series_at(series, t) for t in range(periods)]
        return caps

    def with_uniform_cap(self, cap: float) -> "CarbonPolicy":
        return self.model_copy(update={"nci_cap": float(cap), "nci_cap_by_bus": {}})

    def disabled(self) -> "CarbonPolicy":
        return CarbonPolicy()


class DispatchProblem(BaseModel):
    """
    Multi-period dispatch problem.

    Generator cost curves and storage degradation costs live on the network;
    the emission price adds c_emi * sum(w^G P^G) to every period.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    network: Network
    grid: TimeGrid = TimeGrid()
    policy: CarbonPolicy = CarbonPolicy()
    emission_price: float = Field(default=0.0, ge=0.0)
    pf_model: Literal["dc", "ac"] = "dc"
    es_model: EsModelKind = EsModelKind.WATER_TANK
    v_start: Dict[int, float] = Field(default_factory=dict)

    def validate_problem(self) -> ValidationReport:
        """Network invariants plus policy references."""
        report = validate(self.network, self.grid)
        index = self.network.index()
        load_keys = {ref.key for ref in index.loads}
        for key in self.policy.user_cap:
            if key not in load_keys:
                report.add("policy", f"user_cap {key}", "user cap refers to an unknown load")
        for bus_id in list(self.policy.node_cap) + list(self.policy.nci_cap_by_bus):
            if bus_id not in index.position:
                report.add("policy", f"bus {bus_id}", "cap refers to an unknown bus")
        for bus_id, caps in self.policy.nci_cap_by_bus.items():
            if len(caps) not in (1, self.grid.periods):
                report.add("series_length", f"nci cap bus {bus_id}",
                           f"cap has {len(caps)} values, expected 1 or {self.grid.periods}")
        return report

    def with_policy(self, policy: CarbonPolicy) -> "DispatchProblem":
        return self.model_copy(update={"policy": policy})

    def without_carbon(self) -> "DispatchProblem":
        return self.model_copy(update={"policy": CarbonPolicy()})


@dataclass
class StageOptions:
    """
    Per-solve switches of the model.

    Attributes:
        eps: Complementarity relaxation level (p.u.^2); None drops the constraints
        dir_from: (T, B) fixed direction at the from end: +1, -1 or 0 (free)
        dir_to: (T, B) fixed direction at the to end (AC only)
        storage_modes: (T, S) +1 charge only, -1 discharge only, 0 free
    """
    eps: Optional[float] = None
    dir_from: Optional[np.ndarray] = None
    dir_to: Optional[np.ndarray] = None
    storage_modes: Optional[np.ndarray] = None


class VariableLayout:
    """Named blocks of a flat variable vector."""

    def __init__(self):
        self.blocks: Dict[str, np.ndarray] = {}
        self.size = 0

    def add(self, name: str, shape: Tuple[int, ...]):
        count = int(np.prod(shape)) if shape else 1
        self.blocks[name] = np.arange(self.size, self.size + count).reshape(shape)
        self.size += count

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def get(self, x: np.ndarray, name: str) -> np.ndarray:
        return x[self.blocks[name]]

    def put(self, x: np.ndarray, name: str, values):
        x[self.blocks[name]] = values


def _one_hot(rows: int, cols: int, at: np.ndarray) -> np.ndarray:
    mat = np.zeros((rows, cols))
    if rows:
        mat[np.arange(rows), at] = 1.0
    return mat


def radial_directions(network: Network, periods: int) -> np.ndarray:
    """
    Forced directions of bridges feeding passive subtrees.

    A single-circuit bridge whose far side holds no generator and no
    storage always carries power towards that side.

    Returns:
        (T, B) array of +1 / -1 for such branches, 0 elsewhere
    """
    index = network.index()
    directions = np.zeros((periods, index.n_branch), dtype=int)
    graph = nx.Graph()
    graph.add_nodes_from(index.bus_ids)
    multiplicity: Dict[frozenset, int] = {}
    for branch in network.branches:
        pair = frozenset((branch.from_bus, branch.to_bus))
        multiplicity[pair] = multiplicity.get(pair, 0) + 1
        graph.add_edge(branch.from_bus, branch.to_bus)

    active = {bus.id for bus in network.buses if bus.generators or bus.storage is not None}
    for u, v in nx.bridges(graph):
        if multiplicity[frozenset((u, v))] != 1:
            continue
        cut = graph.copy()
        cut.remove_edge(u, v)
        side_v = nx.node_connected_component(cut, v)
        side_u = nx.node_connected_component(cut, u)
        for k, branch in enumerate(network.branches):
            if frozenset((branch.from_bus, branch.to_bus)) != frozenset((u, v)):
                continue
            to_side = side_v if branch.to_bus == v else side_u
            from_side = side_u if branch.to_bus == v else side_v
            if not to_side & active:
                directions[:, k] = 1
            elif not from_side & active:
                directions[:, k] = -1
    return directions


class DispatchModel:
    """
    OPF / C-OPF assembly for one DispatchProblem.

    With carbon disabled the model holds generator, voltage and storage
    variables only. With carbon enabled it adds dual branch flows, nodal
    intensities, storage intensities (water tank) and soft-cap slacks.
    """

    def __init__(self, problem: DispatchProblem, carbon: bool = True):
        self.problem = problem
        self.carbon = carbon
        self.network = problem.network
        self.index = self.network.index()
        self.ac = problem.pf_model == "ac"
        self.water_tank = EsModelKind(problem.es_model) == EsModelKind.WATER_TANK
        self.base = self.network.base_mva
        self.T = problem.grid.periods
        self.delta_t = problem.grid.delta_t

        ix = self.index
        self.N, self.B = ix.n_bus, ix.n_branch
        self.G, self.S, self.L = len(ix.generators), len(ix.storage), len(ix.loads)
        self.Cg = ix.incidence(ix.gen_bus).T
        self.Cs = ix.incidence(ix.storage_bus).T
        self.Af = _one_hot(self.B, self.N, ix.branch_from)
        self.At = _one_hot(self.B, self.N, ix.branch_to)

        gens = [ref.unit for ref in ix.generators]
        self.p_min = np.array([[series_at(g.p_min, t) for g in gens] for t in range(self.T)]).reshape(self.T, self.G)
        self.p_max = np.array([[series_at(g.p_max, t) for g in gens] for t in range(self.T)]).reshape(self.T, self.G)
        self.q_min = np.array([[series_at(g.q_min, t) for g in gens] for t in range(self.T)]).reshape(self.T, self.G)
        self.q_max = np.array([[series_at(g.q_max, t) for g in gens] for t in range(self.T)]).reshape(self.T, self.G)
        self.ramp_down = np.array([g.ramp_down for g in gens], dtype=float)
        self.ramp_up = np.array([g.ramp_up for g in gens], dtype=float)
        self.cost = np.array([g.cost for g in gens], dtype=float).reshape(self.G, 3)
        self.w_gen = ix.emission_factors

        self.load_p = np.array([ix.load_p(t) for t in range(self.T)]).reshape(self.T, self.L)
        self.load_q = np.array([ix.load_q(t) for t in range(self.T)]).reshape(self.T, self.L)
        cl = ix.incidence(ix.load_bus).T
        self.load_p_bus = self.load_p @ cl.T
        self.load_q_bus = self.load_q @ cl.T

        units = [ref.unit for ref in ix.storage]
        self.eta_ch = np.array([u.eta_ch for u in units], dtype=float)
        self.eta_dc = np.array([u.eta_dc for u in units], dtype=float)
        self.kappa = np.array([u.kappa for u in units], dtype=float)
        self.c_es = np.array([u.degradation_cost for u in units], dtype=float)
        self.w_es_init = np.array([u.w_es_init for u in units], dtype=float)

        policy = problem.policy
        self.caps = policy.nci_cap_matrix(ix, self.T)
        load_keys = [ref.key for ref in ix.loads]
        self.user_caps = [(load_keys.index(k), float(v)) for k, v in policy.user_cap.items()]
        self.node_caps = [(ix.position[b], float(v)) for b, v in policy.node_cap.items()]
        self.w_bound = max([ix.w_gen_max, *self.w_es_init.tolist(), 0.0])

        self.layout = self._build_layout()

    def _build_layout(self) -> VariableLayout:
        T, N, B, G, S = self.T, self.N, self.B, self.G, self.S
        lay = VariableLayout()
        lay.add("pg", (T, G))
        if self.ac:
            lay.add("qg", (T, G))
        lay.add("va", (T, N))
        if self.ac:
            lay.add("vm", (T, N))
        lay.add("pch", (T, S))
        lay.add("pdc", (T, S))
        lay.add("e", (T + 1, S))
        if self.carbon:
            lay.add("hf_fwd", (T, B))
            lay.add("hf_rev", (T, B))
            if self.ac:
                lay.add("ht_fwd", (T, B))
                lay.add("ht_rev", (T, B))
            lay.add("w", (T, N))
            if self.water_tank:
                lay.add("wes", (T + 1, S))
            if self.problem.policy.soft:
                lay.add("a_nci", (T, N))
                lay.add("a_user", (self.L,))
                lay.add("a_node", (N,))
        return lay

    @property
    def n(self) -> int:
        return self.layout.size

    # bounds

    def bounds(self, options: Optional[StageOptions] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Variable bounds including fixings implied by the stage options."""
        options = options or StageOptions()
        lay, base, ix = self.layout, self.base, self.index
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)

        def set_(name, lo, hi):
            lb[lay[name]] = lo
            ub[lay[name]] = hi

        set_("pg", self.p_min / base, self.p_max / base)
        if self.ac:
            set_("qg", self.q_min / base, self.q_max / base)
            vlim = np.array([bus.v_limits for bus in self.network.buses]).reshape(self.N, 2)
            set_("vm", vlim[:, 0], vlim[:, 1])
        alim = np.array([bus.theta_limits for bus in self.network.buses]).reshape(self.N, 2)
        set_("va", alim[:, 0], alim[:, 1])
        lb[lay["va"][:, ix.slack_pos]] = 0.0
        ub[lay["va"][:, ix.slack_pos]] = 0.0

        units = [ref.unit for ref in ix.storage]
        set_("pch", 0.0, np.array([u.p_ch_max for u in units]) / base)
        set_("pdc", 0.0, np.array([u.p_dc_max for u in units]) / base)
        set_("e", np.array([u.e_min for u in units]) / base, np.array([u.e_max for u in units]) / base)
        e_init = np.array([u.e_init for u in units]) / base
        for row in (0, self.T):
            lb[lay["e"][row]] = e_init
            ub[lay["e"][row]] = e_init

        if options.storage_modes is not None:
            modes = np.asarray(options.storage_modes)
            lb[lay["pdc"][modes > 0]] = ub[lay["pdc"][modes > 0]] = 0.0
            lb[lay["pch"][modes < 0]] = ub[lay["pch"][modes < 0]] = 0.0

        if not self.carbon:
            return lb, ub

        s_max = np.where(np.isfinite(ix.s_max), ix.s_max, np.inf)
        ends = [("hf", options.dir_from)] + ([("ht", options.dir_to)] if self.ac else [])
        for prefix, directions in ends:
            set_(f"{prefix}_fwd", 0.0, s_max)
            set_(f"{prefix}_rev", 0.0, s_max)
            if directions is not None:
                directions = np.asarray(directions)
                lb[lay[f"{prefix}_rev"][directions > 0]] = ub[lay[f"{prefix}_rev"][directions > 0]] = 0.0
                lb[lay[f"{prefix}_fwd"][directions < 0]] = ub[lay[f"{prefix}_fwd"][directions < 0]] = 0.0

        set_("w", 0.0, self.w_bound)
        if self.water_tank and self.S:
            set_("wes", 0.0, self.w_bound)
            lb[lay["wes"][0]] = ub[lay["wes"][0]] = self.w_es_init

        if self.problem.policy.soft:
            set_("a_nci", 0.0, np.where(np.isfinite(self.caps), np.inf, 0.0))
            capped_users = np.zeros(self.L, dtype=bool)
            capped_users[[i for i, _ in self.user_caps]] = True
            set_("a_user", 0.0, np.where(capped_users, np.inf, 0.0))
            capped_nodes = np.zeros(self.N, dtype=bool)
            capped_nodes[[i for i, _ in self.node_caps]] = True
            set_("a_node", 0.0, np.where(capped_nodes, np.inf, 0.0))
        return lb, ub

    # branch flows

    def branch_flows(self, x: np.ndarray, t: int) -> Dict[str, np.ndarray]:
        """Flows (p.u.) at period t plus their (B, N) derivatives w.r.t. va and vm."""
        lay = self.layout
        va = lay.get(x, "va")[t]
        diff = self.Af - self.At
        if not self.ac:
            flow = dc_branch_flows(va, self.index)
            d_va = -self.index.b[:, None] * diff
            zero = np.zeros(self.B)
            return {"pf": flow, "pt": flow, "qf": zero, "qt": zero,
                    "pf_va": d_va, "pt_va": d_va}
        vm = lay.get(x, "vm")[t]
        pf, pt, qf, qt = ac_branch_flows(vm, va, self.index)
        part = ac_branch_flow_partials(vm, va, self.index)
        out = {"pf": pf, "pt": pt, "qf": qf, "qt": qt}
        for q in ("pf", "pt", "qf", "qt"):
            out[f"{q}_va"] = part[q]["af"][:, None] * self.Af + part[q]["at"][:, None] * self.At
            out[f"{q}_vm"] = part[q]["vf"][:, None] * self.Af + part[q]["vt"][:, None] * self.At
        return out

    # objective

    def objective(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        """Total cost in $ and its gradient."""
        lay, base = self.layout, self.base
        grad = np.zeros(self.n)
        pg = lay.get(x, "pg") * base
        c2, c1, c0 = self.cost[:, 0], self.cost[:, 1], self.cost[:, 2]
        price = self.problem.emission_price
        f = float(np.sum(c2 * pg ** 2 + c1 * pg + c0) + price * np.sum(self.w_gen * pg))
        grad[lay["pg"]] = base * (2 * c2 * pg + c1 + price * self.w_gen)
        if self.S:
            throughput = (lay.get(x, "pch") + lay.get(x, "pdc")) * base
            f += float(np.sum(self.c_es * throughput))
            grad[lay["pch"]] = base * self.c_es
            grad[lay["pdc"]] = base * self.c_es
        if self.carbon and self.problem.policy.soft:
            penalty = self.problem.policy.slack_penalty
            for name in ("a_nci", "a_user", "a_node"):
                f += penalty * float(np.sum(lay.get(x, name)))
                grad[lay[name]] = penalty
        return f, grad

    # equalities

    def equality(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values: List[np.ndarray] = []
        jacs: List[np.ndarray] = []
        for t in range(self.T):
            flows = self.branch_flows(x, t)
            self._balance(x, t, flows, values, jacs)
            if self.carbon:
                self._linking(x, t, flows, values, jacs)
                self._carbon(x, t, values, jacs)
        if self.S:
            self._energy(x, values, jacs)
            if self.carbon and self.water_tank:
                self._storage_intensity(x, values, jacs)
        return np.concatenate(values), np.vstack(jacs)

    def _balance(self, x, t, flows, values, jacs):
        lay, base = self.layout, self.base
        pg = lay.get(x, "pg")[t]
        pch, pdc = lay.get(x, "pch")[t], lay.get(x, "pdc")[t]
        out_p = self.Af.T @ flows["pf"] - self.At.T @ flows["pt"]
        values.append(self.Cg @ pg - self.load_p_bus[t] / base + self.Cs @ (pdc - pch) - out_p)
        jac = np.zeros((self.N, self.n))
        jac[:, lay["pg"][t]] = self.Cg
        jac[:, lay["pdc"][t]] = self.Cs
        jac[:, lay["pch"][t]] = -self.Cs
        jac[:, lay["va"][t]] = -(self.Af.T @ flows["pf_va"] - self.At.T @ flows["pt_va"])
        if self.ac:
            jac[:, lay["vm"][t]] = -(self.Af.T @ flows["pf_vm"] - self.At.T @ flows["pt_vm"])
        jacs.append(jac)
        if not self.ac:
            return

        qg = lay.get(x, "qg")[t]
        out_q = self.Af.T @ flows["qf"] - self.At.T @ flows["qt"]
        values.append(self.Cg @ qg - self.load_q_bus[t] / base - out_q)
        jac = np.zeros((self.N, self.n))
        jac[:, lay["qg"][t]] = self.Cg
        jac[:, lay["va"][t]] = -(self.Af.T @ flows["qf_va"] - self.At.T @ flows["qt_va"])
        jac[:, lay["vm"][t]] = -(self.Af.T @ flows["qf_vm"] - self.At.T @ flows["qt_vm"])
        jacs.append(jac)

    def _linking(self, x, t, flows, values, jacs):
        lay = self.layout
        ends = [("hf", "pf")] + ([("ht", "pt")] if self.ac else [])
        eye = np.eye(self.B)
        for prefix, quantity in ends:
            fwd = lay.get(x, f"{prefix}_fwd")[t]
            rev = lay.get(x, f"{prefix}_rev")[t]
            values.append(fwd - rev - flows[quantity])
            jac = np.zeros((self.B, self.n))
            jac[:, lay[f"{prefix}_fwd"][t]] = eye
            jac[:, lay[f"{prefix}_rev"][t]] = -eye
            jac[:, lay["va"][t]] = -flows[f"{quantity}_va"]
            if self.ac:
                jac[:, lay["vm"][t]] = -flows[f"{quantity}_vm"]
            jacs.append(jac)

    def _received_at_to(self) -> str:
        return "ht_fwd" if self.ac else "hf_fwd"

    def carbon_terms(self, x: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Nodal power inflow P_in (p.u.) and carbon inflow R_in at period t."""
        lay, ix = self.layout, self.index
        w = lay.get(x, "w")[t]
        pg = lay.get(x, "pg")[t]
        pdc = lay.get(x, "pdc")[t]
        recv_f = lay.get(x, "hf_rev")[t]
        recv_t = lay.get(x, self._received_at_to())[t]
        w_dis = self._discharge_intensity(x, t)
        p_in = self.Cg @ pg + self.Cs @ pdc + self.Af.T @ recv_f + self.At.T @ recv_t
        r_in = (self.Cg @ (self.w_gen * pg) + self.Cs @ (w_dis * pdc)
                + self.Af.T @ (w[ix.branch_to] * recv_f) + self.At.T @ (w[ix.branch_from] * recv_t))
        return p_in, r_in

    def _discharge_intensity(self, x, t) -> np.ndarray:
        if self.water_tank and self.S:
            return self.layout.get(x, "wes")[t]
        return np.zeros(self.S)

    def _carbon(self, x, t, values, jacs):
        lay, ix = self.layout, self.index
        w = lay.get(x, "w")[t]
        pg = lay.get(x, "pg")[t]
        pdc = lay.get(x, "pdc")[t]
        recv_f = lay.get(x, "hf_rev")[t]
        recv_t = lay.get(x, self._received_at_to())[t]
        w_dis = self._discharge_intensity(x, t)
        p_in, r_in = self.carbon_terms(x, t)
        values.append(w * p_in - r_in)

        f, to = ix.branch_from, ix.branch_to
        jac = np.zeros((self.N, self.n))
        jac[:, lay["w"][t]] = (np.diag(p_in)
                               - self.Af.T @ (recv_f[:, None] * self.At)
                               - self.At.T @ (recv_t[:, None] * self.Af))
        jac[:, lay["pg"][t]] = self.Cg * (w[ix.gen_bus] - self.w_gen)[None, :]
        jac[:, lay["pdc"][t]] = self.Cs * (w[ix.storage_bus] - w_dis)[None, :]
        if self.water_tank and self.S:
            jac[:, lay["wes"][t]] = -self.Cs * pdc[None, :]
        jac[:, lay["hf_rev"][t]] = self.Af.T * (w[f] - w[to])[None, :]
        jac[:, lay[self._received_at_to()][t]] += self.At.T * (w[to] - w[f])[None, :]
        jacs.append(jac)

    def _energy(self, x, values, jacs):
        lay, dt = self.layout, self.delta_t
        e = lay.get(x, "e")
        pch, pdc = lay.get(x, "pch"), lay.get(x, "pdc")
        eye = np.eye(self.S)
        for t in range(self.T):
            values.append(e[t + 1] - self.kappa * e[t] - dt * (self.eta_ch * pch[t] - pdc[t] / self.eta_dc))
            jac = np.zeros((self.S, self.n))
            jac[:, lay["e"][t + 1]] = eye
            jac[:, lay["e"][t]] = -np.diag(self.kappa)
            jac[:, lay["pch"][t]] = -dt * np.diag(self.eta_ch)
            jac[:, lay["pdc"][t]] = dt * np.diag(1.0 / self.eta_dc)
            jacs.append(jac)

    def _storage_intensity(self, x, values, jacs):
        lay, dt, ix = self.layout, self.delta_t, self.index
        e, wes = lay.get(x, "e"), lay.get(x, "wes")
        pch, w = lay.get(x, "pch"), lay.get(x, "w")
        for t in range(self.T):
            w_node = w[t][ix.storage_bus]
            retained = self.kappa * e[t]
            charged = dt * self.eta_ch * pch[t]
            values.append(wes[t + 1] * (retained + charged) - retained * wes[t] - charged * w_node)
            jac = np.zeros((self.S, self.n))
            jac[:, lay["wes"][t + 1]] = np.diag(retained + charged)
            jac[:, lay["e"][t]] = np.diag(self.kappa * (wes[t + 1] - wes[t]))
            jac[:, lay["pch"][t]] = np.diag(dt * self.eta_ch * (wes[t + 1] - w_node))
            jac[:, lay["wes"][t]] = -np.diag(retained)
            jac[np.arange(self.S), lay["w"][t][ix.storage_bus]] += -charged
            jacs.append(jac)

    # inequalities

    def inequality(self, x: np.ndarray, options: Optional[StageOptions] = None) -> Tuple[np.ndarray, np.ndarray]:
        options = options or StageOptions()
        values: List[np.ndarray] = []
        jacs: List[np.ndarray] = []
        self._ramps(x, values, jacs)
        for t in range(self.T):
            self._thermal(x, t, self.branch_flows(x, t), values, jacs)
        if options.eps is not None:
            self._complementarity(x, options, values, jacs)
        if self.carbon:
            self._caps(x, values, jacs)
        if not values:
            return np.zeros(0), np.zeros((0, self.n))
        return np.concatenate(values), np.vstack(jacs)

    def _ramps(self, x, values, jacs):
        lay, base = self.layout, self.base
        pg = lay.get(x, "pg")
        for t in range(1, self.T):
            step = pg[t] - pg[t - 1]
            for sign, limit in ((1.0, self.ramp_down), (-1.0, self.ramp_up)):
                rows = np.flatnonzero(np.isfinite(limit))
                if not rows.size:
                    continue
                values.append(sign * (step[rows] - limit[rows] / base))
                jac = np.zeros((rows.size, self.n))
                jac[np.arange(rows.size), lay["pg"][t][rows]] = sign
                jac[np.arange(rows.size), lay["pg"][t - 1][rows]] = -sign
                jacs.append(jac)

    def _thermal(self, x, t, flows, values, jacs):
        lay = self.layout
        rows = np.flatnonzero(np.isfinite(self.index.s_max))
        if not rows.size:
            return
        s_max = self.index.s_max[rows]
        if not self.ac:
            flow = flows["pf"][rows]
            d_va = flows["pf_va"][rows]
            for sign in (1.0, -1.0):
                values.append(s_max - sign * flow)
                jac = np.zeros((rows.size, self.n))
                jac[:, lay["va"][t]] = -sign * d_va
                jacs.append(jac)
            return
        for p_key, q_key in (("pf", "qf"), ("pt", "qt")):
            p, q = flows[p_key][rows], flows[q_key][rows]
            values.append(s_max ** 2 - p ** 2 - q ** 2)
            jac = np.zeros((rows.size, self.n))
            for var in ("va", "vm"):
                jac[:, lay[var][t]] = (-2 * p[:, None] * flows[f"{p_key}_{var}"][rows]
                                       - 2 * q[:, None] * flows[f"{q_key}_{var}"][rows])
            jacs.append(jac)

    def _complementarity(self, x, options, values, jacs):
        lay = self.layout
        pairs = []
        if self.carbon:
            pairs.append(("hf_fwd", "hf_rev", options.dir_from))
            if self.ac:
                pairs.append(("ht_fwd", "ht_rev", options.dir_to))
        if self.S:
            pairs.append(("pch", "pdc", options.storage_modes))
        for a_name, b_name, fixed in pairs:
            a_idx, b_idx = lay[a_name].ravel(), lay[b_name].ravel()
            keep = np.ones(a_idx.size, dtype=bool) if fixed is None else np.asarray(fixed).ravel() == 0
            a_idx, b_idx = a_idx[keep], b_idx[keep]
            if not a_idx.size:
                continue
            values.append(options.eps - x[a_idx] * x[b_idx])
            jac = np.zeros((a_idx.size, self.n))
            jac[np.arange(a_idx.size), a_idx] = -x[b_idx]
            jac[np.arange(a_idx.size), b_idx] = -x[a_idx]
            jacs.append(jac)

    def _caps(self, x, values, jacs):
        lay, dt = self.layout, self.delta_t
        soft = self.problem.policy.soft
        w = lay.get(x, "w")
        finite = np.isfinite(self.caps)
        if finite.any():
            w_idx = lay["w"][finite]
            value = self.caps[finite] - x[w_idx]
            jac = np.zeros((w_idx.size, self.n))
            jac[np.arange(w_idx.size), w_idx] = -1.0
            if soft:
                a_idx = lay["a_nci"][finite]
                value = value + x[a_idx]
                jac[np.arange(w_idx.size), a_idx] = 1.0
            values.append(value)
            jacs.append(jac)

        bus_of_load = self.index.load_bus
        for slack_name, caps, demand, bus_of in (
            ("a_user", self.user_caps, self.load_p, bus_of_load),
            ("a_node", self.node_caps, self.load_p_bus, np.arange(self.N)),
        ):
            for item, cap in caps:
                bus = bus_of[item]
                scale = 1.0 / max(1.0, cap)
                emitted = dt * float(np.sum(w[:, bus] * demand[:, item]))
                jac = np.zeros((1, self.n))
                jac[0, lay["w"][:, bus]] = -scale * dt * demand[:, item]
                value = cap - emitted
                if soft:
                    value += x[lay[slack_name][item]]
                    jac[0, lay[slack_name][item]] = scale
                values.append(np.array([scale * value]))
                jacs.append(jac)

    # assembly

    def program(self, x0: np.ndarray, options: Optional[StageOptions] = None) -> NonlinearProgram:
        """NonlinearProgram for one stage; the objective is scaled by its value at x0."""
        options = options or StageOptions()
        lb, ub = self.bounds(options)
        x0 = np.clip(np.asarray(x0, dtype=float), lb, ub)
        scale = 1.0 / max(1.0, abs(self.objective(x0)[0]))

        def objective(x):
            f, g = self.objective(x)
            return f * scale, g * scale

        return NonlinearProgram(
            x0=x0,
            lb=lb,
            ub=ub,
            objective=objective,
            equality=self.equality,
            inequality=lambda x: self.inequality(x, options),
            name="copf" if self.carbon else "opf",
        )
