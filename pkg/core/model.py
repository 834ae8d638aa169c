"""
Network data model for the carbon-aware OPF toolkit.

Immutable pydantic models describe buses, branches, generators, loads and
storage units. Per-period limits are tuples; a length-1 tuple broadcasts to
every period. Emission factors are held in ton/MWh.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from core.units import EmissionUnit

logger = logging.getLogger(__name__)

INF = math.inf

Series = Tuple[float, ...]


def _as_series(value: Any) -> Series:
    if isinstance(value, (int, float, np.floating, np.integer)):
        return (float(value),)
    return tuple(float(v) for v in value)


def series_at(series: Sequence[float], t: int) -> float:
    """Value of a per-period series at period t, broadcasting length-1 series."""
    if len(series) == 1:
        return float(series[0])
    return float(series[t])


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Generator(_Frozen):
    """Dispatchable generator. Limits in MW/MVAr, cost as (c2, c1, c0)."""

    name: Optional[str] = None
    p_min: Series = (0.0,)
    p_max: Series = (0.0,)
    q_min: Series = (-INF,)
    q_max: Series = (INF,)
    ramp_down: float = -INF
    ramp_up: float = INF
    cost: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    emission_factor: float = 0.0

    @field_validator("p_min", "p_max", "q_min", "q_max", mode="before")
    @classmethod
    def broadcast_series(cls, v):
        return _as_series(v)


class Load(_Frozen):
    """Fixed demand per period (MW, MVAr)."""

    name: Optional[str] = None
    p: Series = (0.0,)
    q: Series = (0.0,)

    @field_validator("p", "q", mode="before")
    @classmethod
    def broadcast_series(cls, v):
        return _as_series(v)


class StorageUnit(_Frozen):
    """
    Energy storage unit (at most one per bus).

    Attributes:
        p_ch_max: Charging power limit (MW)
        p_dc_max: Discharging power limit (MW)
        eta_ch: Charging efficiency in (0, 1]
        eta_dc: Discharging efficiency in (0, 1]
        kappa: Per-step self-retention factor in (0, 1]
        e_min: Lower energy bound (MWh); defaults to 1% of e_max
        e_max: Upper energy bound (MWh)
        e_init: Energy at the start of the horizon (MWh)
        degradation_cost: Cost per MW charged or discharged ($/MW)
        w_es_init: Initial internal carbon intensity (ton/MWh)
    """

    name: Optional[str] = None
    p_ch_max: float
    p_dc_max: float
    eta_ch: float = 1.0
    eta_dc: float = 1.0
    kappa: float = 1.0
    e_min: Optional[float] = None
    e_max: float
    e_init: float
    degradation_cost: float = 0.0
    w_es_init: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def default_e_min(cls, data):
        if isinstance(data, dict) and data.get("e_min") is None and "e_max" in data:
            data = dict(data)
            data["e_min"] = 0.01 * float(data["e_max"])
        return data


class Bus(_Frozen):
    """Network node with attached devices."""

    id: int
    generators: Tuple[Generator, ...] = ()
    loads: Tuple[Load, ...] = ()
    storage: Optional[StorageUnit] = None
    v_limits: Tuple[float, float] = (0.9, 1.1)
    theta_limits: Tuple[float, float] = (-math.pi, math.pi)
    is_slack: bool = False


class Branch(_Frozen):
    """Series branch between two buses; g, b and s_max in p.u."""

    from_bus: int
    to_bus: int
    g: float = 0.0
    b: float
    s_max: float = INF

    @property
    def key(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


class Network(_Frozen):
    """Immutable grid description."""

    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    base_mva: float = 100.0
    emission_unit: EmissionUnit = EmissionUnit.TON_PER_MWH

    @property
    def bus_ids(self) -> List[int]:
        return [bus.id for bus in self.buses]

    @property
    def slack_bus(self) -> Optional[int]:
        slack = [bus.id for bus in self.buses if bus.is_slack]
        return slack[0] if len(slack) == 1 else None

    def index(self) -> "NetworkIndex":
        """Build position lookups and incidence arrays for numerical code."""
        return NetworkIndex.from_network(self)

    def to_graph(self) -> nx.MultiGraph:
        """Undirected multigraph of buses and branches."""
        graph = nx.MultiGraph()
        graph.add_nodes_from(self.bus_ids)
        for k, branch in enumerate(self.branches):
            graph.add_edge(branch.from_bus, branch.to_bus, key=k)
        return graph


class TimeGrid(_Frozen):
    """Horizon of equal-length periods."""

    periods: int = 1
    delta_t: float = 1.0

    @property
    def T(self) -> int:
        return self.periods


@dataclass
class GeneratorRef:
    key: str
    bus_pos: int
    unit: Generator


@dataclass
class LoadRef:
    key: str
    bus_pos: int
    unit: Load


@dataclass
class StorageRef:
    key: str
    bus_pos: int
    unit: StorageUnit


@dataclass
class NetworkIndex:
    """
    Positional view of a Network.

    Generators, loads and storage units are ordered by bus then by their
    index at the bus. Keys look like ``G3.0``, ``L3.1`` and ``ES5``.
    """
    bus_ids: List[int]
    position: Dict[int, int]
    slack_pos: int
    generators: List[GeneratorRef]
    loads: List[LoadRef]
    storage: List[StorageRef]
    branch_from: np.ndarray
    branch_to: np.ndarray
    g: np.ndarray
    b: np.ndarray
    s_max: np.ndarray
    branch_keys: List[str] = field(default_factory=list)

    @classmethod
    def from_network(cls, network: Network) -> "NetworkIndex":
        position = {bus.id: k for k, bus in enumerate(network.buses)}
        generators, loads, storage = [], [], []
        for k, bus in enumerate(network.buses):
            for g, unit in enumerate(bus.generators):
                generators.append(GeneratorRef(unit.name or f"G{bus.id}.{g}", k, unit))
            for l, unit in enumerate(bus.loads):
                loads.append(LoadRef(unit.name or f"L{bus.id}.{l}", k, unit))
            if bus.storage is not None:
                storage.append(StorageRef(bus.storage.name or f"ES{bus.id}", k, bus.storage))
        slack = network.slack_bus
        return cls(
            bus_ids=network.bus_ids,
            position=position,
            slack_pos=position[slack] if slack is not None else 0,
            generators=generators,
            loads=loads,
            storage=storage,
            branch_from=np.array([position[br.from_bus] for br in network.branches], dtype=int),
            branch_to=np.array([position[br.to_bus] for br in network.branches], dtype=int),
            g=np.array([br.g for br in network.branches], dtype=float),
            b=np.array([br.b for br in network.branches], dtype=float),
            s_max=np.array([br.s_max for br in network.branches], dtype=float),
            branch_keys=[f"B{k}:{br.key}" for k, br in enumerate(network.branches)],
        )

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.branch_from)

    @property
    def gen_bus(self) -> np.ndarray:
        return np.array([ref.bus_pos for ref in self.generators], dtype=int)

    @property
    def load_bus(self) -> np.ndarray:
        return np.array([ref.bus_pos for ref in self.loads], dtype=int)

    @property
    def storage_bus(self) -> np.ndarray:
        return np.array([ref.bus_pos for ref in self.storage], dtype=int)

    @property
    def emission_factors(self) -> np.ndarray:
        return np.array([ref.unit.emission_factor for ref in self.generators], dtype=float)

    @property
    def w_gen_max(self) -> float:
        factors = self.emission_factors
        return float(factors.max()) if factors.size else 0.0

    def incidence(self, bus_of: np.ndarray) -> np.ndarray:
        """Dense (n_items x n_bus) one-hot matrix mapping items to buses."""
        mat = np.zeros((len(bus_of), self.n_bus))
        if len(bus_of):
            mat[np.arange(len(bus_of)), bus_of] = 1.0
        return mat

    def load_p(self, t: int) -> np.ndarray:
        return np.array([series_at(ref.unit.p, t) for ref in self.loads], dtype=float)

    def load_q(self, t: int) -> np.ndarray:
        return np.array([series_at(ref.unit.q, t) for ref in self.loads], dtype=float)

    def bus_load_p(self, t: int) -> np.ndarray:
        out = np.zeros(self.n_bus)
        if self.loads:
            np.add.at(out, self.load_bus, self.load_p(t))
        return out


@dataclass
class Violation:
    """One invariant violation found by validate()."""
    code: str
    location: str
    message: str

    def to_dict(self) -> Dict[str, str]:
        return {"code": self.code, "location": self.location, "message": self.message}


@dataclass
class ValidationReport:
    """Report-style validation result; empty iff the network is usable."""
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, location: str, message: str):
        self.violations.append(Violation(code, location, message))

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]

    def __len__(self) -> int:
        return len(self.violations)

    def to_dict(self) -> Dict[str, Any]:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def _check_series(report: ValidationReport, where: str, name: str, series: Series, T: int):
    if len(series) not in (1, T):
        report.add("series_length", where, f"{name} has {len(series)} values, expected 1 or {T}")


def validate(network: Network, grid: TimeGrid) -> ValidationReport:
    """
    Check every data-model invariant plus network connectivity.

    Args:
        network: Network to check
        grid: Time grid the per-period series must match

    Returns:
        ValidationReport listing every violation found
    """
    report = ValidationReport()
    T = grid.periods

    if T < 1:
        report.add("time_grid", "grid", "T must be at least 1")
    if not grid.delta_t > 0:
        report.add("time_grid", "grid", "delta_t must be positive")
    if not network.base_mva > 0:
        report.add("base_mva", "network", "baseMVA must be positive")
    T = max(T, 1)

    ids = network.bus_ids
    if len(set(ids)) != len(ids):
        report.add("duplicate_bus", "network", "bus identifiers must be unique")
    slack_count = sum(1 for bus in network.buses if bus.is_slack)
    if slack_count != 1:
        report.add("slack", "network", f"exactly one slack bus required, found {slack_count}")

    for bus in network.buses:
        where = f"bus {bus.id}"
        vmin, vmax = bus.v_limits
        if not vmin > 0:
            report.add("v_limits", where, "V_min must be positive")
        if vmin > vmax:
            report.add("v_limits", where, "V_min must not exceed V_max")
        if bus.theta_limits[0] > bus.theta_limits[1]:
            report.add("theta_limits", where, "theta_min must not exceed theta_max")

        for g, gen in enumerate(bus.generators):
            gw = f"{where} generator {g}"
            for name in ("p_min", "p_max", "q_min", "q_max"):
                _check_series(report, gw, name, getattr(gen, name), T)
            if any(series_at(gen.p_min, t) > series_at(gen.p_max, t) for t in range(T)
                   if len(gen.p_min) in (1, T) and len(gen.p_max) in (1, T)):
                report.add("p_limits", gw, "P_min must not exceed P_max")
            if any(series_at(gen.q_min, t) > series_at(gen.q_max, t) for t in range(T)
                   if len(gen.q_min) in (1, T) and len(gen.q_max) in (1, T)):
                report.add("q_limits", gw, "Q_min must not exceed Q_max")
            if not gen.ramp_down <= 0 <= gen.ramp_up:
                report.add("ramp", gw, "ramp limits must satisfy ramp_down <= 0 <= ramp_up")
            if gen.cost[0] < 0:
                report.add("cost", gw, "quadratic cost coefficient must be nonnegative")
            if gen.emission_factor < 0:
                report.add("emission_factor", gw, "emission factor must be nonnegative")

        for l, load in enumerate(bus.loads):
            lw = f"{where} load {l}"
            _check_series(report, lw, "p", load.p, T)
            _check_series(report, lw, "q", load.q, T)
            if any(v < 0 for v in load.p):
                report.add("load", lw, "active load must be nonnegative")

        unit = bus.storage
        if unit is not None:
            sw = f"{where} storage"
            if unit.e_min is None or not unit.e_min > 0:
                report.add(
                    "e_min", sw,
                    "e_min must be positive to keep internal carbon intensity well-defined",
                )
            elif not unit.e_min <= unit.e_init <= unit.e_max:
                report.add("e_init", sw, "e_init must lie within [e_min, e_max]")
            for name in ("eta_ch", "eta_dc", "kappa"):
                value = getattr(unit, name)
                if not 0 < value <= 1:
                    report.add(name, sw, f"{name} must lie in (0, 1]")
            if unit.p_ch_max < 0 or unit.p_dc_max < 0:
                report.add("storage_power", sw, "power limits must be nonnegative")
            if unit.w_es_init < 0:
                report.add("w_es_init", sw, "initial internal intensity must be nonnegative")

    known = set(ids)
    dangling = False
    for k, branch in enumerate(network.branches):
        where = f"branch {k} ({branch.key})"
        if branch.from_bus not in known or branch.to_bus not in known:
            report.add("dangling", where, "dangling branch endpoint")
            dangling = True
        if branch.from_bus == branch.to_bus:
            report.add("self_loop", where, "branch endpoints must differ")
        if not branch.s_max > 0:
            report.add("s_max", where, "s_max must be positive")
        if branch.g == 0 and branch.b == 0:
            report.add("admittance", where, "(g, b) must not both be zero")

    if not dangling and ids:
        if not nx.is_connected(network.to_graph()):
            report.add("connectivity", "network", "network graph is not connected")

    if report.violations:
        logger.debug(f"Validation found {len(report)} violation(s)")
    return report
