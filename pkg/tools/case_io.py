"""
Case file I/O.

Case files are YAML (JSON is accepted as a subset). Field names carry their
units (``p_max_mw``, ``e_max_mwh``, ``b_pu``); intensities follow the
network's ``emission_unit`` and are converted to ton/MWh on load. The schema
rejects unknown keys at every level.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import jsonschema
import yaml
from pydantic import ValidationError

from config import SolverConfig
from core.dispatch_model import CarbonPolicy, DispatchProblem
from core.model import Branch, Bus, Generator, Load, Network, StorageUnit, TimeGrid
from core.storage_carbon import EsModelKind
from core.units import EmissionUnit, convert_emission_unit
from tools.results import atomic_write_text

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

INF = math.inf


class CaseError(Exception):
    """Base class for case file errors."""
    pass


class ParseError(CaseError):
    """Raised when the file is not well-formed YAML/JSON."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class SchemaError(CaseError):
    """Raised when the document violates the case schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class UnitError(CaseError):
    """Raised for an unknown or unsupported unit."""

    def __init__(self, field: str, unit: str):
        self.field = field
        self.unit = unit
        super().__init__(f"{field}: unsupported unit {unit!r}")


_NUMBER = {"type": "number"}
_SERIES = {"oneOf": [_NUMBER, {"type": "array", "items": _NUMBER, "minItems": 1}]}
_PAIR = {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2}


def _obj(properties: Dict[str, Any], required: Tuple[str, ...] = ()) -> Dict[str, Any]:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


GENERATOR_SCHEMA = _obj({
    "name": {"type": "string"},
    "p_min_mw": _SERIES,
    "p_max_mw": _SERIES,
    "q_min_mvar": _SERIES,
    "q_max_mvar": _SERIES,
    "ramp_down_mw": _NUMBER,
    "ramp_up_mw": _NUMBER,
    "cost": {"type": "array", "items": _NUMBER, "minItems": 3, "maxItems": 3},
    "emission_factor": _NUMBER,
}, ("p_max_mw",))

LOAD_SCHEMA = _obj({
    "name": {"type": "string"},
    "p_mw": _SERIES,
    "q_mvar": _SERIES,
}, ("p_mw",))

STORAGE_SCHEMA = _obj({
    "name": {"type": "string"},
    "p_ch_max_mw": _NUMBER,
    "p_dc_max_mw": _NUMBER,
    "eta_ch": _NUMBER,
    "eta_dc": _NUMBER,
    "kappa": _NUMBER,
    "e_min_mwh": _NUMBER,
    "e_max_mwh": _NUMBER,
    "e_init_mwh": _NUMBER,
    "degradation_cost": _NUMBER,
    "w_es_init": _NUMBER,
}, ("p_ch_max_mw", "p_dc_max_mw", "e_max_mwh", "e_init_mwh"))

BUS_SCHEMA = _obj({
    "id": {"type": "integer"},
    "slack": {"type": "boolean"},
    "v_limits_pu": _PAIR,
    "theta_limits_rad": _PAIR,
    "generators": {"type": "array", "items": GENERATOR_SCHEMA},
    "loads": {"type": "array", "items": LOAD_SCHEMA},
    "storage": STORAGE_SCHEMA,
}, ("id",))

BRANCH_SCHEMA = _obj({
    "from": {"type": "integer"},
    "to": {"type": "integer"},
    "g_pu": _NUMBER,
    "b_pu": _NUMBER,
    "s_max_pu": _NUMBER,
}, ("from", "to", "b_pu"))

CASE_SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "name": {"type": "string"},
    "description": {"type": "string"},
    "network": _obj({
        "base_mva": _NUMBER,
        "emission_unit": {"type": "string"},
        "buses": {"type": "array", "items": BUS_SCHEMA, "minItems": 1},
        "branches": {"type": "array", "items": BRANCH_SCHEMA},
    }, ("base_mva", "buses", "branches")),
    "time": _obj({
        "periods": {"type": "integer", "minimum": 1},
        "delta_t_h": _NUMBER,
    }),
    "policy": _obj({
        "nci_cap": _NUMBER,
        "nci_cap_by_bus": {"type": "object", "additionalProperties": _SERIES},
        "user_cap_ton": {"type": "object", "additionalProperties": _NUMBER},
        "node_cap_ton": {"type": "object", "additionalProperties": _NUMBER},
        "soft": {"type": "boolean"},
        "slack_penalty": _NUMBER,
        "emission_price_per_ton": _NUMBER,
    }),
    "solver": _obj({
        "pf_model": {"enum": ["dc", "ac"]},
        "es_model": {"enum": [kind.value for kind in EsModelKind]},
        "v_start_pu": {"type": "object", "additionalProperties": _NUMBER},
        **{name: {} for name in SolverConfig.model_fields},
    }),
}, ("schema_version", "network"))


@dataclass
class CaseFile:
    """
    Parsed case in canonical units.

    Attributes:
        network: Network with intensities in ton/MWh
        grid: Time grid
        policy: Carbon policy with intensity caps in ton/MWh
        emission_price: $/ton
        pf_model: "dc" or "ac"
        es_model: Storage carbon model
        solver: Solver overrides from the file
        v_start: Voltage magnitude start values per bus id
        source_unit: Intensity unit the file was written in
        name: Case name
        sha256: Digest of the file bytes
    """
    network: Network
    grid: TimeGrid = field(default_factory=TimeGrid)
    policy: CarbonPolicy = field(default_factory=CarbonPolicy)
    emission_price: float = 0.0
    pf_model: str = "dc"
    es_model: EsModelKind = EsModelKind.WATER_TANK
    solver: Dict[str, Any] = field(default_factory=dict)
    v_start: Dict[int, float] = field(default_factory=dict)
    source_unit: EmissionUnit = EmissionUnit.TON_PER_MWH
    name: str = ""
    sha256: str = ""

    def unpack(self) -> Tuple[Network, TimeGrid, CarbonPolicy, Dict[str, Any]]:
        return self.network, self.grid, self.policy, self.solver

    def solver_config(self, base: SolverConfig, **overrides: Any) -> SolverConfig:
        """Merge file overrides onto base, then non-None keyword overrides on top."""
        update = dict(self.solver)
        update.update({k: v for k, v in overrides.items() if v is not None})
        return SolverConfig(**{**base.model_dump(), **update})

    def problem(self, pf_model: Optional[str] = None, es_model: Optional[str] = None,
                policy: Optional[CarbonPolicy] = None) -> DispatchProblem:
        return DispatchProblem(
            network=self.network,
            grid=self.grid,
            policy=policy if policy is not None else self.policy,
            emission_price=self.emission_price,
            pf_model=pf_model or self.pf_model,
            es_model=EsModelKind(es_model or self.es_model),
            v_start=self.v_start,
        )

    def to_source_unit(self, intensity: float) -> float:
        """Convert a ton/MWh intensity back to the file's unit."""
        return convert_emission_unit(intensity, EmissionUnit.TON_PER_MWH, self.source_unit)


def _emission_unit(raw: Optional[str]) -> EmissionUnit:
    if raw is None:
        return EmissionUnit.TON_PER_MWH
    aliases = {"ton/mwh": EmissionUnit.TON_PER_MWH, "lbs/kwh": EmissionUnit.LBS_PER_KWH}
    key = str(raw).strip()
    if key.lower() in aliases:
        return aliases[key.lower()]
    try:
        return EmissionUnit(key)
    except ValueError:
        raise UnitError("network.emission_unit", key) from None


def _parse(text: str) -> Dict[str, Any]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ParseError(f"malformed case file: {problem}", line=line) from e
    if not isinstance(doc, dict):
        raise ParseError("case file must contain a mapping at the top level", line=1)
    return doc


def _check_schema(doc: Dict[str, Any]):
    validator = jsonschema.Draft7Validator(CASE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        path = "/" + "/".join(str(p) for p in first.absolute_path)
        raise SchemaError(path, first.message)


def _series(value, default=None):
    if value is None:
        return default
    return tuple(float(v) for v in value) if isinstance(value, list) else (float(value),)


def _build_network(section: Dict[str, Any], unit: EmissionUnit) -> Network:
    def intensity(v: float) -> float:
        return convert_emission_unit(v, unit, EmissionUnit.TON_PER_MWH)

    buses = []
    for raw in section["buses"]:
        gens = [
            Generator(
                name=g.get("name"),
                p_min=_series(g.get("p_min_mw"), (0.0,)),
                p_max=_series(g["p_max_mw"]),
                q_min=_series(g.get("q_min_mvar"), (-INF,)),
                q_max=_series(g.get("q_max_mvar"), (INF,)),
                ramp_down=float(g.get("ramp_down_mw", -INF)),
                ramp_up=float(g.get("ramp_up_mw", INF)),
                cost=tuple(float(c) for c in g.get("cost", (0.0, 0.0, 0.0))),
                emission_factor=intensity(g.get("emission_factor", 0.0)),
            )
            for g in raw.get("generators", [])
        ]
        loads = [
            Load(name=l.get("name"), p=_series(l["p_mw"]), q=_series(l.get("q_mvar"), (0.0,)))
            for l in raw.get("loads", [])
        ]
        storage = None
        if raw.get("storage") is not None:
            s = raw["storage"]
            storage = StorageUnit(
                name=s.get("name"),
                p_ch_max=s["p_ch_max_mw"],
                p_dc_max=s["p_dc_max_mw"],
                eta_ch=s.get("eta_ch", 1.0),
                eta_dc=s.get("eta_dc", 1.0),
                kappa=s.get("kappa", 1.0),
                e_min=s.get("e_min_mwh"),
                e_max=s["e_max_mwh"],
                e_init=s["e_init_mwh"],
                degradation_cost=s.get("degradation_cost", 0.0),
                w_es_init=intensity(s.get("w_es_init", 0.0)),
            )
        buses.append(Bus(
            id=raw["id"],
            generators=tuple(gens),
            loads=tuple(loads),
            storage=storage,
            v_limits=tuple(raw.get("v_limits_pu", (0.9, 1.1))),
            theta_limits=tuple(raw.get("theta_limits_rad", (-math.pi, math.pi))),
            is_slack=bool(raw.get("slack", False)),
        ))
    branches = [
        Branch(from_bus=br["from"], to_bus=br["to"], g=br.get("g_pu", 0.0), b=br["b_pu"],
               s_max=br.get("s_max_pu", INF))
        for br in section["branches"]
    ]
    return Network(buses=tuple(buses), branches=tuple(branches), base_mva=section["base_mva"])


def _build_policy(section: Dict[str, Any], unit: EmissionUnit) -> CarbonPolicy:
    def intensity(v: float) -> float:
        return convert_emission_unit(v, unit, EmissionUnit.TON_PER_MWH)

    by_bus = {}
    for bus, caps in section.get("nci_cap_by_bus", {}).items():
        by_bus[int(bus)] = tuple(intensity(c) for c in (_series(caps) or ()))
    return CarbonPolicy(
        nci_cap=intensity(section.get("nci_cap", INF)),
        nci_cap_by_bus=by_bus,
        user_cap={str(k): float(v) for k, v in section.get("user_cap_ton", {}).items()},
        node_cap={int(k): float(v) for k, v in section.get("node_cap_ton", {}).items()},
        soft=bool(section.get("soft", False)),
        slack_penalty=float(section.get("slack_penalty", 0.0)),
    )


def case_from_dict(doc: Dict[str, Any], name: str = "", sha256: str = "") -> CaseFile:
    """
    Build a CaseFile from an already parsed document.

    Raises:
        UnitError: If the emission unit is unknown
        SchemaError: If the document violates the schema or a model invariant
    """
    network_section = doc.get("network") if isinstance(doc.get("network"), dict) else {}
    unit = _emission_unit(network_section.get("emission_unit"))
    _check_schema(doc)

    try:
        network = _build_network(doc["network"], unit)
        time = doc.get("time", {})
        grid = TimeGrid(periods=time.get("periods", 1), delta_t=time.get("delta_t_h", 1.0))
        policy_section = doc.get("policy", {})
        policy = _build_policy(policy_section, unit)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first.get("loc", ()))
        raise SchemaError(location or "network", first.get("msg", str(e))) from e

    solver = dict(doc.get("solver", {}))
    pf_model = solver.pop("pf_model", "dc")
    es_model = EsModelKind(solver.pop("es_model", EsModelKind.WATER_TANK.value))
    v_start = {int(k): float(v) for k, v in solver.pop("v_start_pu", {}).items()}
    try:
        SolverConfig(**solver)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError("/solver/" + ".".join(str(p) for p in first.get("loc", ())),
                          first.get("msg", str(e))) from e

    return CaseFile(
        network=network,
        grid=grid,
        policy=policy,
        emission_price=float(policy_section.get("emission_price_per_ton", 0.0)),
        pf_model=pf_model,
        es_model=es_model,
        solver=solver,
        v_start=v_start,
        source_unit=unit,
        name=doc.get("name", name),
        sha256=sha256,
    )


def load_case(path: Union[str, Path]) -> CaseFile:
    """
    Load and validate a case file.

    Args:
        path: YAML or JSON case file

    Returns:
        CaseFile in canonical units

    Raises:
        CaseError: If the file is missing, malformed, off-schema or uses an unknown unit
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CaseError(f"cannot read case file {path}: {e}") from e
    doc = _parse(raw.decode("utf-8"))
    case = case_from_dict(doc, name=path.stem, sha256=hashlib.sha256(raw).hexdigest())
    index = case.network.index()
    logger.info(
        f"Loaded case {case.name}: {index.n_bus} buses, {index.n_branch} branches, "
        f"{len(index.generators)} generators, {len(index.loads)} loads, "
        f"{len(index.storage)} storage, T={case.grid.periods}"
    )
    return case


def _scalar_or_list(series) -> Union[float, List[float]]:
    return float(series[0]) if len(series) == 1 else [float(v) for v in series]


def _put(target: Dict[str, Any], key: str, value, default):
    if value != default:
        target[key] = value


def case_to_dict(case: CaseFile) -> Dict[str, Any]:
    """Canonical document for a case; default-valued fields are omitted."""
    net = case.network
    buses = []
    for bus in net.buses:
        entry: Dict[str, Any] = {"id": bus.id}
        _put(entry, "slack", bus.is_slack, False)
        _put(entry, "v_limits_pu", list(bus.v_limits), [0.9, 1.1])
        _put(entry, "theta_limits_rad", list(bus.theta_limits), [-math.pi, math.pi])
        gens = []
        for g in bus.generators:
            out: Dict[str, Any] = {}
            _put(out, "name", g.name, None)
            _put(out, "p_min_mw", _scalar_or_list(g.p_min), 0.0)
            out["p_max_mw"] = _scalar_or_list(g.p_max)
            _put(out, "q_min_mvar", _scalar_or_list(g.q_min), -INF)
            _put(out, "q_max_mvar", _scalar_or_list(g.q_max), INF)
            _put(out, "ramp_down_mw", g.ramp_down, -INF)
            _put(out, "ramp_up_mw", g.ramp_up, INF)
            _put(out, "cost", list(g.cost), [0.0, 0.0, 0.0])
            _put(out, "emission_factor", g.emission_factor, 0.0)
            gens.append(out)
        if gens:
            entry["generators"] = gens
        loads = []
        for l in bus.loads:
            out = {}
            _put(out, "name", l.name, None)
            out["p_mw"] = _scalar_or_list(l.p)
            _put(out, "q_mvar", _scalar_or_list(l.q), 0.0)
            loads.append(out)
        if loads:
            entry["loads"] = loads
        if bus.storage is not None:
            s = bus.storage
            out = {}
            _put(out, "name", s.name, None)
            out.update({
                "p_ch_max_mw": s.p_ch_max, "p_dc_max_mw": s.p_dc_max,
                "eta_ch": s.eta_ch, "eta_dc": s.eta_dc, "kappa": s.kappa,
                "e_min_mwh": s.e_min, "e_max_mwh": s.e_max, "e_init_mwh": s.e_init,
            })
            _put(out, "degradation_cost", s.degradation_cost, 0.0)
            _put(out, "w_es_init", s.w_es_init, 0.0)
            entry["storage"] = out
        buses.append(entry)

    branches = []
    for br in net.branches:
        out = {"from": br.from_bus, "to": br.to_bus}
        _put(out, "g_pu", br.g, 0.0)
        out["b_pu"] = br.b
        _put(out, "s_max_pu", br.s_max, INF)
        branches.append(out)

    policy: Dict[str, Any] = {}
    pol = case.policy
    _put(policy, "nci_cap", pol.nci_cap, INF)
    _put(policy, "nci_cap_by_bus", {int(k): _scalar_or_list(v) for k, v in pol.nci_cap_by_bus.items()}, {})
    _put(policy, "user_cap_ton", dict(pol.user_cap), {})
    _put(policy, "node_cap_ton", {int(k): v for k, v in pol.node_cap.items()}, {})
    _put(policy, "soft", pol.soft, False)
    _put(policy, "slack_penalty", pol.slack_penalty, 0.0)
    _put(policy, "emission_price_per_ton", case.emission_price, 0.0)

    solver = {"pf_model": case.pf_model, "es_model": EsModelKind(case.es_model).value, **case.solver}
    if case.v_start:
        solver["v_start_pu"] = {int(k): v for k, v in case.v_start.items()}

    doc: Dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    if case.name:
        doc["name"] = case.name
    doc["network"] = {
        "base_mva": net.base_mva,
        "emission_unit": EmissionUnit.TON_PER_MWH.value,
        "buses": buses,
        "branches": branches,
    }
    doc["time"] = {"periods": case.grid.periods, "delta_t_h": case.grid.delta_t}
    if policy:
        doc["policy"] = policy
    doc["solver"] = solver
    return doc


def dump_case(case: CaseFile, path: Union[str, Path]) -> Path:
    """
    Write a case in canonical units (ton/MWh); loading it back gives the same values.

    Returns:
        Path written
    """
    path = Path(path)
    text = yaml.safe_dump(case_to_dict(case), sort_keys=False, default_flow_style=None)
    atomic_write_text(path, text)
    logger.info(f"Wrote case {case.name or path.stem} to {path}")
    return path
