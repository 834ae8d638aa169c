"""
Storage carbon module for the carbon-aware OPF toolkit.

Energy dynamics of storage units and the two carbon footprint models:
water tank (stored emissions travel with the energy) and load/clean
generator (charging is a load, discharging is zero-intensity generation).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

from core.model import StorageUnit

logger = logging.getLogger(__name__)

SIMULTANEOUS_TOL_MW = 1e-6


class StorageOperationError(Exception):
    """Raised when a storage setpoint is outside its operating envelope."""
    pass


class EnergyBoundViolation(StorageOperationError):
    """Raised when the next stored energy leaves [e_min, e_max]."""
    pass


class SimultaneousChargeDischarge(StorageOperationError):
    """Raised when a unit both charges and discharges beyond tolerance."""
    pass


class EsModelKind(str, Enum):
    """Storage carbon footprint model."""
    WATER_TANK = "water_tank"
    LOAD_CLEAN_GEN = "load_clean_gen"


@dataclass(frozen=True)
class StorageCarbonState:
    """
    Storage state at the start of a period.

    Attributes:
        e: Stored energy (MWh)
        E: Virtually stored emissions (ton)
        w_es: Internal carbon intensity E/e (ton/MWh)
        lam: Mixing weight of the step that produced this state
    """
    e: float
    E: float
    w_es: float
    lam: float = 1.0

    @classmethod
    def initial(cls, unit: StorageUnit) -> "StorageCarbonState":
        return cls(e=unit.e_init, E=unit.w_es_init * unit.e_init, w_es=unit.w_es_init)


class TrajectoryStep(NamedTuple):
    """One period of a storage trajectory as seen by the owner account."""
    p_ch: float
    p_dc: float
    w_node: float
    w_es: float


@dataclass(frozen=True)
class OwnerAccount:
    """Water-tank owner account split into stored change and leakage (ton)."""
    total: float
    stored_change: float
    leakage: float


def clean_powers(p_ch: float, p_dc: float, unit: StorageUnit) -> Tuple[float, float]:
    """
    Check power limits and resolve solver noise in simultaneous operation.

    Returns:
        (p_ch, p_dc) with the smaller one zeroed

    Raises:
        SimultaneousChargeDischarge: If both exceed 1e-6 MW
        StorageOperationError: If a power is negative or above its limit
    """
    if min(p_ch, p_dc) > SIMULTANEOUS_TOL_MW:
        raise SimultaneousChargeDischarge(
            f"charging {p_ch:.6g} MW and discharging {p_dc:.6g} MW in the same period"
        )
    if p_ch < -SIMULTANEOUS_TOL_MW or p_dc < -SIMULTANEOUS_TOL_MW:
        raise StorageOperationError("storage powers must be nonnegative")
    if p_ch > unit.p_ch_max + SIMULTANEOUS_TOL_MW or p_dc > unit.p_dc_max + SIMULTANEOUS_TOL_MW:
        raise StorageOperationError(
            f"storage power ({p_ch:.6g}, {p_dc:.6g}) MW exceeds limits "
            f"({unit.p_ch_max}, {unit.p_dc_max}) MW"
        )
    p_ch, p_dc = max(p_ch, 0.0), max(p_dc, 0.0)
    if p_ch >= p_dc:
        return p_ch, 0.0
    return 0.0, p_dc


def step_energy(
    state: StorageCarbonState,
    p_ch: float,
    p_dc: float,
    unit: StorageUnit,
    delta_t: float,
    check_bounds: bool = True,
) -> float:
    """
    Advance stored energy by one period.

    e' = kappa e + delta_t (eta_ch P_ch - P_dc / eta_dc)

    Raises:
        EnergyBoundViolation: If e' leaves [e_min, e_max]
        SimultaneousChargeDischarge: If both powers are significantly positive
    """
    p_ch, p_dc = clean_powers(p_ch, p_dc, unit)
    e_next = unit.kappa * state.e + delta_t * (unit.eta_ch * p_ch - p_dc / unit.eta_dc)
    tol = 1e-9 * max(1.0, unit.e_max)
    if check_bounds and (e_next < unit.e_min - tol or e_next > unit.e_max + tol):
        raise EnergyBoundViolation(
            f"stored energy {e_next:.6g} MWh outside [{unit.e_min}, {unit.e_max}]"
        )
    return e_next


def mixing_weight(e: float, p_ch: float, unit: StorageUnit, delta_t: float) -> float:
    """lambda = kappa e / (kappa e + delta_t eta_ch P_ch); discharge does not enter."""
    retained = unit.kappa * e
    return retained / (retained + delta_t * unit.eta_ch * p_ch)


def carbon_mass_step(
    E: float, w_es: float, p_ch: float, p_dc: float, w_node: float,
    unit: StorageUnit, delta_t: float,
) -> float:
    """E' = kappa E + delta_t (w_node eta_ch P_ch - w_es P_dc / eta_dc)."""
    return unit.kappa * E + delta_t * (w_node * unit.eta_ch * p_ch - w_es * p_dc / unit.eta_dc)


def intensity_step(
    e: float, w_es: float, p_ch: float, w_node: float,
    unit: StorageUnit, delta_t: float,
) -> float:
    """w_es' = lambda w_es + (1 - lambda) w_node."""
    lam = mixing_weight(e, p_ch, unit, delta_t)
    return lam * w_es + (1.0 - lam) * w_node


def step_carbon_water_tank(
    state: StorageCarbonState,
    p_ch: float,
    p_dc: float,
    w_node: float,
    unit: StorageUnit,
    delta_t: float,
    check_bounds: bool = True,
) -> StorageCarbonState:
    """
    Advance energy and stored emissions under the water-tank model.

    The mass form and the intensity form are evaluated side by side; the
    intensity form is returned and E is kept equal to w_es * e.

    Args:
        state: State at the start of the period
        p_ch: Charging power (MW)
        p_dc: Discharging power (MW)
        w_node: Carbon intensity of the bus feeding the unit (ton/MWh)
        unit: Storage parameters
        delta_t: Period length (h)
        check_bounds: Reject energies outside [e_min, e_max]

    Returns:
        State at the start of the next period
    """
    if w_node < 0:
        raise ValueError("nodal carbon intensity must be nonnegative")
    p_ch, p_dc = clean_powers(p_ch, p_dc, unit)
    e_next = step_energy(state, p_ch, p_dc, unit, delta_t, check_bounds)
    lam = mixing_weight(state.e, p_ch, unit, delta_t)
    w_next = intensity_step(state.e, state.w_es, p_ch, w_node, unit, delta_t)
    w_from_mass = carbon_mass_step(state.E, state.w_es, p_ch, p_dc, w_node, unit, delta_t) / e_next
    if abs(w_from_mass - w_next) > 1e-9 * max(1.0, abs(w_next)):
        logger.warning(
            f"Stored-emission and intensity forms disagree: {w_from_mass:.12g} vs {w_next:.12g}"
        )
    return StorageCarbonState(e=e_next, E=w_next * e_next, w_es=w_next, lam=lam)


def discharge_intensity(state: StorageCarbonState, kind: EsModelKind) -> float:
    """Carbon intensity of discharged energy: w_es (water tank) or 0 (load/clean generator)."""
    if EsModelKind(kind) == EsModelKind.LOAD_CLEAN_GEN:
        return 0.0
    return state.w_es


def simulate(
    unit: StorageUnit,
    p_ch: Sequence[float],
    p_dc: Sequence[float],
    w_node: Sequence[float],
    delta_t: float,
    initial: Optional[StorageCarbonState] = None,
) -> List[StorageCarbonState]:
    """
    Step a unit through a horizon.

    Returns:
        T + 1 states, the first being the initial one
    """
    states = [initial or StorageCarbonState.initial(unit)]
    for ch, dc, w in zip(p_ch, p_dc, w_node):
        states.append(step_carbon_water_tank(states[-1], ch, dc, w, unit, delta_t))
    return states


def account_owner(trajectory: Iterable[TrajectoryStep], kind: EsModelKind, delta_t: float) -> float:
    """
    Emissions attributed to the storage owner over a horizon (ton).

    Water tank: sum of delta_t (w_node P_ch - w_es P_dc).
    Load/clean generator: sum of delta_t w_node P_ch.
    """
    kind = EsModelKind(kind)
    total = 0.0
    for step in trajectory:
        p_ch, p_dc, w_node, w_es = step
        total += delta_t * w_node * p_ch
        if kind == EsModelKind.WATER_TANK:
            total -= delta_t * w_es * p_dc
    return total


def decompose_owner_account(
    states: Sequence[StorageCarbonState],
    trajectory: Sequence[TrajectoryStep],
    unit: StorageUnit,
    delta_t: float,
) -> OwnerAccount:
    """
    Split the water-tank owner account into stored change and physical leakage.

    Leakage per period is (1 - kappa) E_t + delta_t (1 - eta_ch) w P_ch
    + delta_t (1/eta_dc - 1) w_es P_dc.

    Args:
        states: T + 1 states from simulate()
        trajectory: T steps matching the states
        unit: Storage parameters
        delta_t: Period length (h)
    """
    leakage = 0.0
    for state, (p_ch, p_dc, w_node, w_es) in zip(states[:-1], trajectory):
        leakage += (1.0 - unit.kappa) * state.E
        leakage += delta_t * (1.0 - unit.eta_ch) * w_node * p_ch
        leakage += delta_t * (1.0 / unit.eta_dc - 1.0) * w_es * p_dc
    stored_change = states[-1].E - states[0].E
    total = account_owner(trajectory, EsModelKind.WATER_TANK, delta_t)
    return OwnerAccount(total=total, stored_change=stored_change, leakage=leakage)
