"""
Tests for storage energy dynamics and the storage carbon models.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.model import StorageUnit
from core.storage_carbon import (
    EnergyBoundViolation,
    EsModelKind,
    SimultaneousChargeDischarge,
    StorageCarbonState,
    StorageOperationError,
    TrajectoryStep,
    account_owner,
    carbon_mass_step,
    clean_powers,
    decompose_owner_account,
    discharge_intensity,
    intensity_step,
    mixing_weight,
    simulate,
    step_carbon_water_tank,
    step_energy,
)


def _unit(**overrides):
    params = dict(p_ch_max=20.0, p_dc_max=20.0, eta_ch=1.0, eta_dc=1.0, kappa=1.0,
                  e_min=1.0, e_max=100.0, e_init=50.0, w_es_init=0.2)
    params.update(overrides)
    return StorageUnit(**params)


def test_energy_step():
    """Test the energy update with efficiencies and self-discharge."""
    print("\n=== Testing energy step ===")

    unit = _unit(eta_ch=0.9, eta_dc=0.8, kappa=0.99)
    state = StorageCarbonState.initial(unit)

    charged = step_energy(state, 10.0, 0.0, unit, delta_t=2.0)
    discharged = step_energy(state, 0.0, 8.0, unit, delta_t=2.0)
    print(f"After charge: {charged}, after discharge: {discharged}")

    assert charged == pytest.approx(0.99 * 50.0 + 2.0 * 0.9 * 10.0)
    assert discharged == pytest.approx(0.99 * 50.0 - 2.0 * 8.0 / 0.8)

    with pytest.raises(EnergyBoundViolation):
        step_energy(state, 0.0, 20.0, unit, delta_t=3.0)
    assert step_energy(state, 0.0, 20.0, unit, delta_t=3.0, check_bounds=False) < unit.e_min

    print("✓ Energy step works!")


def test_power_checks():
    """Test simultaneous operation, negative powers and limits."""
    print("\n=== Testing power checks ===")

    unit = _unit()
    assert clean_powers(5.0, 1e-8, unit) == (5.0, 0.0)
    assert clean_powers(1e-8, 5.0, unit) == (0.0, 5.0)

    with pytest.raises(SimultaneousChargeDischarge):
        clean_powers(5.0, 1.0, unit)
    with pytest.raises(StorageOperationError):
        clean_powers(-1.0, 0.0, unit)
    with pytest.raises(StorageOperationError):
        clean_powers(25.0, 0.0, unit)

    print("✓ Power checks work!")


def test_water_tank_mixing():
    """Test that charging mixes the node intensity into the stored energy."""
    print("\n=== Testing water-tank mixing ===")

    unit = _unit()
    state = StorageCarbonState.initial(unit)
    assert state.E == pytest.approx(10.0)

    after = step_carbon_water_tank(state, 10.0, 0.0, 1.0, unit, delta_t=1.0)
    print(f"State after charging: {after}")

    assert mixing_weight(50.0, 10.0, unit, 1.0) == pytest.approx(50.0 / 60.0)
    assert after.e == pytest.approx(60.0)
    assert after.w_es == pytest.approx(20.0 / 60.0)
    assert after.E == pytest.approx(20.0)
    assert after.lam == pytest.approx(50.0 / 60.0)

    print("✓ Water-tank mixing works!")


def test_discharge_keeps_intensity():
    """Test that discharge and self-discharge leave the internal intensity unchanged."""
    print("\n=== Testing discharge ===")

    unit = _unit(kappa=0.97, eta_dc=0.9)
    state = StorageCarbonState.initial(unit)
    after = step_carbon_water_tank(state, 0.0, 9.0, 0.7, unit, delta_t=1.0)

    assert after.w_es == pytest.approx(unit.w_es_init)
    assert after.e == pytest.approx(0.97 * 50.0 - 10.0)
    assert after.lam == pytest.approx(1.0)

    assert discharge_intensity(after, EsModelKind.WATER_TANK) == pytest.approx(0.2)
    assert discharge_intensity(after, EsModelKind.LOAD_CLEAN_GEN) == 0.0

    with pytest.raises(ValueError):
        step_carbon_water_tank(state, 1.0, 0.0, -0.1, unit, delta_t=1.0)

    print("✓ Discharge keeps the intensity!")


def test_owner_account():
    """Test owner accounts under both models and the leakage decomposition."""
    print("\n=== Testing owner account ===")

    unit = _unit(eta_ch=0.95, eta_dc=0.95, kappa=0.99)
    p_ch = [10.0, 0.0, 5.0]
    p_dc = [0.0, 8.0, 0.0]
    w_node = [0.9, 0.4, 0.1]
    states = simulate(unit, p_ch, p_dc, w_node, delta_t=1.0)
    assert len(states) == 4

    trajectory = [TrajectoryStep(ch, dc, w, s.w_es) for ch, dc, w, s in zip(p_ch, p_dc, w_node, states)]
    tank = account_owner(trajectory, EsModelKind.WATER_TANK, 1.0)
    clean = account_owner(trajectory, EsModelKind.LOAD_CLEAN_GEN, 1.0)
    print(f"Water tank: {tank:.6f} ton, load/clean generator: {clean:.6f} ton")

    assert clean == pytest.approx(10.0 * 0.9 + 5.0 * 0.1)
    assert tank == pytest.approx(clean - 8.0 * states[1].w_es)

    split = decompose_owner_account(states, trajectory, unit, 1.0)
    print(f"Decomposition: {split}")
    assert split.total == pytest.approx(tank)
    assert split.stored_change + split.leakage == pytest.approx(split.total, abs=1e-9)
    assert split.leakage > 0

    print("✓ Owner account works!")


def _random_trajectory(rng, unit, steps, delta_t=1.0):
    """Charge or discharge at random each period, keeping e above 2 * e_min."""
    e = unit.e_init
    p_ch, p_dc, w_node = [], [], []
    for _ in range(steps):
        if rng.random() < 0.5:
            room = (unit.e_max - unit.kappa * e) / (delta_t * unit.eta_ch)
            ch, dc = rng.uniform(0.0, min(unit.p_ch_max, max(room, 0.0))), 0.0
        else:
            avail = (unit.kappa * e - 2.0 * unit.e_min) * unit.eta_dc / delta_t
            ch, dc = 0.0, rng.uniform(0.0, min(unit.p_dc_max, max(avail, 0.0)))
        e = unit.kappa * e + delta_t * (unit.eta_ch * ch - dc / unit.eta_dc)
        p_ch.append(ch)
        p_dc.append(dc)
        w_node.append(rng.uniform(0.0, 2.0))
    return p_ch, p_dc, w_node


def _trajectory(states, p_ch, p_dc, w_node):
    return [TrajectoryStep(ch, dc, w, s.w_es) for ch, dc, w, s in zip(p_ch, p_dc, w_node, states)]


def test_mass_and_intensity_forms_agree():
    """Test that E'/e' from the mass update equals the mixed intensity on random steps."""
    print("\n=== Testing mass and intensity forms ===")

    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        unit = _unit(eta_ch=rng.uniform(0.85, 1.0), eta_dc=rng.uniform(0.85, 1.0),
                     kappa=rng.uniform(0.99, 1.0), e_init=rng.uniform(10.0, 90.0),
                     w_es_init=rng.uniform(0.0, 1.5))
        p_ch, p_dc, w_node = _random_trajectory(rng, unit, steps=8)
        state = StorageCarbonState.initial(unit)
        E, w = state.E, state.w_es
        for ch, dc, w_n in zip(p_ch, p_dc, w_node):
            e_next = step_energy(state, ch, dc, unit, 1.0)
            E = carbon_mass_step(E, E / state.e, ch, dc, w_n, unit, 1.0)
            w = intensity_step(state.e, w, ch, w_n, unit, 1.0)
            worst = max(worst, abs(E / e_next - w))
            state = StorageCarbonState(e=e_next, E=E, w_es=w)
    print(f"Largest gap: {worst:.3e}")

    assert worst <= 1e-9

    print("✓ Mass and intensity forms agree!")


def test_lossless_owner_account_matches_stored_change():
    """Test that a lossless unit's water-tank account is the change in stored emissions."""
    print("\n=== Testing lossless owner account ===")

    unit = _unit()
    rng = np.random.default_rng(11)
    for _ in range(50):
        p_ch, p_dc, w_node = _random_trajectory(rng, unit, steps=10)
        states = simulate(unit, p_ch, p_dc, w_node, delta_t=1.0)
        tank = account_owner(_trajectory(states, p_ch, p_dc, w_node), EsModelKind.WATER_TANK, 1.0)
        assert tank == pytest.approx(states[-1].E - states[0].E, abs=1e-9)

    # charge dirty, charge clean, drain, and end with the starting energy and emissions
    p_ch = [10.0, 0.0, 10.0, 0.0, 10.0]
    p_dc = [0.0, 10.0, 0.0, 20.0, 0.0]
    w_node = [0.8, 0.5, 0.0, 0.5, 0.0]
    states = simulate(unit, p_ch, p_dc, w_node, delta_t=1.0)
    print(f"Stored emissions: {[round(s.E, 9) for s in states]}")
    assert states[-1].e == pytest.approx(states[0].e)
    assert states[-1].E == pytest.approx(states[0].E, abs=1e-9)

    tank = account_owner(_trajectory(states, p_ch, p_dc, w_node), EsModelKind.WATER_TANK, 1.0)
    assert abs(tank) <= 1e-9

    print("✓ Lossless cycle leaves no owner emissions!")


def test_clean_generator_model_attributes_more():
    """Test that the load/clean generator account never falls below the water-tank one."""
    print("\n=== Testing owner account ordering ===")

    rng = np.random.default_rng(5)
    for _ in range(50):
        unit = _unit(eta_ch=rng.uniform(0.85, 1.0), eta_dc=rng.uniform(0.85, 1.0),
                     kappa=rng.uniform(0.99, 1.0), w_es_init=rng.uniform(0.0, 1.5))
        p_ch, p_dc, w_node = _random_trajectory(rng, unit, steps=12)
        states = simulate(unit, p_ch, p_dc, w_node, delta_t=1.0)
        trajectory = _trajectory(states, p_ch, p_dc, w_node)
        tank = account_owner(trajectory, EsModelKind.WATER_TANK, 1.0)
        clean = account_owner(trajectory, EsModelKind.LOAD_CLEAN_GEN, 1.0)
        assert clean >= tank - 1e-12

    print("✓ Load/clean generator attribution bounds the water tank!")


@settings(max_examples=60, deadline=None)
@given(
    w0=st.floats(min_value=0.0, max_value=2.0),
    steps=st.lists(
        st.tuples(
            st.floats(min_value=0.0, max_value=10.0),
            st.booleans(),
            st.floats(min_value=0.0, max_value=2.0),
        ),
        min_size=1,
        max_size=6,
    ),
)
def test_intensity_stays_in_hull(w0, steps):
    """Test that the internal intensity stays between the smallest and largest intensity seen."""
    unit = _unit(w_es_init=w0, e_max=200.0, e_init=100.0, kappa=0.995, eta_ch=0.95, eta_dc=0.95)
    state = StorageCarbonState.initial(unit)
    seen = [w0]
    for power, charging, w_node in steps:
        p_ch, p_dc = (power, 0.0) if charging else (0.0, power)
        state = step_carbon_water_tank(state, p_ch, p_dc, w_node, unit, delta_t=1.0)
        if charging and power > 0:
            seen.append(w_node)
        assert min(seen) - 1e-12 <= state.w_es <= max(seen) + 1e-12
        assert state.E == pytest.approx(state.w_es * state.e)
        assert 0.0 < state.lam <= 1.0


if __name__ == "__main__":
    test_energy_step()
    test_power_checks()
    test_water_tank_mixing()
    test_discharge_keeps_intensity()
    test_owner_account()
    test_mass_and_intensity_forms_agree()
    test_lossless_owner_account_matches_stored_change()
    test_clean_generator_model_attributes_more()
