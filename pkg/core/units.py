"""
Unit handling for emission quantities.

Internal canonical units are MW, MWh, ton CO2 and ton/MWh. Other units are
converted at the I/O boundary only.
"""

from enum import Enum


class EmissionUnit(str, Enum):
    """Units of emission intensity."""
    TON_PER_MWH = "ton_per_MWh"
    LBS_PER_KWH = "lbs_per_kWh"


class MassUnit(str, Enum):
    """Units of emission mass."""
    TON = "ton"
    LBS = "lbs"
    KLBS = "klbs"


# ton/MWh per unit
_INTENSITY_FACTORS = {
    EmissionUnit.TON_PER_MWH: 1.0,
    EmissionUnit.LBS_PER_KWH: 0.45359237,
}

# ton per unit
_MASS_FACTORS = {
    MassUnit.TON: 1.0,
    MassUnit.LBS: 0.00045359237,
    MassUnit.KLBS: 0.45359237,
}


def convert_emission_unit(value: float, from_unit: EmissionUnit, to_unit: EmissionUnit) -> float:
    """
    Convert an emission intensity between units.

    1 lbs/kWh = 0.45359237 ton/MWh exactly.

    Args:
        value: Intensity expressed in from_unit
        from_unit: Source unit
        to_unit: Target unit

    Returns:
        Intensity expressed in to_unit
    """
    from_unit = EmissionUnit(from_unit)
    to_unit = EmissionUnit(to_unit)
    if from_unit == to_unit:
        return float(value)
    return float(value) * _INTENSITY_FACTORS[from_unit] / _INTENSITY_FACTORS[to_unit]


def convert_emission_mass(value: float, from_unit: MassUnit, to_unit: MassUnit) -> float:
    """Convert an emission mass between units."""
    from_unit = MassUnit(from_unit)
    to_unit = MassUnit(to_unit)
    if from_unit == to_unit:
        return float(value)
    return float(value) * _MASS_FACTORS[from_unit] / _MASS_FACTORS[to_unit]
