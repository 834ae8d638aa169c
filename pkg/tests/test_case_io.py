"""
Tests for case file loading, validation errors and canonical dumps.
"""

import sys
from pathlib import Path

import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import SolverConfig
from core.storage_carbon import EsModelKind
from core.units import EmissionUnit
from tools.case_io import (
    CaseError,
    ParseError,
    SchemaError,
    UnitError,
    case_from_dict,
    dump_case,
    load_case,
)
from tests.networks import CASES, fixture_case

MINIMAL = """\
schema_version: 1
network:
  base_mva: 100
  emission_unit: {unit}
  buses:
    - id: 1
      slack: true
      generators:
        - p_max_mw: 50
          emission_factor: 1.0
    - id: 2
      loads:
        - p_mw: 20
  branches:
    - {{from: 1, to: 2, b_pu: -10.0}}
"""


def _write(tmp_path, text, name="case.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_thirty_nine_bus():
    """Test element counts and unit conversion of the 39-bus case."""
    print("\n=== Testing 39-bus case ===")

    case = fixture_case("thirty_nine_bus")
    index = case.network.index()
    print(f"{index.n_bus} buses, {index.n_branch} branches, {len(index.generators)} generators")

    assert index.n_bus == 39
    assert index.n_branch == 46
    assert len(index.generators) == 10
    assert len(index.loads) == 21
    assert len(index.storage) == 3
    assert case.grid.periods == 12
    assert case.grid.delta_t == 2.0
    assert case.pf_model == "ac"
    assert case.es_model == EsModelKind.WATER_TANK
    assert case.source_unit == EmissionUnit.LBS_PER_KWH
    assert case.v_start[31] == pytest.approx(0.982)
    assert len(case.sha256) == 64

    coal = next(ref.unit for ref in index.generators if ref.key == "COAL31")
    assert coal.emission_factor == pytest.approx(1.02511876, abs=1e-8)
    assert case.to_source_unit(coal.emission_factor) == pytest.approx(2.26)
    assert case.policy.nci_cap == pytest.approx(1.2 * 0.45359237)
    assert case.network.slack_bus == 31

    print("✓ 39-bus case loads!")


def test_shipped_cases_validate():
    """Test that every shipped case passes validation."""
    for path in sorted(CASES.glob("*.yaml")):
        case = load_case(path)
        report = case.problem().validate_problem()
        print(f"{path.stem}: {report.to_dict()}")
        assert report.ok, path.stem


def test_problem_overrides():
    """Test model overrides and solver settings merged from the file."""
    case = fixture_case("six_bus")
    problem = case.problem(pf_model="ac", es_model="load_clean_gen")
    assert problem.pf_model == "ac"
    assert problem.es_model == EsModelKind.LOAD_CLEAN_GEN

    settings = case.solver_config(SolverConfig(), method="auglag", max_iter=None)
    assert settings.method == "auglag"
    assert settings.max_iter == SolverConfig().max_iter


def test_schema_errors(tmp_path):
    """Test the error raised for each kind of bad input."""
    print("\n=== Testing case errors ===")

    with pytest.raises(SchemaError) as info:
        load_case(_write(tmp_path, MINIMAL.format(unit="ton_per_MWh").replace("  base_mva: 100\n", "")))
    print(f"Schema error: {info.value}")
    assert info.value.path == "/network"

    with pytest.raises(UnitError) as info:
        load_case(_write(tmp_path, MINIMAL.format(unit="g_per_kWh")))
    assert info.value.unit == "g_per_kWh"

    with pytest.raises(ParseError) as info:
        load_case(_write(tmp_path, "schema_version: 1\nnetwork: [1, 2\n"))
    print(f"Parse error: {info.value}")
    assert info.value.line is not None

    with pytest.raises(ParseError):
        load_case(_write(tmp_path, "- just\n- a list\n"))

    with pytest.raises(CaseError):
        load_case(tmp_path / "missing.yaml")

    print("✓ Case errors are raised!")


def test_model_invariant_becomes_schema_error():
    """Test that a document rejected by the data model surfaces as SchemaError."""
    doc = {
        "schema_version": 1,
        "network": {"base_mva": 100, "buses": [{"id": 1, "slack": True}], "branches": []},
        "policy": {"nci_cap": 0.5, "soft": True},
    }
    with pytest.raises(SchemaError):
        case_from_dict(doc)


def test_dump_and_reload(tmp_path):
    """Test that a dumped case reloads with identical values in canonical units."""
    print("\n=== Testing dump_case ===")

    original = fixture_case("thirty_nine_bus")
    path = dump_case(original, tmp_path / "canonical.yaml")
    reloaded = load_case(path)

    assert reloaded.source_unit == EmissionUnit.TON_PER_MWH
    assert reloaded.network == original.network
    assert reloaded.grid == original.grid
    assert reloaded.policy == original.policy
    assert reloaded.v_start == original.v_start
    assert reloaded.pf_model == original.pf_model

    print("✓ dump_case works!")


if __name__ == "__main__":
    test_thirty_nine_bus()
    test_shipped_cases_validate()
    test_problem_overrides()
