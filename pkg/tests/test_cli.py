"""
Tests for the command-line front end: outputs, exit codes and error payloads.
"""

import argparse
import json
import sys
from pathlib import Path

import pandas as pd
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.copf import Infeasible, NoConvergence
from tools.case_io import SchemaError
from tools.cli import EXIT_CASE, EXIT_INFEASIBLE, EXIT_NO_CONVERGENCE, EXIT_OK, classify_error, parse_caps, run_command
from tools.results import ResultBundle
from tests.networks import CASES

TWO_BUS = str(CASES / "two_bus.yaml")
THREE_BUS = str(CASES / "three_bus.yaml")


def _stderr_payload(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_parse_caps():
    """Test inclusive ranges and explicit lists."""
    caps = parse_caps("1.0:2.2:0.1")
    assert len(caps) == 13
    assert caps[0] == 1.0
    assert caps[-1] == pytest.approx(2.2)
    assert caps[3] == 1.3

    assert parse_caps("0.5, 1,2") == [0.5, 1.0, 2.0]
    for bad in ("1:0:0.1", "0:1:0", "a,b"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_caps(bad)


def test_opf_and_pf(tmp_path):
    """Test the OPF bundle and a power flow run from it."""
    print("\n=== Testing opf and pf ===")

    opf_out = tmp_path / "opf.json"
    assert run_command(["opf", TWO_BUS, "--out", str(opf_out)]) == EXIT_OK
    bundle = ResultBundle.load(opf_out)
    solution = bundle.payload["solution"]
    print(f"OPF objective: {solution['objective']}")
    assert bundle.kind == "opf"
    assert solution["objective"] == pytest.approx(2100.0, rel=1e-5)
    assert bundle.provenance.input_sha256

    pf_out = tmp_path / "pf.json"
    assert run_command(["pf", TWO_BUS, "--dispatch", str(opf_out), "--out", str(pf_out)]) == EXIT_OK
    pf = ResultBundle.load(pf_out)
    period = pf.payload["periods"][0]
    assert period["p_from_mw"][0] == pytest.approx(100.0, abs=1e-3)
    assert pf.residuals["periods"][0]["p_mismatch_pu"] < 1e-8

    print("✓ opf and pf work!")


def test_cflow_and_account(tmp_path):
    """Test carbon flow tables and the accounting outputs for explicit setpoints."""
    print("\n=== Testing cflow and account ===")

    dispatch = tmp_path / "dispatch.yaml"
    dispatch.write_text("gen_p_mw: [[30.0, 70.0]]\n", encoding="utf-8")

    cflow_dir = tmp_path / "cflow"
    assert run_command(["cflow", THREE_BUS, "--dispatch", str(dispatch), "--out-dir", str(cflow_dir)]) == EXIT_OK
    nodes = pd.read_csv(cflow_dir / "nodes.csv")
    branches = pd.read_csv(cflow_dir / "branches.csv")
    print(nodes)
    assert len(nodes) == 3
    assert len(branches) == 3
    assert nodes.loc[nodes["node"] == 3, "w_ton_per_mwh"].iloc[0] == pytest.approx(0.6)

    account_dir = tmp_path / "account"
    assert run_command(["account", THREE_BUS, "--dispatch", str(dispatch), "--out-dir", str(account_dir)]) == EXIT_OK
    for name in ("ledger.csv", "scopes.csv", "average_comparison.csv", "audit.json"):
        assert (account_dir / name).exists(), name
    audit = json.loads((account_dir / "audit.json").read_text(encoding="utf-8"))
    assert audit["audit"]["passed"]
    assert audit["totals_ton"]["scope1_gen"] == pytest.approx(60.0)
    assert "totals_klbs" not in audit

    print("✓ cflow and account work!")


def test_copf_and_sweep(tmp_path):
    """Test the C-OPF bundle and a short sweep table."""
    print("\n=== Testing copf and sweep ===")

    out = tmp_path / "copf.json"
    assert run_command(["copf", THREE_BUS, "--out", str(out)]) == EXIT_OK
    solution = ResultBundle.load(out).payload["solution"]
    assert solution["w_ton_per_mwh"][0][2] <= 1.0 + 1e-6

    table = tmp_path / "sweep.csv"
    assert run_command(["sweep", TWO_BUS, "--caps", "0.5,1.0", "--out", str(table)]) == EXIT_OK
    sweep = pd.read_csv(table)
    print(sweep)
    assert list(sweep["status"]) == ["infeasible_hard_cap", "optimal"]
    assert "cap_ton_per_MWh" in sweep.columns

    print("✓ copf and sweep work!")


def test_copf_soft_and_oracle(tmp_path):
    """Test soft caps from the command line and the oracle switch."""
    soft = tmp_path / "soft.json"
    code = run_command(["copf", TWO_BUS, "--cap", "0.5", "--soft", "--penalty", "1000", "--out", str(soft)])
    assert code == EXIT_OK
    solution = ResultBundle.load(soft).payload["solution"]
    assert solution["slack_nci"][0][1] == pytest.approx(0.4, abs=1e-5)

    oracle = tmp_path / "oracle.json"
    assert run_command(["copf", TWO_BUS, "--oracle", "--workers", "1", "--out", str(oracle)]) == EXIT_OK
    assert ResultBundle.load(oracle).payload["solution"]["pattern"] == [1]


def test_infeasible_exit_code(tmp_path, capsys):
    """Test that a hard cap below every fossil factor exits 1 with a JSON error."""
    print("\n=== Testing infeasible exit ===")

    out = tmp_path / "copf.json"
    code = run_command(["copf", str(CASES / "all_fossil.yaml"), "--out", str(out)])
    payload = _stderr_payload(capsys)
    print(f"Payload: {payload}")

    assert code == EXIT_INFEASIBLE
    assert payload["error"] == "infeasible_hard_cap"
    assert payload["details"]["offending"]
    assert not out.exists()

    print("✓ Infeasible exit works!")


def test_case_error_exit_code(tmp_path, capsys):
    """Test that a broken case exits 2."""
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nnetwork: {buses: []}\n", encoding="utf-8")
    code = run_command(["opf", str(bad), "--out", str(tmp_path / "opf.json")])
    payload = _stderr_payload(capsys)
    assert code == EXIT_CASE
    assert payload["error"] == "schema_error"

    code = run_command(["opf", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "opf.json")])
    assert code == EXIT_CASE
    assert _stderr_payload(capsys)["error"] == "case_error"

    code = run_command(["copf", TWO_BUS, "--soft", "--out", str(tmp_path / "copf.json")])
    assert code == EXIT_CASE


def test_classify_error():
    """Test the exit code mapping of solver exceptions."""
    code, payload = classify_error(Infeasible("infeasible", "no dispatch"))
    assert code == EXIT_INFEASIBLE
    assert payload["error"] == "infeasible"

    code, payload = classify_error(NoConvergence("eps=1e-06"))
    assert code == EXIT_NO_CONVERGENCE
    assert payload["details"]["stage"] == "eps=1e-06"

    code, payload = classify_error(SchemaError("/network", "missing base_mva"))
    assert code == EXIT_CASE
    assert payload["details"]["path"] == "/network"

    assert classify_error(RuntimeError("unexpected")) is None


if __name__ == "__main__":
    test_parse_caps()
    test_classify_error()
