"""
Result serialization.

Result bundles (JSON) carry a solution payload, residual reports and
provenance. CSV tables carry explicit units in every header and are written
with stable row ordering. All writes go through a temporary file and an
atomic rename.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core import __version__
from core.carbon_flow import CarbonFlowSolution
from core.power_flow import PowerFlowSolution

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "carbon-opf-bundle/1"


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write text to path via a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value
    return value


def atomic_write_json(path: Union[str, Path], data: Any) -> Path:
    return atomic_write_text(path, json.dumps(_jsonable(data), indent=2) + "\n")


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a DataFrame as CSV atomically, without the index."""
    path = atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))
    logger.info(f"Wrote {len(frame)} row(s) to {path}")
    return path


@dataclass
class Provenance:
    """Where a result came from."""
    input_sha256: str
    tool_version: str = __version__
    tolerances: Dict[str, Any] = field(default_factory=dict)
    command: str = ""
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_sha256": self.input_sha256,
            "tool_version": self.tool_version,
            "tolerances": self.tolerances,
            "command": self.command,
            "created_at": self.created_at,
        }


@dataclass
class ResultBundle:
    """
    Serialized outcome of one CLI run.

    Attributes:
        kind: Payload kind (pf, opf, copf, sweep, ...)
        payload: JSON-ready solution data
        residuals: JSON-ready residual or audit reports
        provenance: Input hash, tool version and tolerances
    """
    kind: str
    payload: Dict[str, Any]
    provenance: Provenance
    residuals: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": BUNDLE_FORMAT,
            "kind": self.kind,
            "provenance": self.provenance.to_dict(),
            "residuals": self.residuals,
            "payload": self.payload,
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = atomic_write_json(path, self.to_dict())
        logger.info(f"Wrote {self.kind} bundle to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ResultBundle":
        """
        Read a bundle written by save().

        Raises:
            ValueError: If the file is not a result bundle
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"{path} is not a result bundle")
        prov = data.get("provenance", {})
        return cls(
            kind=data["kind"],
            payload=data.get("payload", {}),
            residuals=data.get("residuals", {}),
            provenance=Provenance(
                input_sha256=prov.get("input_sha256", ""),
                tool_version=prov.get("tool_version", ""),
                tolerances=prov.get("tolerances", {}),
                command=prov.get("command", ""),
                created_at=prov.get("created_at", ""),
            ),
        )


def power_flow_payload(pf: PowerFlowSolution, period: int = 0) -> Dict[str, Any]:
    return {
        "period": period,
        "model": pf.model,
        "bus_ids": list(pf.bus_ids),
        "vm_pu": pf.vm,
        "va_rad": pf.va,
        "p_from_mw": pf.p_from,
        "p_to_mw": pf.p_to,
        "q_from_mvar": pf.q_from,
        "q_to_mvar": pf.q_to,
        "p_loss_mw": pf.p_loss,
        "gen_p_mw": pf.gen_p,
        "gen_q_mvar": pf.gen_q,
        "iterations": pf.iterations,
        "mismatch_pu": pf.mismatch,
    }


def node_frame(carbon_flows: Sequence[CarbonFlowSolution], load_bus_pos: Sequence[int]) -> pd.DataFrame:
    """
    One row per node and period: intensity and load carbon rate.

    Rows are ordered by node index, then period.
    """
    rows = []
    for cf in carbon_flows:
        r_load_bus = np.zeros(len(cf.bus_ids))
        if len(load_bus_pos):
            np.add.at(r_load_bus, np.asarray(load_bus_pos, dtype=int), cf.r_load)
        for i, bus in enumerate(cf.bus_ids):
            rows.append({
                "node_index": i,
                "node": bus,
                "period": cf.period,
                "w_ton_per_mwh": float(cf.w[i]),
                "r_load_ton_per_h": float(r_load_bus[i]),
            })
    frame = pd.DataFrame(rows, columns=["node_index", "node", "period", "w_ton_per_mwh", "r_load_ton_per_h"])
    return frame.sort_values(["node_index", "period"], kind="stable").reset_index(drop=True)


def branch_frame(carbon_flows: Sequence[CarbonFlowSolution]) -> pd.DataFrame:
    """One row per branch and period with both-end carbon rates and the loss rate."""
    rows = [
        {
            "branch_index": k,
            "branch": key,
            "period": cf.period,
            "r_from_ton_per_h": float(cf.r_branch_from[k]),
            "r_to_ton_per_h": float(cf.r_branch_to[k]),
            "r_loss_ton_per_h": float(cf.r_loss[k]),
        }
        for cf in carbon_flows
        for k, key in enumerate(cf.branch_keys)
    ]
    columns = ["branch_index", "branch", "period", "r_from_ton_per_h", "r_to_ton_per_h", "r_loss_ton_per_h"]
    frame = pd.DataFrame(rows, columns=columns)
    return frame.sort_values(["branch_index", "period"], kind="stable").reset_index(drop=True)


def sweep_frame(points: Sequence[Any], source_caps: Optional[Sequence[float]] = None,
                source_unit: str = "ton_per_MWh") -> pd.DataFrame:
    """
    Cap sweep table: cap, cost, emissions and status per point.

    Args:
        points: SweepPoint sequence
        source_caps: Caps as given by the user, in source_unit
        source_unit: Unit label of source_caps
    """
    rows: List[Dict[str, Any]] = []
    for k, point in enumerate(points):
        row = {}
        if source_caps is not None:
            row[f"cap_{source_unit}"] = float(source_caps[k])
        row.update({
            "cap_ton_per_mwh": point.cap,
            "cost_usd": point.cost,
            "emissions_ton": point.emissions_ton,
            "status": point.status,
        })
        rows.append(row)
    return pd.DataFrame(rows)
