"""
Command-line front end.

Subcommands: pf, cflow, account, opf, copf, sweep. Exit codes: 0 success,
1 infeasible, 2 case or validation error, 3 no convergence. Errors are
reported as one JSON object on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from config import LoggingConfig, SolverConfig, cfg, configure_logging
from core import __version__
from core.accounting import aggregate_horizon, audit_conservation, compare_with_average, trace_horizon
from core.carbon_flow import CarbonFlowError, CarbonFlowInfeasible
from core.carbon_flow import NoConvergence as CarbonFlowNoConvergence
from core.copf import (
    AllPatternsInfeasible,
    DispatchSolution,
    Infeasible,
    InvalidProblem,
    NoConvergence,
    solve_copf,
    solve_opf,
    sweep_cap,
)
from core.dispatch_model import CarbonPolicy
from core.enum_oracle import solve_enum_oracle
from core.power_flow import (
    Dispatch,
    PowerFlowError,
    PowerFlowSolution,
    SingularSystem,
    nodal_mismatch,
    solve_power_flow,
)
from core.power_flow import NoConvergence as PowerFlowNoConvergence
from core.storage_carbon import EsModelKind
from core.units import EmissionUnit, MassUnit, convert_emission_unit
from tools.case_io import CaseError, CaseFile, ParseError, SchemaError, UnitError, load_case
from tools.results import (
    Provenance,
    ResultBundle,
    atomic_write_json,
    branch_frame,
    node_frame,
    power_flow_payload,
    sweep_frame,
    write_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_CASE = 2
EXIT_NO_CONVERGENCE = 3


def parse_caps(text: str) -> List[float]:
    """
    Parse ``start:stop:step`` (inclusive) or a comma-separated list.

    Raises:
        argparse.ArgumentTypeError: If the text is malformed
    """
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(round((stop - start) / step)) + 1
            return [round(start + k * step, 12) for k in range(count)]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid cap list: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carbon-opf",
        description="Carbon emission flow tracing and carbon-aware OPF",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default=None)
    parser.add_argument("--log-format", choices=["console", "json"], default=None)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("case", type=Path, help="Case file (YAML or JSON)")
    common.add_argument("--pf-model", choices=["dc", "ac"], default=None)
    common.add_argument("--es-model", choices=["water_tank", "load_clean_gen"], default=None)
    common.add_argument("--method", choices=["slsqp", "auglag"], default=None)
    common.add_argument("--tol-feas", type=float, default=None)
    common.add_argument("--max-iter", type=int, default=None)

    dispatch_from = argparse.ArgumentParser(add_help=False)
    dispatch_from.add_argument(
        "--dispatch", type=Path, default=None,
        help="opf/copf bundle or dispatch YAML; defaults to the OPF dispatch of the case",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    pf = sub.add_parser("pf", parents=[common, dispatch_from], help="Power flow per period")
    pf.add_argument("--out", type=Path, required=True, help="Result bundle (JSON)")

    cflow = sub.add_parser("cflow", parents=[common, dispatch_from], help="Carbon emission flow")
    cflow.add_argument("--out-dir", type=Path, required=True)

    account = sub.add_parser("account", parents=[common, dispatch_from], help="Emission accounting")
    account.add_argument("--out-dir", type=Path, required=True)

    opf = sub.add_parser("opf", parents=[common], help="OPF baseline")
    opf.add_argument("--out", type=Path, required=True)

    copf = sub.add_parser("copf", parents=[common], help="Carbon-aware OPF")
    copf.add_argument("--out", type=Path, required=True)
    copf.add_argument("--cap", type=float, default=None,
                      help="Uniform nodal intensity cap in the case's emission unit")
    copf.add_argument("--soft", action="store_true", help="Price cap violations instead of enforcing them")
    copf.add_argument("--penalty", type=float, default=None, help="Slack penalty for soft caps")
    copf.add_argument("--oracle", action="store_true", help="Solve by direction enumeration (small DC cases)")
    copf.add_argument("--workers", type=int, default=None)

    sweep = sub.add_parser("sweep", parents=[common], help="Uniform cap sweep")
    sweep.add_argument("--caps", type=parse_caps, required=True,
                       help="start:stop:step (inclusive) or a comma-separated list, in the case's unit")
    sweep.add_argument("--out", type=Path, required=True, help="Sweep table (CSV)")
    sweep.add_argument("--workers", type=int, default=None)
    sweep.add_argument("--executor", choices=["thread", "process"], default=None)
    return parser


def _settings(case: CaseFile, args: argparse.Namespace) -> SolverConfig:
    return case.solver_config(cfg().solver, method=args.method, tol_feas=args.tol_feas,
                              max_iter=args.max_iter)


def _problem(case: CaseFile, args: argparse.Namespace, policy=None):
    return case.problem(
        pf_model=args.pf_model or case.pf_model,
        es_model=args.es_model or case.es_model,
        policy=policy,
    )


def _provenance(case: CaseFile, settings: SolverConfig, command: str) -> Provenance:
    return Provenance(
        input_sha256=case.sha256,
        tolerances={
            "tol_feas": settings.tol_feas,
            "tol_comp": settings.tol_comp,
            "tol_kkt": settings.tol_kkt,
            "eps_end": settings.eps_end,
        },
        command=command,
    )


def _dispatch_solution(case: CaseFile, args: argparse.Namespace, settings: SolverConfig) -> DispatchSolution:
    if args.dispatch is None:
        logger.info("No dispatch given; using the OPF dispatch of the case")
        return solve_opf(_problem(case, args), settings)
    text = args.dispatch.read_text(encoding="utf-8")
    if args.dispatch.suffix == ".json":
        data = json.loads(text)
        if data.get("kind") in ("opf", "copf"):
            return DispatchSolution.from_dict(data["payload"]["solution"])
    return _solution_from_setpoints(case, args, yaml.safe_load(text))


def _solution_from_setpoints(case: CaseFile, args: argparse.Namespace, data: Dict[str, Any]) -> DispatchSolution:
    """Run power flow per period for explicit setpoints (gen_p_mw, storage_ch_mw, ...)."""
    if not isinstance(data, dict) or "gen_p_mw" not in data:
        raise SchemaError(str(args.dispatch), "dispatch file needs gen_p_mw")
    network, grid = case.network, case.grid
    index = network.index()
    T = grid.periods
    model = args.pf_model or case.pf_model

    def matrix(key: str, width: int) -> np.ndarray:
        raw = data.get(key)
        if raw is None:
            return np.zeros((T, width))
        arr = np.asarray(raw, dtype=float).reshape(-1, width)
        return np.repeat(arr, T, axis=0) if arr.shape[0] == 1 else arr

    gen_p = matrix("gen_p_mw", len(index.generators))
    gen_q = matrix("gen_q_mvar", len(index.generators))
    ch = matrix("storage_ch_mw", len(index.storage))
    dc = matrix("storage_dc_mw", len(index.storage))
    v_set = {int(k): float(v) for k, v in (data.get("v_set_pu") or {}).items()}
    flows = [
        solve_power_flow(
            network,
            Dispatch.for_period(network, t, gen_p[t], gen_q[t], ch[t], dc[t], v_set),
            model=model,
            settings=cfg().power_flow,
        )
        for t in range(T)
    ]
    return _solution_from_flows(case, args, flows)


def _solution_from_flows(case: CaseFile, args, flows: Sequence[PowerFlowSolution]) -> DispatchSolution:
    index = case.network.index()
    T, B, S, N = len(flows), index.n_branch, len(index.storage), index.n_bus
    e = np.zeros((T + 1, S))
    for s, ref in enumerate(index.storage):
        e[0, s] = ref.unit.e_init
        for t, pf in enumerate(flows):
            unit = ref.unit
            e[t + 1, s] = unit.kappa * e[t, s] + case.grid.delta_t * (
                unit.eta_ch * pf.storage_ch[s] - pf.storage_dc[s] / unit.eta_dc)
    zeros_tb = np.zeros((T, B))
    return DispatchSolution(
        model=flows[0].model, es_model=EsModelKind(args.es_model or case.es_model), carbon=False,
        bus_ids=list(index.bus_ids), gen_keys=[r.key for r in index.generators],
        branch_keys=list(index.branch_keys), storage_keys=[r.key for r in index.storage],
        load_keys=[r.key for r in index.loads],
        gen_p=np.array([pf.gen_p for pf in flows]).reshape(T, -1),
        gen_q=np.array([pf.gen_q for pf in flows]).reshape(T, -1),
        vm=np.array([pf.vm for pf in flows]), va=np.array([pf.va for pf in flows]),
        p_hat_from_fwd=zeros_tb, p_hat_from_rev=zeros_tb.copy(),
        p_hat_to_fwd=zeros_tb.copy(), p_hat_to_rev=zeros_tb.copy(),
        storage_ch=np.array([pf.storage_ch for pf in flows]).reshape(T, S),
        storage_dc=np.array([pf.storage_dc for pf in flows]).reshape(T, S),
        storage_e=e, storage_E=np.zeros((T + 1, S)), storage_w_es=np.zeros((T + 1, S)),
        w=np.zeros((T, N)), slack_nci=np.zeros((T, N)), slack_user=np.zeros(len(index.loads)),
        slack_node=np.zeros(N), objective=float("nan"), emissions_ton=float("nan"),
        stage="setpoints",
    )


def cmd_pf(case: CaseFile, args: argparse.Namespace) -> int:
    settings = _settings(case, args)
    solution = _dispatch_solution(case, args, settings)
    network = case.network
    model = args.pf_model or case.pf_model
    index = network.index()
    payload, residuals = [], []
    for t in range(solution.periods):
        v_set = {}
        if model == "ac":
            v_set = {index.bus_ids[ref.bus_pos]: float(solution.vm[t, ref.bus_pos]) for ref in index.generators}
        dispatch = Dispatch.for_period(network, t, solution.gen_p[t], solution.gen_q[t],
                                       solution.storage_ch[t], solution.storage_dc[t], v_set)
        pf = solve_power_flow(network, dispatch, model=model, settings=cfg().power_flow)
        dp, dq = nodal_mismatch(network, pf)
        payload.append(power_flow_payload(pf, t))
        residuals.append({"period": t, "p_mismatch_pu": float(np.max(np.abs(dp), initial=0.0)),
                          "q_mismatch_pu": float(np.max(np.abs(dq), initial=0.0))})
    ResultBundle(
        kind="pf", payload={"periods": payload}, residuals={"periods": residuals},
        provenance=_provenance(case, settings, "pf"),
    ).save(args.out)
    return EXIT_OK


def _trace(case: CaseFile, args: argparse.Namespace):
    settings = _settings(case, args)
    solution = _dispatch_solution(case, args, settings)
    flows = solution.power_flows(case.network)
    return flows, trace_horizon(case.network, case.grid, flows, args.es_model or case.es_model)


def cmd_cflow(case: CaseFile, args: argparse.Namespace) -> int:
    flows, trace = _trace(case, args)
    index = case.network.index()
    out = args.out_dir
    write_csv(node_frame(trace.carbon_flows, index.load_bus), out / "nodes.csv")
    write_csv(branch_frame(trace.carbon_flows), out / "branches.csv")
    return EXIT_OK


def cmd_account(case: CaseFile, args: argparse.Namespace) -> int:
    flows, trace = _trace(case, args)
    kind = args.es_model or case.es_model
    ledger = trace.ledger
    out = args.out_dir
    write_csv(ledger.to_frame(), out / "ledger.csv")
    write_csv(ledger.scope_frame(), out / "scopes.csv")
    comparison = [compare_with_average(cf, pf).assign(period=t)
                  for t, (cf, pf) in enumerate(zip(trace.carbon_flows, flows))]
    if comparison:
        write_csv(pd.concat(comparison, ignore_index=True), out / "average_comparison.csv")
    audit = audit_conservation(ledger, kind)
    totals = aggregate_horizon(ledger, case.grid)
    report = {"audit": audit.to_dict(), "totals_ton": totals.to_dict()}
    if case.source_unit == EmissionUnit.LBS_PER_KWH:
        report["totals_klbs"] = totals.in_unit(MassUnit.KLBS)
    atomic_write_json(out / "audit.json", report)
    return EXIT_OK


def _bundle(case: CaseFile, settings: SolverConfig, kind: str, solution: DispatchSolution) -> ResultBundle:
    return ResultBundle(
        kind=kind,
        payload={"solution": solution.to_dict()},
        residuals=solution.residuals.to_dict() if solution.residuals is not None else {},
        provenance=_provenance(case, settings, kind),
    )


def cmd_opf(case: CaseFile, args: argparse.Namespace) -> int:
    settings = _settings(case, args)
    solution = solve_opf(_problem(case, args), settings)
    _bundle(case, settings, "opf", solution).save(args.out)
    return EXIT_OK


def cmd_copf(case: CaseFile, args: argparse.Namespace) -> int:
    settings = _settings(case, args)
    policy = case.policy
    if args.cap is not None:
        cap = convert_emission_unit(args.cap, case.source_unit, EmissionUnit.TON_PER_MWH)
        policy = policy.with_uniform_cap(cap)
    if args.soft or args.penalty is not None:
        penalty = args.penalty if args.penalty is not None else policy.slack_penalty
        if not penalty > 0:
            raise CaseError("soft caps need a positive --penalty")
        policy = CarbonPolicy(**{**policy.model_dump(), "soft": True, "slack_penalty": penalty})
    problem = _problem(case, args, policy)
    if args.oracle:
        solution = solve_enum_oracle(problem, settings, workers=args.workers)
    else:
        solution = solve_copf(problem, settings)
    _bundle(case, settings, "copf", solution).save(args.out)
    return EXIT_OK


def cmd_sweep(case: CaseFile, args: argparse.Namespace) -> int:
    settings = _settings(case, args)
    caps = [convert_emission_unit(c, case.source_unit, EmissionUnit.TON_PER_MWH) for c in args.caps]
    points = sweep_cap(_problem(case, args), caps, settings, workers=args.workers, executor=args.executor)
    write_csv(sweep_frame(points, args.caps, case.source_unit.value), args.out)
    return EXIT_OK


COMMANDS = {
    "pf": cmd_pf,
    "cflow": cmd_cflow,
    "account": cmd_account,
    "opf": cmd_opf,
    "copf": cmd_copf,
    "sweep": cmd_sweep,
}


def _error(kind: str, message: str, details: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {"error": kind, "message": message, "details": details or {}}


def classify_error(exc: Exception):
    """Exit code and stderr payload for an exception raised by a subcommand."""
    if isinstance(exc, Infeasible):
        return EXIT_INFEASIBLE, _error(exc.kind, str(exc), exc.diagnostics)
    if isinstance(exc, AllPatternsInfeasible):
        return EXIT_INFEASIBLE, _error("all_patterns_infeasible", str(exc))
    if isinstance(exc, CarbonFlowInfeasible):
        return EXIT_INFEASIBLE, _error("carbon_flow_infeasible", str(exc), exc.verdict.to_dict())
    if isinstance(exc, ParseError):
        return EXIT_CASE, _error("parse_error", str(exc), {"line": exc.line, "field": exc.field})
    if isinstance(exc, SchemaError):
        return EXIT_CASE, _error("schema_error", str(exc), {"path": exc.path})
    if isinstance(exc, UnitError):
        return EXIT_CASE, _error("unit_error", str(exc), {"field": exc.field, "unit": exc.unit})
    if isinstance(exc, CaseError):
        return EXIT_CASE, _error("case_error", str(exc))
    if isinstance(exc, InvalidProblem):
        return EXIT_CASE, _error("invalid_problem", str(exc), exc.report.to_dict())
    if isinstance(exc, NoConvergence):
        details = {"stage": exc.stage}
        if exc.residuals is not None:
            details["residuals"] = exc.residuals.to_dict()
        return EXIT_NO_CONVERGENCE, _error("no_convergence", str(exc), details)
    if isinstance(exc, (PowerFlowNoConvergence, CarbonFlowNoConvergence)):
        return EXIT_NO_CONVERGENCE, _error("no_convergence", str(exc))
    if isinstance(exc, SingularSystem):
        return EXIT_NO_CONVERGENCE, _error("singular_system", str(exc))
    if isinstance(exc, (PowerFlowError, CarbonFlowError)):
        return EXIT_INFEASIBLE, _error(type(exc).__name__, str(exc))
    return None


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the subcommand and return its exit code.

    Args:
        argv: Arguments without the program name; defaults to sys.argv[1:]
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = cfg().logging
    overrides = {k: v for k, v in (("log_level", args.log_level), ("log_format", args.log_format)) if v}
    configure_logging(LoggingConfig(**{**settings.model_dump(), **overrides}))

    try:
        case = load_case(args.case)
        return COMMANDS[args.command](case, args)
    except Exception as e:
        classified = classify_error(e)
        if classified is None:
            raise
        code, payload = classified
        logger.error(f"{args.command} failed: {e}")
        sys.stderr.write(json.dumps(payload, default=str) + "\n")
        return code
