"""
Enumeration oracle for small DC C-OPF instances.

Fixes every branch direction (and every storage mode) per period, solves the
resulting smooth problem for each pattern and keeps the cheapest feasible one.
Used to cross-check the complementarity homotopy of solve_copf.
"""

import itertools
import logging
from typing import List, Optional, Tuple

import numpy as np

from config import SolverConfig, cfg
from core.copf import (
    AllPatternsInfeasible,
    Infeasible,
    InvalidProblem,
    NoConvergence,
    evaluate_solution,
    seed_from_solution,
    solution_from_vector,
    solve_opf,
)
from core.dispatch_model import DispatchModel, DispatchProblem, StageOptions
from core.nlp import solve_nlp
from core.task_queue import TaskQueue

logger = logging.getLogger(__name__)

MAX_BRANCHES = 5
MAX_PATTERN_BITS = 12
TIE_TOL = 1e-9


def pattern_options(bits: Tuple[int, ...], T: int, B: int, S: int) -> StageOptions:
    """
    Stage options of one pattern.

    The first T*B bits are branch directions ordered by period then branch
    (1 forward, 0 reverse); the remaining T*S bits are storage modes
    (1 charge, 0 discharge).
    """
    arr = np.asarray(bits, dtype=int)
    directions = np.where(arr[: T * B] == 1, 1, -1).reshape(T, B)
    modes = np.where(arr[T * B:] == 1, 1, -1).reshape(T, S) if S else None
    return StageOptions(eps=None, dir_from=directions, storage_modes=modes)


def _solve_pattern(problem: DispatchProblem, settings: SolverConfig,
                   bits: Tuple[int, ...], x0: np.ndarray) -> Tuple[Optional[float], Optional[np.ndarray]]:
    model = DispatchModel(problem, carbon=True)
    options = pattern_options(bits, model.T, model.B, model.S)
    result = solve_nlp(
        model.program(x0, options),
        method=settings.method, max_iter=settings.max_iter,
        ftol=settings.ftol, tol_feas=settings.tol_feas,
    )
    if result.violation > settings.tol_feas:
        logger.debug(f"Pattern {bits}: infeasible (violation {result.violation:.2e})")
        return None, None
    objective = float(model.objective(result.x)[0])
    logger.debug(f"Pattern {bits}: objective {objective:.6g}")
    return objective, result.x


def enumerate_patterns(T: int, B: int, S: int) -> List[Tuple[int, ...]]:
    """All direction/mode patterns in lexicographic order."""
    return list(itertools.product((0, 1), repeat=T * (B + S)))


def solve_enum_oracle(
    problem: DispatchProblem,
    settings: Optional[SolverConfig] = None,
    workers: Optional[int] = None,
    executor: Optional[str] = None,
):
    """
    Global optimum of a small DC C-OPF by direction enumeration.

    Ties within a relative 1e-9 keep the lexicographically first pattern.

    Args:
        problem: DC problem with at most 5 branches and 12 pattern bits
        settings: Solver settings
        workers: Worker count for the pattern fan-out
        executor: "thread" or "process"

    Returns:
        DispatchSolution of the best pattern, with its pattern attached

    Raises:
        InvalidProblem: If the instance is AC or too large to enumerate
        AllPatternsInfeasible: If no pattern admits a feasible dispatch
    """
    report = problem.validate_problem()
    index = problem.network.index()
    T, B, S = problem.grid.periods, index.n_branch, len(index.storage)
    if problem.pf_model != "dc":
        report.add("oracle", "pf_model", "the enumeration oracle handles DC problems only")
    if B > MAX_BRANCHES:
        report.add("oracle", "branches", f"{B} branches exceed the oracle limit of {MAX_BRANCHES}")
    if T * (B + S) > MAX_PATTERN_BITS:
        report.add("oracle", "patterns", f"{T * (B + S)} pattern bits exceed the limit of {MAX_PATTERN_BITS}")
    if not report.ok:
        raise InvalidProblem(report)

    settings = settings or cfg().solver
    runtime = cfg().runtime
    workers = workers or runtime.workers
    executor = executor or runtime.executor

    try:
        seed = solve_opf(problem, settings)
    except (Infeasible, NoConvergence) as e:
        raise AllPatternsInfeasible(f"the OPF relaxation has no feasible dispatch: {e}") from e
    model = DispatchModel(problem, carbon=True)
    x0 = seed_from_solution(model, seed)

    patterns = enumerate_patterns(T, B, S)
    logger.info(f"Enumerating {len(patterns)} direction pattern(s)")
    queue = TaskQueue()
    for bits in patterns:
        queue.add_task(bits, _solve_pattern, problem, settings, bits, x0)
    done = queue.run(workers=workers, executor=executor)

    best_bits, best_f, best_x = None, None, None
    for bits in patterns:
        task = done[bits]
        if task.error is not None:
            continue
        objective, x = task.result
        if objective is None:
            continue
        if best_f is None or objective < best_f - TIE_TOL * max(1.0, abs(best_f)):
            best_bits, best_f, best_x = bits, objective, x

    if best_bits is None:
        raise AllPatternsInfeasible(f"none of the {len(patterns)} direction patterns is feasible")

    solution = solution_from_vector(model, best_x, "oracle")
    solution.pattern = best_bits
    solution.residuals = evaluate_solution(problem, solution)
    logger.info(f"Oracle optimum {best_f:.6g} $ at pattern {best_bits}")
    return solution
