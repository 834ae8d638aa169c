"""
Nonlinear programming driver for the carbon-aware OPF toolkit.

A small problem container plus two drivers built on scipy.optimize:
SLSQP (default) and a bound-constrained augmented Lagrangian with an
L-BFGS-B inner loop. Both eliminate fixed variables and report a KKT
stationarity residual from a sign-constrained multiplier estimate.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.optimize import Bounds, lsq_linear, minimize

logger = logging.getLogger(__name__)

Evaluation = Tuple[np.ndarray, np.ndarray]

ACTIVE_TOL = 1e-6


@dataclass
class NonlinearProgram:
    """
    min f(x)  s.t.  c(x) = 0,  g(x) >= 0,  lb <= x <= ub.

    Attributes:
        x0: Starting point
        lb: Lower bounds (-inf allowed)
        ub: Upper bounds (+inf allowed); lb == ub fixes a variable
        objective: x -> (f, grad f)
        equality: x -> (c, dc/dx) or None
        inequality: x -> (g, dg/dx) or None
        name: Label used in log messages
    """
    x0: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    objective: Callable[[np.ndarray], Tuple[float, np.ndarray]]
    equality: Optional[Callable[[np.ndarray], Evaluation]] = None
    inequality: Optional[Callable[[np.ndarray], Evaluation]] = None
    name: str = "nlp"

    @property
    def n(self) -> int:
        return int(np.asarray(self.x0).size)


@dataclass
class NlpResult:
    """Outcome of solve_nlp, always in the full variable space."""
    x: np.ndarray
    f: float
    success: bool
    message: str
    method: str
    iterations: int = 0
    eq_violation: float = 0.0
    ineq_violation: float = 0.0
    kkt_residual: float = np.inf
    multipliers_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    multipliers_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def violation(self) -> float:
        return max(self.eq_violation, self.ineq_violation)


class _Reduced:
    """Evaluation cache over the free variables of a NonlinearProgram."""

    def __init__(self, problem: NonlinearProgram):
        self.problem = problem
        lb = np.asarray(problem.lb, dtype=float)
        ub = np.asarray(problem.ub, dtype=float)
        self.free = ub > lb
        self.template = np.clip(np.asarray(problem.x0, dtype=float), lb, ub)
        self.template[~self.free] = lb[~self.free]
        self.lb = lb[self.free]
        self.ub = ub[self.free]
        self._cache = {}

    def expand(self, z: np.ndarray) -> np.ndarray:
        x = self.template.copy()
        x[self.free] = z
        return x

    def _eval(self, name: str, fn, z: np.ndarray):
        hit = self._cache.get(name)
        if hit is not None and np.array_equal(hit[0], z):
            return hit[1]
        value, grad = fn(self.expand(z))
        grad = np.asarray(grad, dtype=float)
        grad = grad[self.free] if grad.ndim == 1 else grad[:, self.free]
        out = (value, grad)
        self._cache[name] = (z.copy(), out)
        return out

    def objective(self, z):
        f, g = self._eval("f", self.problem.objective, z)
        return float(f), g

    def equality(self, z):
        c, j = self._eval("eq", self.problem.equality, z)
        return np.asarray(c, dtype=float), j

    def inequality(self, z):
        g, j = self._eval("ineq", self.problem.inequality, z)
        return np.asarray(g, dtype=float), j

    @property
    def has_eq(self) -> bool:
        return self.problem.equality is not None

    @property
    def has_ineq(self) -> bool:
        return self.problem.inequality is not None


def kkt_residual(
    grad: np.ndarray,
    jac_eq: Optional[np.ndarray],
    g: Optional[np.ndarray],
    jac_ineq: Optional[np.ndarray],
    x: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    active_tol: float = ACTIVE_TOL,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Scaled stationarity residual at x.

    Solves min ||A y - grad f|| with equality multipliers free and
    multipliers of active inequalities and active bounds nonnegative.

    Returns:
        (residual / max(1, ||grad f||_inf), equality multipliers, inequality multipliers)
    """
    n = grad.size
    columns, lo, hi = [], [], []
    n_eq = 0 if jac_eq is None else jac_eq.shape[0]
    if n == 0:
        return 0.0, np.zeros(n_eq), np.zeros(0 if g is None else g.size)
    if n_eq:
        columns.append(jac_eq.T)
        lo.append(np.full(n_eq, -np.inf))
        hi.append(np.full(n_eq, np.inf))

    active = np.zeros(0, dtype=int)
    if g is not None and g.size:
        active = np.flatnonzero(g <= active_tol)
        if active.size:
            columns.append(jac_ineq[active].T)
            lo.append(np.zeros(active.size))
            hi.append(np.full(active.size, np.inf))

    scale = np.maximum(1.0, np.abs(x))
    at_lb = np.flatnonzero(np.isfinite(lb) & (x - lb <= 1e-8 * scale))
    at_ub = np.flatnonzero(np.isfinite(ub) & (ub - x <= 1e-8 * scale))
    eye = np.eye(n)
    if at_lb.size:
        columns.append(eye[:, at_lb])
        lo.append(np.zeros(at_lb.size))
        hi.append(np.full(at_lb.size, np.inf))
    if at_ub.size:
        columns.append(-eye[:, at_ub])
        lo.append(np.zeros(at_ub.size))
        hi.append(np.full(at_ub.size, np.inf))

    norm = max(1.0, float(np.max(np.abs(grad))) if grad.size else 0.0)
    y_eq = np.zeros(n_eq)
    y_ineq = np.zeros(0 if g is None else g.size)
    if not columns:
        return float(np.max(np.abs(grad), initial=0.0)) / norm, y_eq, y_ineq

    a = np.hstack(columns)
    fit = lsq_linear(a, grad, bounds=(np.concatenate(lo), np.concatenate(hi)), method="bvls")
    resid = float(np.max(np.abs(a @ fit.x - grad), initial=0.0))
    y_eq = fit.x[:n_eq]
    if active.size:
        y_ineq[active] = fit.x[n_eq:n_eq + active.size]
    return resid / norm, y_eq, y_ineq


def _violations(red: _Reduced, z: np.ndarray) -> Tuple[float, float]:
    eq = ineq = 0.0
    if red.has_eq:
        c, _ = red.equality(z)
        eq = float(np.max(np.abs(c), initial=0.0))
    if red.has_ineq:
        g, _ = red.inequality(z)
        ineq = float(max(0.0, -np.min(g, initial=0.0)))
    return eq, ineq


def _finish(red: _Reduced, z: np.ndarray, success: bool, message: str,
            method: str, iterations: int) -> NlpResult:
    z = np.clip(z, red.lb, red.ub)
    f, grad = red.objective(z)
    jac_eq = red.equality(z)[1] if red.has_eq else None
    g, jac_in = red.inequality(z) if red.has_ineq else (None, None)
    kkt, y_eq, y_in = kkt_residual(grad, jac_eq, g, jac_in, z, red.lb, red.ub)
    eq, ineq = _violations(red, z)
    return NlpResult(
        x=red.expand(z), f=f, success=success, message=message, method=method,
        iterations=iterations, eq_violation=eq, ineq_violation=ineq,
        kkt_residual=kkt, multipliers_eq=y_eq, multipliers_ineq=y_in,
    )


def _solve_slsqp(red: _Reduced, z0: np.ndarray, max_iter: int, ftol: float) -> NlpResult:
    constraints = []
    if red.has_eq:
        constraints.append({
            "type": "eq",
            "fun": lambda z: red.equality(z)[0],
            "jac": lambda z: red.equality(z)[1],
        })
    if red.has_ineq:
        constraints.append({
            "type": "ineq",
            "fun": lambda z: red.inequality(z)[0],
            "jac": lambda z: red.inequality(z)[1],
        })
    res = minimize(
        lambda z: red.objective(z)[0],
        z0,
        jac=lambda z: red.objective(z)[1],
        method="SLSQP",
        bounds=Bounds(red.lb, red.ub),
        constraints=constraints,
        options={"maxiter": max_iter, "ftol": ftol},
    )
    return _finish(red, res.x, bool(res.success), str(res.message), "slsqp", int(res.nit))


def _solve_auglag(
    red: _Reduced,
    z0: np.ndarray,
    max_iter: int,
    tol_feas: float,
    max_outer: int = 50,
    penalty: float = 10.0,
    penalty_growth: float = 10.0,
) -> NlpResult:
    """
    Method of multipliers on c(x) = 0 and g(x) - s = 0 with s >= 0.

    Multipliers are updated when the violation falls below the current
    target, otherwise the penalty grows; targets tighten geometrically.
    """
    n = z0.size
    m_in = red.inequality(z0)[0].size if red.has_ineq else 0
    s0 = np.maximum(red.inequality(z0)[0], 0.0) if m_in else np.zeros(0)
    lb = np.r_[red.lb, np.zeros(m_in)]
    ub = np.r_[red.ub, np.full(m_in, np.inf)]
    v = np.clip(np.r_[z0, s0], lb, ub)

    def constraints(vv):
        z, s = vv[:n], vv[n:]
        parts, jacs = [], []
        if red.has_eq:
            c, j = red.equality(z)
            parts.append(c)
            jacs.append(np.hstack([j, np.zeros((c.size, m_in))]))
        if m_in:
            g, j = red.inequality(z)
            parts.append(g - s)
            jacs.append(np.hstack([j, -np.eye(m_in)]))
        if not parts:
            return np.zeros(0), np.zeros((0, n + m_in))
        return np.concatenate(parts), np.vstack(jacs)

    c0, _ = constraints(v)
    y = np.zeros(c0.size)
    mu = penalty
    ctol = max(tol_feas, 0.1 / mu ** 0.1)
    gtol = max(1e-8, 1.0 / mu)
    iterations = 0
    message = "outer iteration limit reached"
    success = False

    for outer in range(max_outer):
        def merit(vv):
            f, grad = red.objective(vv[:n])
            c, j = constraints(vv)
            grad_full = np.r_[grad, np.zeros(m_in)]
            value = f - y @ c + 0.5 * mu * c @ c
            return value, grad_full + j.T @ (mu * c - y)

        inner = minimize(
            merit, v, jac=True, method="L-BFGS-B", bounds=Bounds(lb, ub),
            options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15},
        )
        v = inner.x
        iterations += int(inner.nit)
        c, _ = constraints(v)
        viol = float(np.max(np.abs(c), initial=0.0))
        logger.debug(f"auglag outer {outer}: violation {viol:.3e}, penalty {mu:.1e}")

        if viol <= ctol:
            y = y - mu * c
            ctol = max(ctol / mu ** 0.9, tol_feas)
            gtol = max(gtol / mu, 1e-10)
            if viol <= tol_feas and inner.success:
                success = True
                message = "converged"
                break
        else:
            mu *= penalty_growth
            ctol = max(0.1 / mu ** 0.1, tol_feas)
            gtol = max(1.0 / mu, 1e-10)

    return _finish(red, v[:n], success, message, "auglag", iterations)


def solve_nlp(
    problem: NonlinearProgram,
    method: str = "slsqp",
    max_iter: int = 500,
    ftol: float = 1e-12,
    tol_feas: float = 1e-6,
) -> NlpResult:
    """
    Solve a NonlinearProgram.

    Args:
        problem: Problem description
        method: "slsqp" or "auglag"
        max_iter: Iteration limit (inner iterations for auglag)
        ftol: SLSQP objective tolerance
        tol_feas: Target constraint violation for auglag

    Returns:
        NlpResult; callers judge acceptance from the reported residuals
    """
    red = _Reduced(problem)
    z0 = np.clip(red.template[red.free], red.lb, red.ub)
    logger.debug(
        f"Solving {problem.name} with {method}: {int(red.free.sum())} free of {problem.n} variables"
    )
    if not red.free.any():
        return _finish(red, z0, True, "all variables fixed", method, 0)
    if method == "slsqp":
        return _solve_slsqp(red, z0, max_iter, ftol)
    if method == "auglag":
        return _solve_auglag(red, z0, max_iter, tol_feas)
    raise ValueError(f"unknown NLP method: {method}")
