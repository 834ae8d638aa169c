"""
Tests for the NLP driver on small quadratic programs.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.nlp import NonlinearProgram, kkt_residual, solve_nlp


def _quadratic(lb=(-10.0, -10.0), ub=(10.0, 10.0), x_min=None):
    """min x^2 + y^2 s.t. x + y = 1, optionally x >= x_min."""

    def objective(x):
        return float(x @ x), 2.0 * x

    def equality(x):
        return np.array([x[0] + x[1] - 1.0]), np.array([[1.0, 1.0]])

    inequality = None
    if x_min is not None:
        def inequality(x):
            return np.array([x[0] - x_min]), np.array([[1.0, 0.0]])

    return NonlinearProgram(
        x0=np.array([3.0, -2.0]),
        lb=np.array(lb, dtype=float),
        ub=np.array(ub, dtype=float),
        objective=objective,
        equality=equality,
        inequality=inequality,
        name="quadratic",
    )


@pytest.mark.parametrize("method", ["slsqp", "auglag"])
def test_equality_constrained(method):
    """Test both drivers on an equality-constrained quadratic."""
    print(f"\n=== Testing {method} with an equality ===")

    result = solve_nlp(_quadratic(), method=method, tol_feas=1e-8)
    print(f"x={result.x}, f={result.f}, kkt={result.kkt_residual:.2e}, message={result.message}")

    assert result.success
    np.testing.assert_allclose(result.x, [0.5, 0.5], atol=1e-5)
    assert result.f == pytest.approx(0.5, abs=1e-5)
    assert result.violation <= 1e-6
    assert result.kkt_residual <= 1e-4
    assert result.multipliers_eq[0] == pytest.approx(1.0, abs=1e-3)

    print(f"✓ {method} works!")


@pytest.mark.parametrize("method", ["slsqp", "auglag"])
def test_active_inequality(method):
    """Test an inequality that binds at the optimum."""
    print(f"\n=== Testing {method} with an active inequality ===")

    result = solve_nlp(_quadratic(x_min=0.7), method=method, tol_feas=1e-8)
    print(f"x={result.x}, multipliers={result.multipliers_ineq}")

    np.testing.assert_allclose(result.x, [0.7, 0.3], atol=1e-5)
    assert result.ineq_violation <= 1e-6
    assert result.multipliers_ineq[0] >= 0

    print(f"✓ {method} handles active inequalities!")


def test_fixed_variables():
    """Test that variables with lb == ub are held fixed."""
    print("\n=== Testing fixed variables ===")

    result = solve_nlp(_quadratic(lb=(-10.0, 0.2), ub=(10.0, 0.2)))
    print(f"x={result.x}")
    assert result.x[1] == 0.2
    assert result.x[0] == pytest.approx(0.8, abs=1e-7)

    frozen = solve_nlp(_quadratic(lb=(0.4, 0.6), ub=(0.4, 0.6)))
    assert frozen.success
    assert frozen.message == "all variables fixed"
    assert frozen.iterations == 0
    np.testing.assert_array_equal(frozen.x, [0.4, 0.6])

    print("✓ Fixed variables work!")


def test_reports_infeasibility():
    """Test that an unreachable equality shows up in the violation."""
    print("\n=== Testing infeasible program ===")

    result = solve_nlp(_quadratic(lb=(-0.1, -0.1), ub=(0.1, 0.1)))
    print(f"violation={result.violation}")
    assert result.eq_violation >= 0.8 - 1e-6

    print("✓ Infeasibility is reported!")


def test_kkt_residual_bounds():
    """Test the multiplier estimate at an active bound."""
    grad = np.array([1.0, 0.0])
    x = np.array([0.0, 0.5])
    lb = np.array([0.0, -1.0])
    ub = np.array([1.0, 1.0])

    resid, _, _ = kkt_residual(grad, None, None, None, x, lb, ub)
    assert resid == pytest.approx(0.0, abs=1e-12)

    # descent direction points away from the active lower bound
    resid, _, _ = kkt_residual(-grad, None, None, None, x, lb, ub)
    assert resid == pytest.approx(1.0)


def test_unknown_method():
    """Test that an unknown driver name is rejected."""
    with pytest.raises(ValueError):
        solve_nlp(_quadratic(), method="ipopt")


if __name__ == "__main__":
    for name in ("slsqp", "auglag"):
        test_equality_constrained(name)
        test_active_inequality(name)
    test_fixed_variables()
    test_reports_infeasibility()
