"""
Unit tests for solve.py

Newton convergence, failure reporting and the adjoint solve.
"""

import numpy as np
import pytest

from src.core.calculus import Metric, dual_norm, energy_norm
from src.core.complex import Cochain, boundary_mask, build_cartesian_complex
from src.core.model import (
    BoundaryCondition,
    Pin,
    State,
    SurrogateModel,
    jacobian_state,
    residual,
)
from src.core.net import lipschitz_bound_weighted, mlp_init_he, mlp_zero
from src.core.solve import (
    adjoint_solve,
    default_tolerance,
    mismatch,
    newton_solve,
)


def darcy_problem(epsilon=0.05, zero_net=False, seed=0):
    """Unit-flux problem on a 3 x 3 grid: flux BCs on every boundary edge and a pin."""
    c = build_cartesian_complex(3, 3)
    width = c.counts[1]
    net = mlp_zero(width) if zero_net else mlp_init_he((width, 5, width), "elu", seed)
    base = SurrogateModel(c, Metric.random(c, np.random.default_rng(seed), 0.2), net, k=2, epsilon=epsilon)
    signs = np.asarray(c.delta[1].sum(axis=0)).ravel()
    positions = c.cell_centroids(1)
    bcs = []
    for e in np.flatnonzero(boundary_mask(c, 1)):
        # unit flux in +x: out through the right side, in through the left
        x = positions[e, 0]
        value = 0.0
        if np.isclose(x, 1.0):
            value = signs[e]
        elif np.isclose(x, 0.0):
            value = -signs[e]
        bcs.append(BoundaryCondition(1, int(e), float(value)))
    return base.with_problem(bcs, pin=Pin(0, 0.0))


def unpinned_problem(c):
    """Zero-flux BCs everywhere and no pin: the potential keeps its constant kernel."""
    base = SurrogateModel(c, Metric.identity(c), mlp_zero(c.counts[1]), k=2, epsilon=0.0)
    bcs = [BoundaryCondition(1, int(e), 0.0) for e in np.flatnonzero(boundary_mask(c, 1))]
    return base.with_problem(bcs, source=Cochain(2, np.eye(1, c.counts[2]).ravel() - 1.0 / c.counts[2]))


class TestNewton:
    """Tests for newton_solve."""

    def test_linear_problem_one_step(self):
        problem = darcy_problem(zero_net=True)
        s, report = newton_solve(problem)
        assert report.converged is True
        assert report.iterations == 1
        assert np.linalg.norm(residual(problem, s)) <= default_tolerance(problem)

    def test_nonlinear_problem_converges(self):
        problem = darcy_problem(epsilon=0.05)
        s, report = newton_solve(problem)
        assert report.converged is True
        assert report.message == ""
        assert report.final_residual <= default_tolerance(problem)
        assert report.lu is not None
        assert len(report.residual_norms) == report.iterations + 1

    def test_warm_start_takes_no_steps(self):
        problem = darcy_problem()
        s, _ = newton_solve(problem)
        _, report = newton_solve(problem, s0=s)
        assert report.converged is True
        assert report.iterations == 0

    def test_iteration_limit_is_reported(self):
        problem = darcy_problem(epsilon=0.05)
        _, report = newton_solve(problem, tol=1e-30, maxit=2)
        assert report.converged is False
        assert "no convergence" in report.message or "backtracking" in report.message

    def test_singular_jacobian_is_reported(self, grid3):
        _, report = newton_solve(unpinned_problem(grid3))
        assert report.converged is False
        assert "singular" in report.message

    def test_rejects_non_positive_tolerance(self):
        with pytest.raises(ValueError):
            newton_solve(darcy_problem(), tol=0.0)

    def test_tolerance_scales_with_data(self):
        problem = darcy_problem()
        scaled = problem.with_problem(
            [BoundaryCondition(b.level, b.index, 100.0 * b.value) for b in problem.bcs], pin=problem.pin,
        )
        assert default_tolerance(scaled) > default_tolerance(problem)

    def test_relative_tolerance_scales_linearly(self):
        problem = darcy_problem()
        assert default_tolerance(problem, 1e-9) == pytest.approx(1e3 * default_tolerance(problem))
        _, report = newton_solve(problem, tol=default_tolerance(problem, 1e-9))
        assert report.converged is True
        with pytest.raises(ValueError):
            default_tolerance(problem, 0.0)


class TestAdjoint:
    """Tests for mismatch and adjoint_solve."""

    def test_mismatch(self):
        problem = darcy_problem()
        s = State.from_vector(problem, np.arange(problem.n_state, dtype=float))
        out = mismatch(s, [1.0, 1.0], [2, 5])
        assert out[2] == 1.0 and out[5] == 4.0
        assert np.count_nonzero(out) == 2

    def test_mismatch_validation(self):
        problem = darcy_problem()
        s = State.zeros(problem)
        with pytest.raises(ValueError):
            mismatch(s, [1.0], [0, 1])
        with pytest.raises(ValueError):
            mismatch(s, [1.0], [problem.n_state])

    def test_adjoint_equation(self, rng):
        problem = darcy_problem()
        s, report = newton_solve(problem)
        mask = np.arange(problem.n_state)
        data = s.to_vector() + rng.standard_normal(problem.n_state)
        lam = adjoint_solve(problem, s, data, mask, report.lu)
        jac = jacobian_state(problem, s)
        assert np.allclose(jac.T @ lam, -2.0 * mismatch(s, data, mask))

    def test_adjoint_without_factors(self, rng):
        problem = darcy_problem()
        s, report = newton_solve(problem)
        mask = np.array([0, 3, problem.n_w + 2])
        data = rng.standard_normal(3)
        assert np.allclose(
            adjoint_solve(problem, s, data, mask), adjoint_solve(problem, s, data, mask, report.lu)
        )

    def test_adjoint_singular(self, grid3):
        problem = unpinned_problem(grid3)
        with pytest.raises(np.linalg.LinAlgError):
            adjoint_solve(problem, State.zeros(problem), [0.0], [0])


class TestWellPosedness:
    """A contraction-sized perturbation keeps the solve stable."""

    def test_energy_bound(self, grid3, rng):
        metric = Metric.random(grid3, rng, 0.3)
        net = mlp_init_he((grid3.counts[1], 6, grid3.counts[1]), "elu", 3)
        epsilon = 0.5 / lipschitz_bound_weighted(net, metric, 2)
        source = Cochain(2, rng.standard_normal(grid3.counts[2]))
        problem = SurrogateModel(grid3, metric, net, k=2, epsilon=epsilon, source=source)

        s, report = newton_solve(problem)
        assert report.converged is True
        assert report.iterations <= 25
        bound = dual_norm(metric, grid3, 2, source) / (1.0 - epsilon * lipschitz_bound_weighted(net, metric, 2))
        assert energy_norm(metric, grid3, 2, s.u) <= bound * (1.0 + 1e-8)
