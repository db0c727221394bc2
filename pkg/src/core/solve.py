"""
Forward and Adjoint Solves

Newton iteration with dense LU factorization for residual(model, s) = 0,
and the transposed solve J^T lam = -2 P^T (P s - data) that reuses the
factorization of the converged Jacobian.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from src.core.model import State, SurrogateModel, check_epsilon, jacobian_state, residual

logger = logging.getLogger("ddec-solve")

DEFAULT_MAXIT = 50
MAX_HALVINGS = 20
RELATIVE_TOLERANCE = 1e-12


@dataclass
class SolveReport:
    """
    Outcome of newton_solve. Failures are reported here rather than raised.

    Attributes:
        iterations: Newton steps taken.
        residual_norms: Euclidean residual norm before the first step and after each step.
        converged: Whether the final norm met the tolerance.
        message: Reason for non-convergence (empty on success).
        lu: LU factors of the Jacobian at the returned state, for adjoint reuse.
    """
    iterations: int = 0
    residual_norms: List[float] = field(default_factory=list)
    converged: bool = False
    message: str = ""
    lu: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    @property
    def final_residual(self) -> float:
        return self.residual_norms[-1] if self.residual_norms else float("nan")


def default_tolerance(model: SurrogateModel, relative: float = RELATIVE_TOLERANCE) -> float:
    """relative * (1 + ||rhs||), the right-hand side being f plus every prescribed BC value."""
    rhs = np.concatenate([model.source.values, [bc.value for bc in model.bcs]])
    if model.pin is not None:
        rhs = np.append(rhs, model.pin.value)
    if relative <= 0:
        raise ValueError(f"relative tolerance must be positive, got {relative}")
    return relative * (1.0 + float(np.linalg.norm(rhs)))


def _factor(jac: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    LU factors, or None when the matrix is not finite or numerically singular
    (a pivot below n * machine epsilon times the largest pivot).
    """
    if not np.all(np.isfinite(jac)):
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(jac)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() <= pivots.size * np.finfo(float).eps * pivots.max():
        return None
    return lu, piv


def newton_solve(
    model: SurrogateModel,
    s0: Optional[State] = None,
    tol: Optional[float] = None,
    maxit: int = DEFAULT_MAXIT,
) -> Tuple[State, SolveReport]:
    """
    Solve the forward problem by Newton's method.

    Full steps are taken; a step that increases the residual norm is halved up
    to 20 times. A singular Jacobian or a NaN residual ends the solve with
    converged=False.

    Args:
        model: Surrogate model with its boundary data.
        s0: Initial state (zero when omitted).
        tol: Residual-norm tolerance (default_tolerance when omitted).
        maxit: Maximum Newton steps.

    Returns:
        (state, report)
    """
    if tol is None:
        tol = default_tolerance(model)
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    check_epsilon(model)

    x = np.zeros(model.n_state) if s0 is None else s0.to_vector()
    report = SolveReport()
    res = residual(model, State.from_vector(model, x))
    norm = float(np.linalg.norm(res))
    report.residual_norms.append(norm)

    while True:
        if not np.isfinite(norm):
            report.message = "residual is not finite"
            break
        if norm <= tol:
            report.converged = True
            break
        if report.iterations >= maxit:
            report.message = f"no convergence after {maxit} iterations (residual {norm:.3e})"
            break
        factors = _factor(jacobian_state(model, State.from_vector(model, x)))
        if factors is None:
            report.message = "singular Jacobian"
            break
        step = -sla.lu_solve(factors, res)

        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = x + scale * step
            trial_res = residual(model, State.from_vector(model, trial))
            trial_norm = float(np.linalg.norm(trial_res))
            if np.isfinite(trial_norm) and trial_norm <= norm:
                break
            scale *= 0.5
        else:
            report.message = f"backtracking failed to reduce the residual {norm:.3e}"
            break
        if scale < 1.0:
            logger.debug("Newton step %d damped by %.3g", report.iterations + 1, scale)

        x, res, norm = trial, trial_res, trial_norm
        report.iterations += 1
        report.residual_norms.append(norm)
        logger.debug("Newton iteration %d: |R| = %.3e", report.iterations, norm)

    state = State.from_vector(model, x)
    if report.converged:
        report.lu = _factor(jacobian_state(model, state))
        if len(report.residual_norms) > 2 and np.any(np.diff(report.residual_norms[1:]) > 0):
            logger.warning("Residual norms did not decrease monotonically: %s", report.residual_norms)
    else:
        logger.warning("Newton solve did not converge: %s", report.message)
    return state, report


def mismatch(s: State, data: np.ndarray, mask: Sequence[int]) -> np.ndarray:
    """P_mask s - data as a full-length vector (zero off the mask)."""
    x = s.to_vector()
    mask = np.asarray(mask, dtype=np.int64)
    data = np.asarray(data, dtype=float).ravel()
    if data.size != mask.size:
        raise ValueError(f"data has {data.size} values for {mask.size} observed entries")
    if mask.size and (mask.min() < 0 or mask.max() >= x.size):
        raise ValueError("Observation mask index out of range")
    out = np.zeros_like(x)
    out[mask] = x[mask] - data
    return out


def adjoint_solve(
    model: SurrogateModel,
    s: State,
    data: np.ndarray,
    mask: Sequence[int],
    lu: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """
    Solve J^T lam = -2 P^T (P s - data).

    Args:
        model: Surrogate model.
        s: Converged forward state.
        data: Observed values, one per mask entry.
        mask: Observed indices into the concatenated (w, u) state.
        lu: Factors of J at s (from SolveReport.lu); computed when omitted.

    Raises:
        numpy.linalg.LinAlgError: If the Jacobian is singular.
    """
    rhs = -2.0 * mismatch(s, data, mask)
    if lu is None:
        lu = _factor(jacobian_state(model, s))
    if lu is None:
        raise np.linalg.LinAlgError("Adjoint solve: Jacobian is singular")
    return sla.lu_solve(lu, rhs, trans=1)
