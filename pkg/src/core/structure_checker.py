"""
Structure Checker

Batch runner for the structural guarantees of a surrogate model: exact
sequences, adjointness, Hodge decomposition, positive semidefiniteness of
the Hodge Laplacian, and the epsilon * L_N < 1 margin. Training never
touches these properties, so any model file should pass.
"""

import logging
from typing import Any, Dict, Optional

import numpy as np
import scipy.linalg as sla

from src.core.calculus import (
    apply_d,
    apply_dstar,
    d_matrix,
    dstar_matrix,
    hodge_decompose,
    hodge_laplacian_matrix,
    inner_product,
    symmetrized,
)
from src.core.complex import Cochain, verify_exact
from src.core.model import SurrogateModel
from src.core.net import lipschitz_bound

logger = logging.getLogger("ddec-structure")

DEFAULT_TOLERANCES = {
    "operator_tolerance": 1e-12,
    "hodge_tolerance": 1e-10,
    "psd_tolerance": 1e-10,
    "epsilon_margin": 0.95,
    "random_trials": 20,
}


class StructureChecker:
    """
    Checks the structural properties of a model's calculus.

    Usage:
        checker = StructureChecker()
        report = checker.validate(model)
        report["passed"]
    """

    def __init__(self, tolerances: Optional[Dict[str, float]] = None, seed: int = 0):
        self.tolerances = {**DEFAULT_TOLERANCES, **(tolerances or {})}
        self.seed = seed
        self.checks: Dict[str, Dict[str, Any]] = {}

    def validate(self, model: SurrogateModel) -> Dict[str, Any]:
        """
        Run every check.

        Returns:
            {
                "passed": bool,
                "checks": {name: {"value": float, "tolerance": float, "passed": bool}},
                "failed": List[str]
            }
        """
        self.checks = {}
        rng = np.random.default_rng(self.seed)
        trials = int(self.tolerances["random_trials"])

        self._check_exactness(model)
        self._check_compositions(model)
        self._check_adjointness(model, rng, trials)
        self._check_hodge(model, rng, trials)
        self._check_psd(model)
        self._check_epsilon(model)

        failed = [name for name, check in self.checks.items() if not check["passed"]]
        if failed:
            logger.warning("Structure checks failed: %s", ", ".join(failed))
        return {"passed": not failed, "checks": self.checks, "failed": failed}

    def _record(self, name: str, value: float, tolerance: float, passed: bool) -> None:
        self.checks[name] = {"value": float(value), "tolerance": float(tolerance), "passed": bool(passed)}

    def _check_exactness(self, model: SurrogateModel) -> None:
        report = verify_exact(model.complex)
        worst = max(report["max_violation"], default=0)
        self._record("delta_delta", worst, 0.0, report["passed"])

    def _check_compositions(self, model: SurrogateModel) -> None:
        c, m = model.complex, model.metric
        tol = self.tolerances["operator_tolerance"]
        dd, ss = 0.0, 0.0
        for k in range(c.dim - 1):
            dk, dk1 = d_matrix(m, c, k), d_matrix(m, c, k + 1)
            sk, sk1 = dstar_matrix(m, c, k), dstar_matrix(m, c, k + 1)
            forward = (dk1 @ dk).tocoo()
            backward = (sk @ sk1).tocoo()
            # relative to the size of the factors
            scale_f = 1.0 + abs(dk1).max() * abs(dk).max()
            scale_b = 1.0 + abs(sk).max() * abs(sk1).max()
            dd = max(dd, float(np.abs(forward.data).max()) / scale_f if forward.nnz else 0.0)
            ss = max(ss, float(np.abs(backward.data).max()) / scale_b if backward.nnz else 0.0)
        self._record("d_d", dd, tol, dd < tol)
        self._record("dstar_dstar", ss, tol, ss < tol)

    def _check_adjointness(self, model: SurrogateModel, rng: np.random.Generator, trials: int) -> None:
        c, m = model.complex, model.metric
        tol = self.tolerances["operator_tolerance"]
        worst = 0.0
        for _ in range(trials):
            for k in range(c.dim):
                u = Cochain(k, rng.standard_normal(c.counts[k]))
                v = Cochain(k + 1, rng.standard_normal(c.counts[k + 1]))
                lhs = inner_product(m, k + 1, apply_d(m, c, k, u), v)
                rhs = inner_product(m, k, u, apply_dstar(m, c, k, v))
                worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
        self._record("adjointness", worst, tol, worst < tol)

    def _check_hodge(self, model: SurrogateModel, rng: np.random.Generator, trials: int) -> None:
        c, m, k = model.complex, model.metric, model.k
        tol = self.tolerances["hodge_tolerance"]
        worst = 0.0
        for _ in range(max(1, trials // 4)):
            u = Cochain(k, rng.standard_normal(c.counts[k]))
            scale = 1.0 + inner_product(m, k, u, u)
            parts = hodge_decompose(m, c, k, u)
            recon = np.abs(sum(p.values for p in parts) - u.values).max()
            ortho = max(
                abs(inner_product(m, k, parts[i], parts[j]))
                for i in range(3) for j in range(i + 1, 3)
            ) / scale
            worst = max(worst, recon, ortho)
        self._record("hodge_decomposition", worst, tol, worst < tol)

    def _check_psd(self, model: SurrogateModel) -> None:
        c, m, k = model.complex, model.metric, model.k
        tol = self.tolerances["psd_tolerance"]
        eigs = sla.eigvalsh(symmetrized(m, k, hodge_laplacian_matrix(m, c, k)))
        scale = max(1.0, float(np.abs(eigs).max()))
        self._record("laplacian_min_eigenvalue", eigs.min(), -tol * scale, eigs.min() >= -tol * scale)

    def _check_epsilon(self, model: SurrogateModel) -> None:
        margin = self.tolerances["epsilon_margin"]
        value = 0.0
        if model.epsilon > 0 and not model.net.is_zero():
            value = model.epsilon * lipschitz_bound(model.net, model.metric, model.k)
        self._record("epsilon_lipschitz", value, margin, value < margin)


def check_structure(model: SurrogateModel, tolerances: Optional[Dict[str, float]] = None) -> Dict[str, Any]:
    """
    Convenience function for direct usage.

    Usage:
        from src.core.structure_checker import check_structure
        result = check_structure(model)
    """
    return StructureChecker(tolerances).validate(model)
