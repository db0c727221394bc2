"""
Trainable Exterior Calculus

Metric-weighted derivatives on a chain complex:

    d_k  = B_{k+1} delta_k B_k^{-1}
    d_k* = D_k^{-1} delta_k^T D_{k+1}

with the level-k inner product (a, b)_k = sum a_i b_i D_k[i] / B_k[i].
Both diagonals are parameterized by their logarithms so any real parameter
vector yields a valid metric.

Usage Example:
    >>> from src.core.complex import build_cartesian_complex, Cochain
    >>> from src.core.calculus import Metric, apply_d
    >>> c = build_cartesian_complex(3, 3)
    >>> m = Metric.identity(c)
    >>> grad = apply_d(m, c, 0, Cochain(0, c.positions[:, 0]))
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from src.core.complex import ChainComplex, Cochain

logger = logging.getLogger("ddec-calculus")

NONTRIVIAL_EIGEN_THRESHOLD = 1e-10


@dataclass
class Metric:
    """
    Positive diagonal tensors B_k and D_k stored as log-parameters.

    The arrays are updated in place by the optimizer, so operators built
    from a Metric always see the current parameters.
    """
    logB: List[np.ndarray]
    logD: List[np.ndarray]

    def __post_init__(self):
        if len(self.logB) != len(self.logD):
            raise ValueError("logB and logD must cover the same levels")
        self.logB = [np.asarray(v, dtype=float).ravel() for v in self.logB]
        self.logD = [np.asarray(v, dtype=float).ravel() for v in self.logD]

    @classmethod
    def identity(cls, c: ChainComplex) -> "Metric":
        """logB = logD = 0: the plain graph calculus."""
        return cls(
            logB=[np.zeros(n) for n in c.counts],
            logD=[np.zeros(n) for n in c.counts],
        )

    @classmethod
    def random(cls, c: ChainComplex, rng: np.random.Generator, scale: float = 0.5) -> "Metric":
        """Log-normal diagonals; used for randomized property checks."""
        return cls(
            logB=[scale * rng.standard_normal(n) for n in c.counts],
            logD=[scale * rng.standard_normal(n) for n in c.counts],
        )

    def check(self, c: ChainComplex) -> "Metric":
        for k, n in enumerate(c.counts):
            if k >= len(self.logB) or self.logB[k].size != n or self.logD[k].size != n:
                raise ValueError(f"Metric does not match complex counts {c.counts} at level {k}")
        return self

    def copy(self) -> "Metric":
        return Metric([v.copy() for v in self.logB], [v.copy() for v in self.logD])

    def B(self, k: int) -> np.ndarray:
        return np.exp(self.logB[k])

    def D(self, k: int) -> np.ndarray:
        return np.exp(self.logD[k])

    def weight(self, k: int) -> np.ndarray:
        """Diagonal of the level-k inner product, D_k / B_k."""
        return np.exp(self.logD[k] - self.logB[k])


def _expect_level(x: Cochain, level: int, name: str) -> np.ndarray:
    if x.level != level:
        raise ValueError(f"{name} must be a level-{level} cochain, got level {x.level}")
    return x.values


def _check_derivative_level(c: ChainComplex, k: int) -> None:
    if not 0 <= k < c.dim:
        raise ValueError(f"Derivative level {k} out of range 0..{c.dim - 1}")


def d_matrix(m: Metric, c: ChainComplex, k: int) -> sp.csr_matrix:
    """Sparse d_k = B_{k+1} delta_k B_k^{-1}."""
    _check_derivative_level(c, k)
    return (sp.diags(m.B(k + 1)) @ c.delta[k].astype(float) @ sp.diags(1.0 / m.B(k))).tocsr()


def dstar_matrix(m: Metric, c: ChainComplex, k: int) -> sp.csr_matrix:
    """Sparse d_k* = D_k^{-1} delta_k^T D_{k+1}."""
    _check_derivative_level(c, k)
    return (sp.diags(1.0 / m.D(k)) @ c.delta[k].T.astype(float) @ sp.diags(m.D(k + 1))).tocsr()


def apply_d(m: Metric, c: ChainComplex, k: int, u: Cochain) -> Cochain:
    """Apply d_k to a level-k cochain."""
    _check_derivative_level(c, k)
    values = _expect_level(u, k, "u")
    return Cochain(k + 1, m.B(k + 1) * (c.delta[k] @ (values / m.B(k))))


def apply_dstar(m: Metric, c: ChainComplex, k: int, v: Cochain) -> Cochain:
    """Apply d_k* to a level-(k+1) cochain."""
    _check_derivative_level(c, k)
    values = _expect_level(v, k + 1, "v")
    return Cochain(k, (c.delta[k].T @ (m.D(k + 1) * values)) / m.D(k))


def inner_product(m: Metric, k: int, a: Cochain, b: Cochain) -> float:
    """(a, b)_k = sum a_i b_i D_k[i] / B_k[i]."""
    x = _expect_level(a, k, "a")
    y = _expect_level(b, k, "b")
    return float(np.sum(x * y * m.weight(k)))


def hodge_laplacian_matrix(m: Metric, c: ChainComplex, k: int) -> sp.csr_matrix:
    """
    Delta_k = d_{k-1} d_{k-1}* + d_k* d_k, dropping the terms that do not
    exist at k = 0 or k = dim.
    """
    if not 0 <= k <= c.dim:
        raise ValueError(f"Level {k} out of range 0..{c.dim}")
    lap = sp.csr_matrix((c.counts[k], c.counts[k]))
    if k > 0:
        lap = lap + d_matrix(m, c, k - 1) @ dstar_matrix(m, c, k - 1)
    if k < c.dim:
        lap = lap + dstar_matrix(m, c, k) @ d_matrix(m, c, k)
    return lap.tocsr()


def symmetrized(m: Metric, k: int, op: sp.spmatrix) -> np.ndarray:
    """W^{1/2} op W^{-1/2}: symmetric whenever op is self-adjoint in (., .)_k."""
    root = np.sqrt(m.weight(k))
    dense = op.toarray() if sp.issparse(op) else np.asarray(op)
    sym = root[:, None] * dense / root[None, :]
    return 0.5 * (sym + sym.T)


def _smallest_nontrivial(eigs: np.ndarray, what: str) -> float:
    top = float(eigs.max()) if eigs.size else 0.0
    if top <= 0.0:
        raise ValueError(f"{what} is the zero operator; no nontrivial eigenvalue")
    return float(eigs[eigs > NONTRIVIAL_EIGEN_THRESHOLD * top].min())


def poincare_constant(m: Metric, c: ChainComplex, k: int) -> float:
    """
    c_{P,k} = lambda_min(d_k* d_k)^{-1/2} over the nontrivial spectrum.

    Eigenvalues below 1e-10 times the largest are treated as the kernel.

    Raises:
        ValueError: If d_k* d_k vanishes identically.
    """
    _check_derivative_level(c, k)
    op = dstar_matrix(m, c, k) @ d_matrix(m, c, k)
    lam = _smallest_nontrivial(sla.eigvalsh(symmetrized(m, k, op)), f"d_{k}* d_{k}")
    return 1.0 / np.sqrt(lam)


def dual_poincare_constant(m: Metric, c: ChainComplex, k: int) -> float:
    """Counterpart for the adjoint direction: lambda_min(d_{k-1} d_{k-1}*)^{-1/2} on level k."""
    if not 1 <= k <= c.dim:
        raise ValueError(f"Level {k} out of range 1..{c.dim}")
    op = d_matrix(m, c, k - 1) @ dstar_matrix(m, c, k - 1)
    lam = _smallest_nontrivial(sla.eigvalsh(symmetrized(m, k, op)), f"d_{k - 1} d_{k - 1}*")
    return 1.0 / np.sqrt(lam)


def harmonic_dimension(m: Metric, c: ChainComplex, k: int, tol: float = 1e-8) -> int:
    """Numerical dim ker(Delta_k)."""
    eigs = sla.eigvalsh(symmetrized(m, k, hodge_laplacian_matrix(m, c, k)))
    scale = max(1.0, float(np.abs(eigs).max())) if eigs.size else 1.0
    return int(np.sum(np.abs(eigs) < tol * scale))


def _weighted_projection(weight: np.ndarray, basis: np.ndarray, u: np.ndarray) -> np.ndarray:
    """(., .)_W-orthogonal projection of u onto the column span of basis."""
    root = np.sqrt(weight)
    coef, *_ = sla.lstsq(root[:, None] * basis, root * u, cond=None)
    return basis @ coef


def hodge_decompose(
    m: Metric, c: ChainComplex, k: int, u: Cochain
) -> Tuple[Cochain, Cochain, Cochain]:
    """
    Split u into exact, harmonic and coexact parts.

    The exact part is the weighted least-squares projection onto im(d_{k-1}),
    the coexact part the projection of the remainder onto im(d_k*); what is
    left is harmonic. The two images are (., .)_k-orthogonal, so the order of
    the two projections does not matter.

    Returns:
        (exact, harmonic, coexact)
    """
    values = _expect_level(u, k, "u")
    if values.size != c.counts[k]:
        raise ValueError(f"u has {values.size} values, level {k} has {c.counts[k]} cells")
    w = m.weight(k)
    exact = np.zeros_like(values)
    coexact = np.zeros_like(values)
    if k > 0:
        exact = _weighted_projection(w, d_matrix(m, c, k - 1).toarray(), values)
    if k < c.dim:
        coexact = _weighted_projection(w, dstar_matrix(m, c, k).toarray(), values - exact)
    harmonic = values - exact - coexact
    return Cochain(k, exact), Cochain(k, harmonic), Cochain(k, coexact)


def energy_matrix(m: Metric, c: ChainComplex, k: int) -> np.ndarray:
    """Dense Gram matrix of a(u, v) = (d*u, d*v)_{k-1} + (du, dv)_{k+1}."""
    gram = np.zeros((c.counts[k], c.counts[k]))
    if k > 0:
        ds = dstar_matrix(m, c, k - 1).toarray()
        gram += ds.T @ (m.weight(k - 1)[:, None] * ds)
    if k < c.dim:
        d = d_matrix(m, c, k).toarray()
        gram += d.T @ (m.weight(k + 1)[:, None] * d)
    return gram


def energy_norm(m: Metric, c: ChainComplex, k: int, u: Cochain) -> float:
    """||u||_a = sqrt(||d*_{k-1} u||^2_{k-1} + ||d_k u||^2_{k+1})."""
    total = 0.0
    if k > 0:
        a = apply_dstar(m, c, k - 1, u)
        total += inner_product(m, k - 1, a, a)
    if k < c.dim:
        b = apply_d(m, c, k, u)
        total += inner_product(m, k + 1, b, b)
    return float(np.sqrt(total))


def dual_norm(m: Metric, c: ChainComplex, k: int, f: Cochain, gram: Optional[np.ndarray] = None) -> float:
    """
    ||f||_{-a} = sup_v (f, v)_k / ||v||_a, evaluated densely as
    sqrt(g^T G^+ g) with g = W_k f and G the energy Gram matrix.

    Only meaningful when f is (., .)_k-orthogonal to ker(Delta_k).
    """
    values = _expect_level(f, k, "f")
    g = m.weight(k) * values
    gram = energy_matrix(m, c, k) if gram is None else gram
    return float(np.sqrt(max(0.0, g @ (sla.pinvh(gram) @ g))))
