"""
Surrogate Model

Nonlinear perturbation of the mixed Hodge-Laplacian on a coarse complex:

    R1 = w - a - eps * NN(a),             a = d*_{k-1} u
    R2 = d_{k-1} w + d_k* d_k u - f       (second term only for k < dim)

State vector layout: [w (level k-1), u (level k)]. Row i of R1 belongs to
w[i], row N_{k-1} + j of R2 to u[j]. Boundary conditions replace the row of
the constrained entry by (value - prescribed); the optional pin replaces the
R2 row of one cell by (u[pin] - value).

k = dim gives Darcy (w fluxes on edges, u potentials on cells), k = 1 in 2D
gives magnetostatics (w on nodes, u on edges).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from src.core.calculus import Metric, d_matrix, dstar_matrix
from src.core.complex import ChainComplex, Cochain
from src.core.net import (
    Mlp,
    lipschitz_bound,
    mlp_forward,
    mlp_init_he,
    mlp_input_vjp,
    mlp_jacobian,
    mlp_param_vjp,
)

logger = logging.getLogger("ddec-model")

EPSILON_WARNING_FRACTION = 0.95
NET_PREFIX = "net."


@dataclass(frozen=True)
class BoundaryCondition:
    """Prescribed value of one state entry (level k-1 for w, level k for u)."""
    level: int
    index: int
    value: float


@dataclass(frozen=True)
class Pin:
    """Fixes u at one level-k cell to remove the constant kernel."""
    index: int
    value: float = 0.0


@dataclass
class State:
    w: Cochain
    u: Cochain

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w.values, self.u.values])

    @classmethod
    def from_vector(cls, model: "SurrogateModel", vec: np.ndarray) -> "State":
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != model.n_state:
            raise ValueError(f"State vector has {vec.size} entries, model expects {model.n_state}")
        return cls(Cochain(model.k - 1, vec[: model.n_w]), Cochain(model.k, vec[model.n_w:]))

    @classmethod
    def zeros(cls, model: "SurrogateModel") -> "State":
        return cls.from_vector(model, np.zeros(model.n_state))


@dataclass
class SurrogateModel:
    """
    Attributes:
        complex: Coarse chain complex.
        metric: Trainable B/D diagonals (shared with copies from with_problem).
        net: Network acting on level k-1 cochains.
        k: Problem level (dim for Darcy, 1 for 2D magnetostatics).
        epsilon: Perturbation scale, >= 0.
        bcs: Boundary conditions.
        source: f at level k (zero when omitted).
        pin: Optional nullspace pin.
    """
    complex: ChainComplex
    metric: Metric
    net: Mlp
    k: int
    epsilon: float = 0.1
    bcs: List[BoundaryCondition] = field(default_factory=list)
    source: Optional[Cochain] = None
    pin: Optional[Pin] = None

    def __post_init__(self):
        c = self.complex
        if not 1 <= self.k <= c.dim:
            raise ValueError(f"Problem level k={self.k} out of range 1..{c.dim}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        self.metric.check(c)
        if self.net.input_width != self.n_w or self.net.output_width != self.n_w:
            raise ValueError(
                f"Network widths ({self.net.input_width}->{self.net.output_width}) "
                f"must equal the level-{self.k - 1} count {self.n_w}"
            )
        if self.source is None:
            self.source = Cochain(self.k, np.zeros(self.n_u))
        if self.source.level != self.k or self.source.values.size != self.n_u:
            raise ValueError(f"Source must be a level-{self.k} cochain with {self.n_u} values")
        for bc in self.bcs:
            if bc.level not in (self.k - 1, self.k):
                raise ValueError(f"Boundary condition level {bc.level} is neither {self.k - 1} nor {self.k}")
            if not 0 <= bc.index < c.counts[bc.level]:
                raise ValueError(f"Boundary condition index {bc.index} out of range at level {bc.level}")
        if self.pin is not None and not 0 <= self.pin.index < self.n_u:
            raise ValueError(f"Pin index {self.pin.index} out of range 0..{self.n_u - 1}")

    @property
    def n_w(self) -> int:
        return self.complex.counts[self.k - 1]

    @property
    def n_u(self) -> int:
        return self.complex.counts[self.k]

    @property
    def n_state(self) -> int:
        return self.n_w + self.n_u

    def with_problem(
        self,
        bcs: List[BoundaryCondition],
        source: Optional[Cochain] = None,
        pin: Optional[Pin] = None,
    ) -> "SurrogateModel":
        """Same trained operators, different boundary data. Metric and net are shared."""
        return replace(self, bcs=list(bcs), source=source, pin=pin)

    def constrained_rows(self) -> np.ndarray:
        """Row (= state) indices replaced by BCs or the pin."""
        rows = [self._row(bc.level, bc.index) for bc in self.bcs]
        if self.pin is not None:
            rows.append(self.n_w + self.pin.index)
        return np.array(sorted(set(rows)), dtype=np.int64)

    def _row(self, level: int, index: int) -> int:
        return index if level == self.k - 1 else self.n_w + index


def build_surrogate(
    c: ChainComplex,
    k: int,
    hidden: List[int],
    activation: str = "elu",
    epsilon: float = 0.1,
    seed: int = 0,
    linear_output: bool = False,
) -> SurrogateModel:
    """Untrained model: identity metric and a He-initialized network of width N_{k-1}."""
    width = c.counts[k - 1]
    net = mlp_init_he([width, *hidden, width], activation, seed, linear_output)
    return SurrogateModel(complex=c, metric=Metric.identity(c), net=net, k=k, epsilon=epsilon)


def _split(model: SurrogateModel, s: State):
    w, u = s.w.values, s.u.values
    if s.w.level != model.k - 1 or s.u.level != model.k:
        raise ValueError(f"State levels ({s.w.level}, {s.u.level}) do not match k={model.k}")
    if w.size != model.n_w or u.size != model.n_u:
        raise ValueError(f"State sizes ({w.size}, {u.size}) do not match ({model.n_w}, {model.n_u})")
    return w, u


def residual(model: SurrogateModel, s: State) -> np.ndarray:
    """Block residual [R1; R2] with BC and pin rows replaced."""
    w, u = _split(model, s)
    c, m, k = model.complex, model.metric, model.k
    a = dstar_matrix(m, c, k - 1) @ u
    r1 = w - a - model.epsilon * mlp_forward(model.net, a)
    r2 = d_matrix(m, c, k - 1) @ w - model.source.values
    if k < c.dim:
        r2 = r2 + dstar_matrix(m, c, k) @ (d_matrix(m, c, k) @ u)
    res = np.concatenate([r1, r2])
    state = np.concatenate([w, u])
    for bc in model.bcs:
        row = model._row(bc.level, bc.index)
        res[row] = state[row] - bc.value
    if model.pin is not None:
        row = model.n_w + model.pin.index
        res[row] = state[row] - model.pin.value
    return res


def jacobian_state(model: SurrogateModel, s: State) -> np.ndarray:
    """Dense [[I, -(I + eps J_NN(a)) d*], [d_{k-1}, d_k* d_k]] with unit rows for BCs and pin."""
    _, u = _split(model, s)
    c, m, k = model.complex, model.metric, model.k
    nw, nu = model.n_w, model.n_u
    dstar = dstar_matrix(m, c, k - 1).toarray()
    a = dstar @ u
    jac = np.zeros((nw + nu, nw + nu))
    jac[:nw, :nw] = np.eye(nw)
    jac[:nw, nw:] = -(np.eye(nw) + model.epsilon * mlp_jacobian(model.net, a)) @ dstar
    jac[nw:, :nw] = d_matrix(m, c, k - 1).toarray()
    if k < c.dim:
        jac[nw:, nw:] = (dstar_matrix(m, c, k) @ d_matrix(m, c, k)).toarray()
    for row in model.constrained_rows():
        jac[row, :] = 0.0
        jac[row, row] = 1.0
    return jac


def trainable_parameters(model: SurrogateModel) -> Dict[str, np.ndarray]:
    """
    Live references to xi: the metric levels the k-problem touches plus every
    network parameter (prefixed "net.").
    """
    c, m, k = model.complex, model.metric, model.k
    levels = [k - 1, k] + ([k + 1] if k < c.dim else [])
    params: Dict[str, np.ndarray] = {}
    for j in levels:
        params[f"logB{j}"] = m.logB[j]
        params[f"logD{j}"] = m.logD[j]
    for name, value in model.net.parameters().items():
        params[NET_PREFIX + name] = value
    return params


def frozen_masks(model: SurrogateModel) -> Dict[str, np.ndarray]:
    """
    Entries held fixed during training: B_{k-1} at flux-BC indices, so the
    discrete flux balance of prescribed boundary data stays metric-independent.
    """
    mask = np.zeros(model.n_w, dtype=bool)
    for bc in model.bcs:
        if bc.level == model.k - 1:
            mask[bc.index] = True
    return {f"logB{model.k - 1}": mask}


def param_vjp(model: SurrogateModel, s: State, lam: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Reverse-mode gradient of lam^T residual(model, s) over trainable_parameters.

    BC and pin rows are parameter-independent and contribute nothing; frozen
    entries receive zero gradient.
    """
    w, u = _split(model, s)
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.size != model.n_state:
        raise ValueError(f"lam has {lam.size} entries, residual has {model.n_state}")
    c, m, k, eps = model.complex, model.metric, model.k, model.epsilon
    nw = model.n_w
    mu = lam.copy()
    mu[model.constrained_rows()] = 0.0
    mu1, mu2 = mu[:nw], mu[nw:]

    grads = {name: np.zeros_like(value) for name, value in trainable_parameters(model).items()}
    delta = c.delta[k - 1]
    Bkm1, Dkm1, Bk, Dk = m.B(k - 1), m.D(k - 1), m.B(k), m.D(k)

    # R1 = w - a - eps NN(a), a = D_{k-1}^{-1} delta^T D_k u
    a = (delta.T @ (Dk * u)) / Dkm1
    g_a = -mu1
    if eps != 0.0:
        g_a = g_a - eps * mlp_input_vjp(model.net, a, mu1)
        for name, value in mlp_param_vjp(model.net, a, mu1).items():
            grads[NET_PREFIX + name] -= eps * value
    grads[f"logD{k - 1}"] += -g_a * a
    grads[f"logD{k}"] += (delta @ (g_a / Dkm1)) * Dk * u

    # d_{k-1} w = B_k delta B_{k-1}^{-1} w
    p = w / Bkm1
    grads[f"logB{k}"] += mu2 * Bk * (delta @ p)
    grads[f"logB{k - 1}"] += -(delta.T @ (Bk * mu2)) * p

    if k < c.dim:
        # d_k* d_k u = D_k^{-1} delta_k^T D_{k+1} B_{k+1} delta_k B_k^{-1} u
        delta_k = c.delta[k]
        Bkp1, Dkp1 = m.B(k + 1), m.D(k + 1)
        q = u / Bk
        t = Dkp1 * Bkp1 * (delta_k @ q)
        y = (delta_k.T @ t) / Dk
        cvec = delta_k @ (mu2 / Dk)
        grads[f"logD{k}"] += -mu2 * y
        grads[f"logD{k + 1}"] += cvec * t
        grads[f"logB{k + 1}"] += cvec * t
        grads[f"logB{k}"] += -(delta_k.T @ (cvec * Dkp1 * Bkp1)) * q

    for name, mask in frozen_masks(model).items():
        grads[name][mask] = 0.0
    return grads


def epsilon_max(model: SurrogateModel) -> float:
    """1 / lipschitz_bound, or +inf for a network that vanishes identically."""
    if model.net.is_zero():
        return float("inf")
    bound = lipschitz_bound(model.net, model.metric, model.k)
    return float("inf") if bound == 0.0 else 1.0 / bound


def check_epsilon(model: SurrogateModel) -> bool:
    """Warn (never raise) when epsilon comes within 5% of epsilon_max. Returns True when safe."""
    limit = epsilon_max(model)
    if model.epsilon >= EPSILON_WARNING_FRACTION * limit:
        logger.warning(
            "epsilon=%.4g is at or above %.0f%% of epsilon_max=%.4g; well-posedness not guaranteed",
            model.epsilon, 100 * EPSILON_WARNING_FRACTION, limit,
        )
        return False
    return True


def primal_residual(model: SurrogateModel, u: Cochain) -> np.ndarray:
    """Delta_k u + eps d_{k-1} NN(d*_{k-1} u) - f, without boundary rows."""
    c, m, k = model.complex, model.metric, model.k
    if u.level != k or u.values.size != model.n_u:
        raise ValueError(f"u must be a level-{k} cochain with {model.n_u} values")
    a = dstar_matrix(m, c, k - 1) @ u.values
    flux = a + model.epsilon * mlp_forward(model.net, a)
    out = d_matrix(m, c, k - 1) @ flux - model.source.values
    if k < c.dim:
        out = out + dstar_matrix(m, c, k) @ (d_matrix(m, c, k) @ u.values)
    return out


def conservation_defect(model: SurrogateModel, s: State) -> float:
    """
    |sum over boundary faces of sign * (B_{k-1}^{-1} w) - sum of B_k^{-1} f|.

    Summing the divergence rows telescopes interior faces away, so this is
    zero whenever every R2 row holds. Only defined for k = dim.
    """
    if model.k != model.complex.dim:
        raise ValueError("Flux balance is defined for top-level problems (k = dim)")
    w, _ = _split(model, s)
    signs = np.asarray(model.complex.delta[model.k - 1].sum(axis=0)).ravel()
    outflow = float(np.sum(signs * w / model.metric.B(model.k - 1)))
    produced = float(np.sum(model.source.values / model.metric.B(model.k)))
    return abs(outflow - produced)
