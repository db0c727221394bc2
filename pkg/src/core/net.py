"""
Dense Feed-Forward Networks

Small MLPs with hand-written forward, input-Jacobian and reverse-mode
parameter gradients. The network seen by the surrogate model is the
zero-flux wrapper NN(x) = raw(x) - raw(0), so NN(0) = 0 for any weights.

Activations:
    - elu, tanh, relu: fixed
    - prelu: one learnable slope per layer, kept in [0, 1] by `project`

At kinks the left derivative is used (relu'(0) = 0, prelu'(0) = slope).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.core.calculus import Metric

logger = logging.getLogger("ddec-net")

ACTIVATIONS = ("elu", "prelu", "tanh", "relu")
PRELU_INITIAL_SLOPE = 0.25


@dataclass
class Mlp:
    """
    Attributes:
        weights: Layer matrices M_l of shape (out, in).
        biases: Layer bias vectors b_l.
        activation: One of ACTIVATIONS.
        slopes: Per-layer prelu slopes (ignored for other activations).
        linear_output: Skip the activation on the last layer.
    """
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "elu"
    slopes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    linear_output: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{self.activation}', expected one of {ACTIVATIONS}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("Need one bias per weight matrix and at least one layer")
        self.weights = [np.atleast_2d(np.asarray(w, dtype=float)) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.size != w.shape[0]:
                raise ValueError(f"Layer {i}: bias has {b.size} entries, weight has {w.shape[0]} rows")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"Layer {i} expects width {w.shape[1]}, previous layer gives {self.weights[i - 1].shape[0]}"
                )
        self.slopes = np.asarray(self.slopes, dtype=float).ravel()
        if self.slopes.size == 0:
            self.slopes = np.full(len(self.weights), PRELU_INITIAL_SLOPE)
        if self.slopes.size != len(self.weights):
            raise ValueError(f"Expected {len(self.weights)} prelu slopes, got {self.slopes.size}")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live references to every trainable array, keyed by name."""
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = w
            params[f"b{i}"] = b
        if self.activation == "prelu":
            params["slope"] = self.slopes
        return params

    def project(self) -> None:
        """Clamp prelu slopes to [0, 1] so every activation stays 1-Lipschitz."""
        np.clip(self.slopes, 0.0, 1.0, out=self.slopes)

    def is_zero(self) -> bool:
        return all(not np.any(w) for w in self.weights)

    def copy(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            slopes=self.slopes.copy(),
            linear_output=self.linear_output,
        )

    def _activated(self, layer: int) -> bool:
        return not (self.linear_output and layer == self.depth - 1)

    def _psi(self, layer: int, z: np.ndarray) -> np.ndarray:
        if not self._activated(layer):
            return z
        if self.activation == "elu":
            return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
        if self.activation == "prelu":
            return np.where(z > 0, z, self.slopes[layer] * z)
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _dpsi(self, layer: int, z: np.ndarray) -> np.ndarray:
        if not self._activated(layer):
            return np.ones_like(z)
        if self.activation == "elu":
            return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
        if self.activation == "prelu":
            return np.where(z > 0, 1.0, self.slopes[layer])
        if self.activation == "tanh":
            return 1.0 - np.tanh(z) ** 2
        return np.where(z > 0, 1.0, 0.0)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.input_width:
            raise ValueError(f"Network expects input width {self.input_width}, got {x.size}")
        return x

    def _forward_trace(self, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        acts, pre = [x], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = w @ acts[-1] + b
            pre.append(z)
            acts.append(self._psi(i, z))
        return acts, pre

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Unwrapped network psi_L(T_L(... psi_1(T_1 x)))."""
        acts, _ = self._forward_trace(self._check_input(x))
        return acts[-1]

    def _backward(self, x: np.ndarray, cot: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        acts, pre = self._forward_trace(x)
        grads: Dict[str, np.ndarray] = {}
        slope_grad = np.zeros_like(self.slopes)
        g = cot
        for i in reversed(range(self.depth)):
            if self.activation == "prelu" and self._activated(i):
                slope_grad[i] = float(np.sum(g * np.minimum(pre[i], 0.0)))
            dz = g * self._dpsi(i, pre[i])
            grads[f"W{i}"] = np.outer(dz, acts[i])
            grads[f"b{i}"] = dz
            g = self.weights[i].T @ dz
        if self.activation == "prelu":
            grads["slope"] = slope_grad
        return g, grads


def mlp_init_he(
    widths: Sequence[int], activation: str = "elu", seed: int = 0, linear_output: bool = False
) -> Mlp:
    """
    He-initialized network: weights ~ N(0, 2 / fan_in), zero biases.

    Args:
        widths: Layer widths including input and output, e.g. (12, 5, 5, 12).
        activation: Activation tag.
        seed: Seed for numpy's default_rng.
        linear_output: Leave the last layer without activation.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"Invalid widths {widths}: need at least two positive widths")
    rng = np.random.default_rng(seed)
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        for fan_in, fan_out in zip(widths[:-1], widths[1:])
    ]
    biases = [np.zeros(fan_out) for fan_out in widths[1:]]
    return Mlp(weights=weights, biases=biases, activation=activation, linear_output=linear_output)


def mlp_zero(width: int, activation: str = "elu") -> Mlp:
    """Single zero layer: NN vanishes identically (linear surrogate)."""
    return Mlp(weights=[np.zeros((width, width))], biases=[np.zeros(width)], activation=activation)


def mlp_forward(n: Mlp, x: np.ndarray) -> np.ndarray:
    """Zero-flux network NN(x) = raw(x) - raw(0)."""
    x = n._check_input(x)
    return n.raw(x) - n.raw(np.zeros_like(x))


def mlp_jacobian(n: Mlp, x: np.ndarray) -> np.ndarray:
    """diag(psi_L'(z_L)) M_L ... diag(psi_1'(z_1)) M_1 at x."""
    x = n._check_input(x)
    _, pre = n._forward_trace(x)
    jac = np.eye(x.size)
    for i, w in enumerate(n.weights):
        jac = n._dpsi(i, pre[i])[:, None] * (w @ jac)
    return jac


def mlp_input_vjp(n: Mlp, x: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """J_NN(x)^T cot without forming the Jacobian."""
    cot = np.asarray(cot, dtype=float).ravel()
    if cot.size != n.output_width:
        raise ValueError(f"Cotangent width {cot.size} does not match output width {n.output_width}")
    dx, _ = n._backward(n._check_input(x), cot)
    return dx


def mlp_param_vjp(n: Mlp, x: np.ndarray, cot: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradient of cot^T NN(x) with respect to every parameter of the wrapped network.

    Returns:
        Dict keyed like Mlp.parameters().
    """
    x = n._check_input(x)
    cot = np.asarray(cot, dtype=float).ravel()
    if cot.size != n.output_width:
        raise ValueError(f"Cotangent width {cot.size} does not match output width {n.output_width}")
    _, at_x = n._backward(x, cot)
    _, at_zero = n._backward(np.zeros_like(x), cot)
    return {name: at_x[name] - at_zero[name] for name in at_x}


def spectral_norm(matrix: np.ndarray, tol: float = 1e-8, maxit: int = 500) -> float:
    """Largest singular value by power iteration on M^T M from a fixed start vector."""
    matrix = np.atleast_2d(matrix)
    if not np.any(matrix):
        return 0.0
    v = np.random.default_rng(0).standard_normal(matrix.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(maxit):
        w = matrix.T @ (matrix @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return float(np.linalg.norm(matrix @ v))
        v = w / norm
        new_sigma = float(np.sqrt(norm))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return sigma


def _weighted_layer_norms(n: Mlp, m: Metric, k: int) -> List[float]:
    """Spectral norms with W^{-1/2} folded into the first layer and W^{1/2} into the last."""
    root = np.sqrt(m.weight(k - 1))
    if root.size != n.input_width or root.size != n.output_width:
        raise ValueError(f"Network widths do not match the {root.size} level-{k - 1} cells of the metric")
    layers = list(n.weights)
    layers[0] = layers[0] / root[None, :]
    layers[-1] = root[:, None] * layers[-1]
    return [spectral_norm(w) for w in layers]


def lipschitz_bound(n: Mlp, m: Metric, k: int) -> float:
    """
    Upper bound of the Lipschitz constant of NN in the weighted norm ||.||_{k-1}:

        sigma(W^{1/2} M_L) * sigma(M_{L-1}) * ... * sigma(M_1 W^{-1/2})

    with W = D_{k-1}/B_{k-1}. The diagonal activation derivatives lie in
    [0, 1] and commute with W^{1/2}, so every Jacobian satisfies
    ||W^{1/2} J W^{-1/2}||_2 <= the product. Equals prod sigma(M_l) on unit
    metrics, is unchanged by a uniform rescaling of W, and never exceeds
    lipschitz_bound_weighted.
    """
    return float(np.prod(_weighted_layer_norms(n, m, k)))


def lipschitz_bound_weighted(n: Mlp, m: Metric, k: int) -> float:
    """
    Cruder bound in the same norm: sqrt(max W / min W) times the product of
    plain spectral norms. Agrees with lipschitz_bound on unit metrics.
    """
    weight = m.weight(k - 1)
    product = float(np.prod([spectral_norm(w) for w in n.weights]))
    return float(np.sqrt(weight.max() / weight.min())) * product
