"""
Equality-Constrained Training

For each sample: Newton forward solve, adjoint solve, one Adam update of
the metric log-parameters and network weights. The physics constraints hold
to solver tolerance at every recorded state regardless of how well the
parameters fit the data.

epsilon is checked against epsilon_max once, before the first solve, and then
stays fixed; an update that pushes eps * L above LIPSCHITZ_TARGET is undone
by rescaling the output layer.

Usage Example:
    >>> cfg = TrainConfig(epochs=200, learning_rate=0.05)
    >>> model, history = train(model, dataset, cfg)
    >>> history.groupby("epoch")["loss"].mean().tail()
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from src.core.complex import Cochain
from src.core.model import (
    BoundaryCondition,
    Pin,
    State,
    SurrogateModel,
    conservation_defect,
    epsilon_max,
    param_vjp,
    trainable_parameters,
)
from src.core.net import lipschitz_bound
from src.core.solve import adjoint_solve, default_tolerance, mismatch, newton_solve

logger = logging.getLogger("ddec-train")

HISTORY_COLUMNS = ["epoch", "sample", "loss", "residual", "conservation", "eps_L", "grad_norm", "aborted"]
SAFEGUARD_FRACTION = 0.95
LIPSCHITZ_TARGET = 0.9


class TrainConfig(BaseModel):
    """Optimizer and solver settings for train()."""
    epochs: int = Field(100, ge=0, description="Number of passes over the dataset")
    learning_rate: float = Field(0.05, ge=0.0, description="Adam step size")
    beta1: float = Field(0.9, ge=0.0, lt=1.0, description="First-moment decay")
    beta2: float = Field(0.999, ge=0.0, lt=1.0, description="Second-moment decay")
    adam_eps: float = Field(1e-8, gt=0.0, description="Adam denominator floor")
    newton_tol: Optional[float] = Field(None, description="Absolute forward tolerance (overrides relative_tolerance)")
    relative_tolerance: float = Field(1e-12, gt=0.0, description="Forward tolerance relative to 1 + ||rhs||")
    newton_maxit: int = Field(50, ge=1, description="Maximum Newton iterations per solve")
    seed: int = Field(0, description="Seed recorded with the run")
    warm_start: bool = Field(False, description="Start each solve from the sample's previous state")
    batch_mode: bool = Field(False, description="Average gradients over the dataset, one update per epoch")
    clip_norm: Optional[float] = Field(100.0, description="Global gradient-norm clip (None disables)")
    target_loss: Optional[float] = Field(None, description="Stop once the mean epoch loss drops below this")
    log_every: int = Field(100, ge=1, description="Epoch interval of INFO summaries")

    @field_validator("newton_tol", "clip_norm", "target_loss")
    @classmethod
    def positive_if_set(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v <= 0:
            raise ValueError("must be positive when set")
        return v


@dataclass
class Sample:
    """
    One training solution.

    Attributes:
        bcs: Boundary conditions of this solution.
        source: Source values at level k.
        data: Observed values, one per mask entry.
        mask: Observed indices into the concatenated (w, u) state.
        pin: Optional nullspace pin.
        label: Free-form tag (e.g. the material coefficient).
    """
    bcs: List[BoundaryCondition]
    source: np.ndarray
    data: np.ndarray
    mask: np.ndarray
    pin: Optional[Pin] = None
    label: str = ""

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=float).ravel()
        self.data = np.asarray(self.data, dtype=float).ravel()
        self.mask = np.asarray(self.mask, dtype=np.int64).ravel()
        if self.mask.size == 0:
            raise ValueError("Sample needs at least one observed entry")
        if self.data.size != self.mask.size:
            raise ValueError(f"Sample has {self.data.size} data values for {self.mask.size} mask entries")

    def problem(self, model: SurrogateModel) -> SurrogateModel:
        return model.with_problem(self.bcs, Cochain(model.k, self.source), self.pin)


class TrainingAborted(RuntimeError):
    """A forward solve failed; carries the history recorded so far."""

    def __init__(self, message: str, history: pd.DataFrame):
        super().__init__(message)
        self.history = history


@dataclass
class AdamState:
    """First/second moments per parameter name and the step counter."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    opt: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, applied in place to `params`.

    Returns:
        (params, opt) for chaining.
    """
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in opt.m:
            opt.m[name] = np.zeros_like(param)
            opt.v[name] = np.zeros_like(param)
        opt.m[name] *= opt.beta1
        opt.m[name] += (1.0 - opt.beta1) * g
        opt.v[name] *= opt.beta2
        opt.v[name] += (1.0 - opt.beta2) * (g * g)
        param -= (lr / bc1) * opt.m[name] / (np.sqrt(opt.v[name] / bc2) + opt.eps)
    return params, opt


def loss(s: State, sample: Sample) -> float:
    """Squared Euclidean norm of the masked mismatch."""
    r = mismatch(s, sample.data, sample.mask)
    return float(r @ r)


def lagrangian_grad(model: SurrogateModel, s: State, lam: np.ndarray) -> Dict[str, np.ndarray]:
    """d/dxi of ||P s - data||^2 + lam^T (L_xi[s] - f) at fixed s: only the constraint term depends on xi."""
    return param_vjp(model, s, lam)


def gradient_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _eps_L(model: SurrogateModel) -> float:
    if model.net.is_zero() or model.epsilon == 0.0:
        return 0.0
    return model.epsilon * lipschitz_bound(model.net, model.metric, model.k)


def _enforce_epsilon(model: SurrogateModel) -> None:
    """Halve epsilon until it sits below 95% of epsilon_max. Runs once, before the first solve."""
    limit = epsilon_max(model)
    while model.epsilon > 0 and model.epsilon >= SAFEGUARD_FRACTION * limit:
        logger.warning("epsilon %.4g too close to epsilon_max %.4g, halving", model.epsilon, limit)
        model.epsilon *= 0.5


def _cap_network_lipschitz(model: SurrogateModel) -> None:
    """
    Scale the output layer back onto eps * L = LIPSCHITZ_TARGET after an update
    that pushed it higher. The bound is linear in that layer, so one rescale is exact.
    """
    eps_l = _eps_L(model)
    if eps_l <= LIPSCHITZ_TARGET:
        return
    factor = LIPSCHITZ_TARGET / eps_l
    model.net.weights[-1] *= factor
    model.net.biases[-1] *= factor
    logger.debug("eps * L = %.4g, output layer scaled by %.4g", eps_l, factor)


def _conservation(problem: SurrogateModel, s: State) -> float:
    if problem.k != problem.complex.dim:
        return float("nan")
    return conservation_defect(problem, s)


def _newton_tol(cfg: TrainConfig, problem: SurrogateModel) -> float:
    if cfg.newton_tol is not None:
        return cfg.newton_tol
    return default_tolerance(problem, cfg.relative_tolerance)


def evaluate(
    model: SurrogateModel, dataset: List[Sample], cfg: Optional[TrainConfig] = None
) -> List[Dict[str, float]]:
    """
    Forward-solve every sample and report loss and constraint residuals, without updates.

    Returns:
        One dict per sample: loss, residual, conservation, iterations, converged.
    """
    cfg = cfg or TrainConfig()
    results = []
    for sample in dataset:
        problem = sample.problem(model)
        s, report = newton_solve(problem, None, _newton_tol(cfg, problem), cfg.newton_maxit)
        results.append({
            "loss": loss(s, sample),
            "residual": report.final_residual,
            "conservation": _conservation(problem, s),
            "iterations": report.iterations,
            "converged": report.converged,
        })
    return results


def train(
    model: SurrogateModel, dataset: List[Sample], cfg: TrainConfig
) -> Tuple[SurrogateModel, pd.DataFrame]:
    """
    Batched equality-constrained training.

    Epoch 0 rows record the untrained model; epochs 1..cfg.epochs each run the
    forward/adjoint/update sequence per sample (or one averaged update per
    epoch in batch mode).

    Returns:
        (model, history) where history has HISTORY_COLUMNS.

    Raises:
        ValueError: If the dataset is empty.
        TrainingAborted: If a forward solve does not converge.
    """
    if not dataset:
        raise ValueError("Training needs at least one sample")
    params = trainable_parameters(model)
    opt = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rows: List[Dict] = []
    cache: Dict[int, State] = {}

    def record(epoch, index, problem, s, report, lam_grads):
        rows.append({
            "epoch": epoch,
            "sample": index,
            "loss": loss(s, dataset[index]),
            "residual": report.final_residual,
            "conservation": _conservation(problem, s),
            "eps_L": _eps_L(problem),
            "grad_norm": gradient_norm(lam_grads) if lam_grads is not None else float("nan"),
            "aborted": not report.converged,
        })

    def solve_sample(epoch, index):
        problem = dataset[index].problem(model)
        s0 = cache.get(index) if cfg.warm_start else None
        s, report = newton_solve(problem, s0, _newton_tol(cfg, problem), cfg.newton_maxit)
        if not report.converged:
            record(epoch, index, problem, s, report, None)
            history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
            raise TrainingAborted(
                f"epoch {epoch}, sample {index}: forward solve failed ({report.message})", history
            )
        cache[index] = s
        return problem, s, report

    def apply_update(grads):
        norm = gradient_norm(grads)
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            logger.info("Clipping gradient norm %.3e to %.3e", norm, cfg.clip_norm)
            grads = {name: g * (cfg.clip_norm / norm) for name, g in grads.items()}
        adam_step(opt, params, grads, cfg.learning_rate)
        model.net.project()
        _cap_network_lipschitz(model)

    _enforce_epsilon(model)
    for index in range(len(dataset)):
        problem, s, report = solve_sample(0, index)
        record(0, index, problem, s, report, None)

    for epoch in range(1, cfg.epochs + 1):
        batch: Dict[str, np.ndarray] = {}
        for index, sample in enumerate(dataset):
            problem, s, report = solve_sample(epoch, index)
            lam = adjoint_solve(problem, s, sample.data, sample.mask, report.lu)
            grads = lagrangian_grad(problem, s, lam)
            record(epoch, index, problem, s, report, grads)
            if cfg.batch_mode:
                for name, g in grads.items():
                    batch[name] = batch.get(name, 0.0) + g / len(dataset)
            else:
                apply_update(grads)
        if cfg.batch_mode:
            apply_update(batch)

        epoch_loss = float(np.mean([r["loss"] for r in rows[-len(dataset):]]))
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info("epoch %d: mean loss %.3e", epoch, epoch_loss)
        if cfg.target_loss is not None and epoch_loss < cfg.target_loss:
            logger.info("Target loss %.1e reached at epoch %d", cfg.target_loss, epoch)
            break

    return model, pd.DataFrame(rows, columns=HISTORY_COLUMNS)
