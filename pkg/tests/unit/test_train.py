"""
Unit tests for train.py

Adjoint gradients of the data loss, Adam updates and the training loop.
"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.api.schemas import CaseSpec
from src.core.model import build_surrogate, frozen_masks, trainable_parameters
from src.core.net import lipschitz_bound
from src.core.reference import generate_dataset, profile
from src.core.solve import adjoint_solve, newton_solve
from src.core.train import (
    HISTORY_COLUMNS,
    AdamState,
    Sample,
    TrainConfig,
    TrainingAborted,
    _cap_network_lipschitz,
    adam_step,
    evaluate,
    lagrangian_grad,
    loss,
    train,
)

FD_STEP = 1e-6


@pytest.fixture(scope="module")
def darcy_case():
    return generate_dataset(CaseSpec(case="d2", alphas=[1.0, 2.0], fine=6, parts=2))


@pytest.fixture(scope="module")
def magneto_case():
    return generate_dataset(CaseSpec(case="magneto", alphas=[1.0, 2.0], fine=6, parts=2))


@pytest.fixture(scope="module")
def linear_case():
    return generate_dataset(CaseSpec(case="d1", alphas=[1.0, 4.0], fine=6, parts=2))


def fresh_model(case, epsilon=0.05, activation="elu"):
    return build_surrogate(case.coarse, case.k, [4], activation=activation, epsilon=epsilon, seed=1)


class TestConfig:
    """Tests for TrainConfig and Sample validation."""

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 100
        assert cfg.learning_rate == 0.05
        assert cfg.target_loss is None

    def test_rejects_negative_learning_rate(self):
        with pytest.raises(ValidationError):
            TrainConfig(learning_rate=-1.0)

    def test_rejects_non_positive_tolerance(self):
        with pytest.raises(ValidationError):
            TrainConfig(newton_tol=0.0)

    def test_sample_requires_observations(self):
        with pytest.raises(ValueError):
            Sample(bcs=[], source=np.zeros(2), data=[], mask=[])
        with pytest.raises(ValueError):
            Sample(bcs=[], source=np.zeros(2), data=[1.0, 2.0], mask=[0])


class TestAdam:
    """Tests for adam_step."""

    def test_first_step_has_learning_rate_size(self):
        params = {"x": np.array([1.0, -2.0, 0.5])}
        grads = {"x": np.array([3.0, -0.1, 0.0])}
        adam_step(AdamState(), params, grads, lr=0.1)
        assert np.allclose(params["x"], [0.9, -1.9, 0.5], atol=1e-6)

    def test_missing_gradient_is_skipped(self):
        params = {"x": np.ones(2), "y": np.ones(2)}
        opt = AdamState()
        adam_step(opt, params, {"x": np.ones(2)}, lr=0.1)
        assert np.allclose(params["y"], 1.0)
        assert opt.t == 1 and "y" not in opt.m


class TestAdjointGradient:
    """Adjoint gradients against finite differences of the solved loss."""

    @pytest.mark.parametrize("which", ["darcy", "magneto"])
    def test_matches_finite_differences(self, which, darcy_case, magneto_case, rng):
        case = darcy_case if which == "darcy" else magneto_case
        model = fresh_model(case)
        sample = case.samples[1]
        problem = sample.problem(model)
        s, report = newton_solve(problem)
        assert report.converged
        lam = adjoint_solve(problem, s, sample.data, sample.mask, report.lu)
        grads = lagrangian_grad(problem, s, lam)

        params = trainable_parameters(problem)
        frozen = frozen_masks(problem)
        directions = {}
        for name, value in params.items():
            direction = rng.standard_normal(value.shape)
            if name in frozen:
                direction[frozen[name]] = 0.0
            directions[name] = direction

        def solved_loss(scale):
            originals = {name: value.copy() for name, value in params.items()}
            for name, value in params.items():
                value += scale * directions[name]
            state, rep = newton_solve(problem, s0=s)
            for name, value in params.items():
                value[...] = originals[name]
            assert rep.converged
            return loss(state, sample)

        fd = (solved_loss(FD_STEP) - solved_loss(-FD_STEP)) / (2 * FD_STEP)
        predicted = sum(float(np.sum(grads[name] * directions[name])) for name in params)
        assert predicted == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestTrainLoop:
    """Tests for train and evaluate."""

    def test_history_layout(self, darcy_case):
        model = fresh_model(darcy_case)
        _, history = train(model, darcy_case.samples, TrainConfig(epochs=3, learning_rate=0.01))
        assert isinstance(history, pd.DataFrame)
        assert list(history.columns) == HISTORY_COLUMNS
        assert len(history) == 4 * len(darcy_case.samples)
        assert history[history.epoch == 0].grad_norm.isna().all()
        assert history[history.epoch > 0].grad_norm.notna().all()
        assert not history.aborted.any()

    def test_loss_decreases(self, darcy_case):
        model = fresh_model(darcy_case)
        _, history = train(model, darcy_case.samples, TrainConfig(epochs=20, learning_rate=0.01))
        first = history[history.epoch == 0].loss.mean()
        last = history[history.epoch == 20].loss.mean()
        assert last < first

    def test_zero_learning_rate_freezes_model(self, darcy_case):
        model = fresh_model(darcy_case)
        before = {name: value.copy() for name, value in trainable_parameters(model).items()}
        _, history = train(model, darcy_case.samples, TrainConfig(epochs=2, learning_rate=0.0))
        for name, value in trainable_parameters(model).items():
            assert np.array_equal(value, before[name]), name
        losses = history.groupby("sample").loss.agg(["min", "max"])
        assert np.allclose(losses["min"], losses["max"], rtol=1e-10)

    def test_batch_mode(self, darcy_case):
        model = fresh_model(darcy_case)
        cfg = TrainConfig(epochs=2, learning_rate=0.01, batch_mode=True, warm_start=True)
        _, history = train(model, darcy_case.samples, cfg)
        assert history.epoch.max() == 2

    def test_target_loss_stops_early(self, darcy_case):
        model = fresh_model(darcy_case)
        _, history = train(model, darcy_case.samples, TrainConfig(epochs=50, target_loss=1e10))
        assert history.epoch.max() == 1

    def test_darcy_flux_balance_holds(self, linear_case):
        model = fresh_model(linear_case, epsilon=0.0)
        _, history = train(model, linear_case.samples, TrainConfig(epochs=5, learning_rate=0.05))
        assert history[history.epoch == 0].conservation.notna().all()
        assert history.conservation.max() < 1e-13
        assert history.residual.max() < 1e-11

    def test_nonlinear_flux_balance_holds(self, darcy_case):
        model = fresh_model(darcy_case)
        _, history = train(model, darcy_case.samples, TrainConfig(epochs=5, learning_rate=0.05))
        assert history.conservation.max() < 1e-10
        assert history.residual.max() < 1e-9

    def test_magneto_has_no_flux_balance(self, magneto_case):
        model = fresh_model(magneto_case, activation="prelu")
        _, history = train(model, magneto_case.samples, TrainConfig(epochs=2, learning_rate=0.01))
        assert history.conservation.isna().all()
        assert np.all((model.net.slopes >= 0.0) & (model.net.slopes <= 1.0))

    def test_epsilon_is_reduced_below_limit(self, darcy_case):
        model = fresh_model(darcy_case, epsilon=50.0)
        train(model, darcy_case.samples, TrainConfig(epochs=0))
        eps_l = model.epsilon * lipschitz_bound(model.net, model.metric, model.k)
        assert 0.475 <= eps_l < 0.95

    def test_epsilon_stays_fixed_while_network_is_capped(self, darcy_case):
        model = fresh_model(darcy_case)
        model.epsilon = 0.85 / lipschitz_bound(model.net, model.metric, model.k)
        start = model.epsilon
        _, history = train(model, darcy_case.samples, TrainConfig(epochs=20, learning_rate=0.05))
        assert model.epsilon == start
        assert history.eps_L.max() < 0.95
        assert model.epsilon * lipschitz_bound(model.net, model.metric, model.k) <= 0.9 * (1 + 1e-6)

    def test_cap_rescales_output_layer_only(self, darcy_case):
        model = fresh_model(darcy_case)
        model.epsilon = 2.0 / lipschitz_bound(model.net, model.metric, model.k)
        first = model.net.weights[0].copy()
        _cap_network_lipschitz(model)
        assert model.epsilon * lipschitz_bound(model.net, model.metric, model.k) == pytest.approx(0.9, rel=1e-6)
        assert np.array_equal(model.net.weights[0], first)

    def test_failed_solve_aborts_with_history(self, darcy_case):
        model = fresh_model(darcy_case)
        with pytest.raises(TrainingAborted) as info:
            train(model, darcy_case.samples, TrainConfig(epochs=2, newton_tol=1e-30, newton_maxit=2))
        history = info.value.history
        assert len(history) == 1
        assert bool(history.aborted.iloc[-1]) is True

    def test_empty_dataset(self, darcy_case):
        with pytest.raises(ValueError):
            train(fresh_model(darcy_case), [], TrainConfig(epochs=1))

    def test_evaluate(self, darcy_case):
        results = evaluate(fresh_model(darcy_case), darcy_case.samples)
        assert len(results) == 2
        assert all(r["converged"] for r in results)
        assert all(r["loss"] >= 0.0 for r in results)

    def test_relative_tolerance_loosens_solves(self, darcy_case):
        tight = evaluate(fresh_model(darcy_case), darcy_case.samples, TrainConfig())
        loose = evaluate(fresh_model(darcy_case), darcy_case.samples, TrainConfig(relative_tolerance=1e-2))
        assert all(r["converged"] for r in loose)
        assert sum(r["iterations"] for r in loose) <= sum(r["iterations"] for r in tight)
        with pytest.raises(ValidationError):
            TrainConfig(relative_tolerance=0.0)


def _rms(result, sample):
    return np.sqrt(result["loss"] / sample.mask.size)


def _profile_values(case, level, values, y):
    return np.array([row["value"] for row in profile(case.coarse, level, values, y=y)])


@pytest.mark.slow
class TestDeskScaleRuns:
    """Full training runs on the 20 x 20 desk-scale grid."""

    def test_linear_darcy_fits_to_machine_precision(self):
        case = generate_dataset(CaseSpec(case="d1", alphas=[10.0], fine=20, parts=3))
        model = build_surrogate(case.coarse, case.k, [5, 5], activation="elu", epsilon=0.0, seed=0)
        n_obs = case.samples[0].mask.size
        cfg = TrainConfig(epochs=20000, learning_rate=0.05, target_loss=0.25e-12 * n_obs, log_every=1000)
        _, history = train(model, case.samples, cfg)
        assert history.conservation.max() < 1e-13
        assert history.residual.max() < 1e-11
        for result, sample in zip(evaluate(model, case.samples), case.samples):
            assert _rms(result, sample) < 1e-6

    def test_nonlinear_darcy_interpolates_held_out_material(self):
        case = generate_dataset(CaseSpec(case="d2", alphas=[1.0, 2.0, 3.0, 4.0], fine=20, parts=3))
        training = [case.samples[i] for i in (0, 1, 3)]
        model = build_surrogate(case.coarse, case.k, [5, 5], activation="elu", epsilon=0.1, seed=0)
        cfg = TrainConfig(epochs=5000, learning_rate=0.005, target_loss=1e-5, log_every=1000)
        train(model, training, cfg)
        assert all(r["loss"] < 1e-4 for r in evaluate(model, training))

        n_w = model.n_w
        profiles = {}
        for sample, alpha in zip(case.samples, case.spec.alphas):
            s, report = newton_solve(sample.problem(model))
            assert report.converged, sample.label
            profiles[alpha] = _profile_values(case, 2, s.u.values, 0.5)
            if alpha != 3.0:
                data = _profile_values(case, 2, sample.data[n_w:], 0.5)
                assert np.max(np.abs(profiles[alpha] - data)) <= 0.01 * np.max(np.abs(data))

        low = np.minimum(profiles[2.0], profiles[4.0])
        high = np.maximum(profiles[2.0], profiles[4.0])
        slack = 0.01 * np.max(np.abs(high))
        assert np.all(profiles[3.0] >= low - slack)
        assert np.all(profiles[3.0] <= high + slack)

    def test_magnetostatics_field_has_one_jump_region(self):
        case = generate_dataset(CaseSpec(case="magneto", alphas=[1.0, 2.0, 4.0], fine=20, parts=5))
        model = build_surrogate(case.coarse, case.k, [10], activation="prelu", epsilon=0.1, seed=0)
        cfg = TrainConfig(epochs=5000, learning_rate=0.005, target_loss=1e-5, log_every=1000)
        train(model, case.samples, cfg)
        assert all(r["loss"] < 1e-4 for r in evaluate(model, case.samples))

        sample = case.samples[-1]
        s, report = newton_solve(sample.problem(model))
        assert report.converged
        # coarse nodes sit on y = 0.4 and 0.6; the row at 0.4 crosses the inclusion
        field_b = _profile_values(case, 0, s.w.values, 0.4)
        steps = np.diff(field_b)
        tol = 1e-3 * np.ptp(field_b)
        signs = np.sign(steps[np.abs(steps) > tol])
        assert signs.size >= 2
        assert signs[0] > 0 and signs[-1] < 0
        assert np.count_nonzero(np.diff(signs)) == 1
