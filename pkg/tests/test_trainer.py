import numpy as np
import pytest

import NAAS.trainer
from NAAS.array_type import SampleSet
from NAAS.energy import AnnealedPotential, GaussianMixture, IsotropicGaussian
from NAAS.exceptions import InputError, TrainingError
from NAAS.net import ControlNet, regression_step
from NAAS.schedule import NoiseSchedule
from NAAS.trainer import (
    NAASTrainer,
    TrainConfig,
    sample,
    sample_as_baseline,
    terminal_adjoint,
    train,
    train_as_baseline,
)


def _config(**overrides):
    settings = dict(
        n_stages=1,
        n_epochs_u=2,
        n_epochs_v=2,
        n_steps_u=3,
        n_steps_v=3,
        batch_size=16,
        n_paths=16,
        buffer_capacity=500,
        lr_u=1e-3,
        lr_v=1e-3,
        e_max=None,
        schedule="constant",
        n_prior=10,
        n_anneal=10,
        hidden=(16,),
        time_embedding=4,
        eval_samples=0,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture
def mixture_potential():
    target = GaussianMixture(np.array([[-2.0, 0.0], [2.0, 0.0]]), variance=0.5)
    return AnnealedPotential(IsotropicGaussian(2), target)


def _zero_output(net):
    x = np.random.default_rng(0).standard_normal((5, net.dim))
    return np.array_equal(net(0.5, x), np.zeros_like(x))


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"mode": "flow"},
            {"n_paths": 0},
            {"n_epochs_u": 0},
            {"n_stages": -1},
            {"lr_v": 0.0},
            {"eval_samples": -1},
        ],
        ids=str,
    )
    def test_rejects_invalid_values(self, overrides):
        with pytest.raises(InputError):
            _config(**overrides)

    def test_noise_schedule(self):
        sched = _config(schedule="geometric", sigma_max=2.0).noise_schedule()
        assert sched.sigma(0.0) == pytest.approx(2.0 * np.sqrt(2 * np.log(200.0)))


class TestPhases:
    """Each phase updates exactly one control."""

    def test_no_stages_keeps_zero_controls(self, mixture_potential):
        u_net, v_net, history = train(_config(n_stages=0), mixture_potential, seed=0)
        assert history == []
        assert _zero_output(u_net) and _zero_output(v_net)

    def test_u_phase_leaves_v_alone(self, mixture_potential):
        trainer = NAASTrainer(_config(), mixture_potential, seed=1)
        u_before, v_before = trainer.u_net.param_hash(), trainer.v_net.param_hash()
        trainer.u_phase(0)
        assert trainer.u_net.param_hash() != u_before
        assert trainer.v_net.param_hash() == v_before
        assert len(trainer.buffer_u) == 2 * 16 * 11
        assert len(trainer.buffer_v) == 0

    def test_v_phase_leaves_u_alone(self, mixture_potential):
        trainer = NAASTrainer(_config(), mixture_potential, seed=1)
        u_before, v_before = trainer.u_net.param_hash(), trainer.v_net.param_hash()
        trainer.v_phase(0)
        assert trainer.v_net.param_hash() != v_before
        assert trainer.u_net.param_hash() == u_before
        assert len(trainer.buffer_v) == 2 * 16

    def test_biased_mode_never_trains_v(self, mixture_potential):
        trainer = NAASTrainer(_config(mode="naas-biased", n_stages=2), mixture_potential, 2)
        v_before = trainer.v_net.param_hash()
        trainer.train()
        assert trainer.v_net.param_hash() == v_before
        assert _zero_output(trainer.v_net)
        assert {row["phase"] for row in trainer.history} == {"u"}

    def test_baseline_never_trains_u(self, mixture_potential):
        trainer = NAASTrainer(_config(mode="as-baseline"), mixture_potential, 2)
        u_before, v_before = trainer.u_net.param_hash(), trainer.v_net.param_hash()
        trainer.train()
        assert trainer.u_net.param_hash() == u_before
        assert trainer.v_net.param_hash() != v_before
        assert {row["phase"] for row in trainer.history} == {"as"}

    def test_one_simulation_per_refresh(self, mixture_potential, monkeypatch):
        calls = []
        original = NAAS.trainer.simulate

        def counting(*args, **kwargs):
            calls.append(kwargs["key"])
            return original(*args, **kwargs)

        monkeypatch.setattr(NAAS.trainer, "simulate", counting)
        train(_config(n_stages=2), mixture_potential, seed=0)
        assert len(calls) == 2 * (2 + 2)
        assert len(set(calls)) == len(calls)


class TestTraining:
    """Whole runs: determinism, history, evaluation and error context."""

    def test_deterministic_given_the_seed(self, mixture_potential):
        first = NAASTrainer(_config(), mixture_potential, seed=5)
        second = NAASTrainer(_config(), mixture_potential, seed=5)
        first.train()
        second.train()
        assert first.u_net.param_hash() == second.u_net.param_hash()
        assert first.v_net.param_hash() == second.v_net.param_hash()
        assert first.history == second.history

        other = NAASTrainer(_config(), mixture_potential, seed=6)
        other.train()
        assert other.u_net.param_hash() != first.u_net.param_hash()

    def test_history_and_evaluation_rows(self, mixture_potential):
        cfg = _config(eval_samples=40, sinkhorn_epsilon=0.1, sinkhorn_iters=2000)
        trainer = NAASTrainer(cfg, mixture_potential, seed=0)
        _, _, history = trainer.train()
        assert [(row["phase"], row["epoch"]) for row in history] == [
            ("u", 0),
            ("u", 1),
            ("v", 0),
            ("v", 1),
        ]
        assert len(trainer.timing) == len(history)
        assert all(row["seconds"] >= 0 for row in trainer.timing)
        for row in history:
            assert np.isfinite(row["loss"])
            if row["epoch"] == 1:
                assert row["sinkhorn"] >= 0 and row["mmd"] >= 0
                assert 1.0 - 1e-9 <= row["ess"] <= 40.0 + 1e-9
                assert row["iw_variance"] >= 0
            else:
                assert row["sinkhorn"] is None and row["mmd"] is None
                assert row["ess"] is None and row["iw_variance"] is None

    def test_baseline_rows_carry_no_weights(self, mixture_potential):
        cfg = _config(mode="as-baseline", eval_samples=20, sinkhorn_epsilon=0.1)
        _, _, history = train(cfg, mixture_potential, seed=0)
        assert history[-1]["sinkhorn"] is not None
        assert all(row["ess"] is None for row in history)

    def test_callback_after_each_stage(self, mixture_potential):
        seen = []
        trainer = NAASTrainer(_config(n_stages=3, n_epochs_u=1, n_epochs_v=1), mixture_potential, 0)
        trainer.train(callback=lambda stage, owner: seen.append((stage, owner)))
        assert [stage for stage, _ in seen] == [0, 1, 2]
        assert all(owner is trainer for _, owner in seen)

    def test_training_error_names_the_phase(self, mixture_potential, monkeypatch):
        def failing(net, opt, batch):
            raise TrainingError("non-finite regression loss", payload={"size": 16})

        monkeypatch.setattr(NAAS.trainer, "regression_step", failing)
        with pytest.raises(TrainingError) as info:
            train(_config(), mixture_potential, seed=0)
        assert info.value.context == {"stage": 0, "phase": "u", "epoch": 0}
        assert info.value.payload == {"size": 16}

    @pytest.mark.parametrize(
        "prior",
        [IsotropicGaussian(2, 3.0), GaussianMixture(np.zeros((1, 2)), variance=1.0)],
        ids=["wider", "mixture"],
    )
    def test_prior_must_match_the_prior_stage(self, prior):
        pot = AnnealedPotential(prior, IsotropicGaussian(2, 3.0))
        with pytest.raises(InputError):
            NAASTrainer(_config(), pot, seed=0)
        with pytest.raises(InputError):
            train(_config(), pot, seed=0)

    def test_prior_with_the_configured_width(self):
        wide = IsotropicGaussian(2, 3.0)
        trainer = NAASTrainer(_config(sigma_bar=3.0), AnnealedPotential(wide, wide), seed=0)
        assert trainer.pot.prior is wide

    def test_self_target_keeps_controls_at_zero(self, self_potential):
        u_net, v_net, _ = train(_config(), self_potential, seed=0)
        x = np.random.default_rng(1).standard_normal((50, 2))
        for t, net in ((0.5, u_net), (-0.5, v_net)):
            assert np.mean(np.linalg.norm(net(t, x), axis=1)) <= 1e-2

    def test_regression_on_a_frozen_buffer(self, quadratic_potential):
        cfg = _config(n_epochs_u=1, n_steps_u=1, n_paths=64)
        trainer = NAASTrainer(cfg, quadratic_potential, seed=3)
        trainer.u_phase(0)
        entries = trainer.buffer_u.entries()
        target = -entries.a
        before, _ = trainer.u_net.loss_and_grad(entries.t, entries.x, target)
        rng = np.random.default_rng(0)
        for _ in range(300):
            batch = trainer.buffer_u.sample_batch(64, rng)
            regression_step(trainer.u_net, trainer.opt_u, (batch.t, batch.x, -batch.a))
        after, _ = trainer.u_net.loss_and_grad(entries.t, entries.x, target)
        assert after < before


class TestBaseline:
    """The two-stage AS baseline."""

    def test_terminal_adjoint(self, quadratic_potential):
        x = np.array([[1.0, -2.0], [0.5, 0.0]])
        # grad U_1 = x / 0.25 and the prior contributes x
        np.testing.assert_allclose(terminal_adjoint(quadratic_potential, x), 3.0 * x)

    def test_terminal_adjoint_is_clipped(self):
        pot = AnnealedPotential(
            IsotropicGaussian(2), IsotropicGaussian(2, 0.5), e_max=2.0, a_max=1.0
        )
        x = np.array([[3.0, 4.0]])
        # clip(4x, 2) = (1.2, 1.6); minus x gives (-1.8, -2.4), then clipped to norm 1
        np.testing.assert_allclose(terminal_adjoint(pot, x), [[-0.6, -0.8]])

    def test_reference_law_as_target(self):
        target = IsotropicGaussian(2, 1.5)
        x = np.random.default_rng(0).standard_normal((6, 2))
        pot = AnnealedPotential(IsotropicGaussian(2, 1.5), target)
        np.testing.assert_array_equal(terminal_adjoint(pot, x), 0.0)
        cfg = _config(mode="as-baseline", sigma_bar=1.5)
        assert _zero_output(train_as_baseline(cfg, target, seed=0))

    def test_train_as_baseline(self, mixture_potential):
        v_net = train_as_baseline(_config(mode="as-baseline"), mixture_potential.target, seed=0)
        assert isinstance(v_net, ControlNet)
        assert not _zero_output(v_net)
        with pytest.raises(InputError):
            train_as_baseline(_config(), mixture_potential.target, seed=0)


class TestSampling:
    def test_sample_shapes(self, quadratic_potential, constant_schedule):
        samples = sample(None, None, quadratic_potential, constant_schedule, 7, 0, 5, 5)
        assert isinstance(samples, SampleSet)
        assert samples.shape == (7, 2)
        assert samples.provenance == "generated" and samples.seed == 0

    def test_baseline_samples_are_time_zero_states(self, constant_schedule):
        samples = sample_as_baseline(None, constant_schedule, 5, 0, 4, dim=3)
        assert samples.shape == (5, 3)

    def test_same_key_same_samples(self, quadratic_potential):
        sched = NoiseSchedule.geometric(0.01, 1.0)
        first = sample(None, None, quadratic_potential, sched, 6, 4, 5, 5, key=(2, 1))
        second = sample(None, None, quadratic_potential, sched, 6, 4, 5, 5, key=(2, 1))
        np.testing.assert_array_equal(first, second)

    def test_zero_samples(self, quadratic_potential, constant_schedule):
        samples = sample(None, None, quadratic_potential, constant_schedule, 0, 0, 5, 5)
        assert samples.shape == (0, 2)

    def test_negative_count(self, quadratic_potential, constant_schedule):
        with pytest.raises(InputError):
            sample(None, None, quadratic_potential, constant_schedule, -1, 0)
        with pytest.raises(InputError):
            sample_as_baseline(None, constant_schedule, -1, 0, dim=2)
