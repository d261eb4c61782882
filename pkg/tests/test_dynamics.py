import numpy as np
import pytest
from scipy import integrate

from NAAS.dynamics import (
    DIVERGENCE_RADIUS,
    bridge_sample,
    brownian_increments,
    simulate,
    simulate_prior,
    solve_lean_adjoint,
    time_grid,
)
from NAAS.energy import AnnealedPotential, EnergyModel, IsotropicGaussian
from NAAS.exceptions import AdjointError, InputError, SimulationError
from NAAS.net import ControlNet
from NAAS.path import Trajectory
from NAAS.schedule import NoiseSchedule


def _constant_control(dim, value):
    net = ControlNet(dim, hidden=(), time_embedding=2)
    net.layers[-1][1][:] = value
    return net


class TestTimeGrid:
    """Uniform grids on ``[-1, 0]`` and ``[0, 1]``."""

    def test_layout(self):
        times, boundary = time_grid(4, 5)
        assert times.shape == (10,)
        assert boundary == 4
        assert times[0] == -1.0 and times[boundary] == 0.0 and times[-1] == 1.0
        np.testing.assert_allclose(np.diff(times[: boundary + 1]), 0.25)
        np.testing.assert_allclose(np.diff(times[boundary:]), 0.2)


class TestSimulate:
    """Euler-Maruyama simulation of the two-stage dynamics."""

    def test_trajectory_layout(self, quadratic_potential, constant_schedule):
        traj = simulate(None, None, quadratic_potential, constant_schedule, 3, 4, seed=0, n_paths=5)
        assert traj.states.shape == (8, 5, 2)
        assert traj.increments.shape == (7, 5, 2)
        assert traj.n_prior == 3 and traj.n_anneal == 4
        np.testing.assert_array_equal(traj.states[0], 0.0)
        np.testing.assert_array_equal(traj.x0, traj.states[3])
        assert not traj.diverged.any()

    def test_chunks_reproduce_the_whole_batch(self, quadratic_potential, constant_schedule):
        args = (quadratic_potential, constant_schedule, 5, 5)
        whole = simulate(None, None, *args, seed=3, n_paths=6, key=(0, 1))
        first = simulate(None, None, *args, seed=3, n_paths=4, key=(0, 1))
        second = simulate(None, None, *args, seed=3, n_paths=2, key=(0, 1), offset=4)
        joined = np.concatenate([first.states, second.states], axis=1)
        np.testing.assert_array_equal(whole.states, joined)

    def test_keys_separate_streams(self):
        a = brownian_increments(0, (0, 0), 2, 3, 2)
        b = brownian_increments(0, (0, 1), 2, 3, 2)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, brownian_increments(0, (0, 0), 2, 3, 2))

    def test_prior_stage_matches_full_simulation(self, quadratic_potential, constant_schedule):
        v_net = _constant_control(2, [0.3, -0.1])
        full = simulate(v_net, None, quadratic_potential, constant_schedule, 6, 4, 9, 3, key=(2,))
        prior = simulate_prior(v_net, constant_schedule, 6, 9, 3, key=(2,))
        np.testing.assert_array_equal(prior.states, full.states[:7])
        np.testing.assert_array_equal(prior.x0, full.x0)
        assert prior.n_anneal == 0

    def test_deterministic_flow_closed_form(self, constant_schedule):
        # v = c gives X_0 = sigma_bar c; U_0 = U_1 = |x|^2 / 2 then contracts by exp(-1/2)
        pot = AnnealedPotential(IsotropicGaussian(2), IsotropicGaussian(2))
        c = np.array([1.0, -2.0])
        n = 1000
        v_net = _constant_control(2, c)
        traj = simulate(v_net, None, pot, constant_schedule, 10, n, 0, 2, noise=False)
        np.testing.assert_allclose(traj.x0, [c, c], rtol=1e-12)
        np.testing.assert_allclose(traj.terminal, [c * (1 - 0.5 / n) ** n] * 2, rtol=1e-10)
        np.testing.assert_allclose(traj.terminal, [c * np.exp(-0.5)] * 2, rtol=1e-3)

    def test_step_halving_moves_the_mean_by_order_dt(self, quadratic_potential, constant_schedule):
        v_net = _constant_control(2, [1.0, -2.0])
        steps = np.array([25, 50, 100, 200])
        means = [
            simulate(
                v_net, None, quadratic_potential, constant_schedule, 10, n, 0, 4, noise=False
            ).terminal.mean(axis=0)
            for n in steps
        ]
        changes = [np.linalg.norm(fine - coarse) for coarse, fine in zip(means, means[1:])]
        slope = np.polyfit(np.log(1.0 / steps[:-1]), np.log(changes), 1)[0]
        assert 0.5 <= slope <= 1.5

    def test_ornstein_uhlenbeck_moments(self, self_potential, constant_schedule):
        n_paths, n = 4000, 50
        traj = simulate(None, None, self_potential, constant_schedule, 10, n, 5, n_paths)
        # unit variance at t = 0, then the Euler recursion v <- (1 - dt/2)^2 v + dt
        variance = 1.0
        for _ in range(n):
            variance = (1 - 0.5 / n) ** 2 * variance + 1.0 / n
        x0, x1 = traj.x0, traj.terminal
        for samples, expected in ((x0, 1.0), (x1, variance)):
            mean_se = np.sqrt(expected / n_paths)
            np.testing.assert_array_less(np.abs(samples.mean(axis=0)), 4 * mean_se)
            se = expected * np.sqrt(2.0 / n_paths)
            np.testing.assert_array_less(np.abs(samples.var(axis=0) - expected), 4 * se)

    def test_divergent_paths_are_frozen(self, self_potential, constant_schedule):
        v_net = _constant_control(2, 1e9)
        traj = simulate(v_net, None, self_potential, constant_schedule, 4, 4, 0, 3)
        assert traj.diverged.all()
        np.testing.assert_array_equal(traj.terminal, traj.states[0])
        assert np.all(np.linalg.norm(traj.states, axis=-1) <= DIVERGENCE_RADIUS)

    def test_nan_state_raises(self, self_potential, constant_schedule):
        u_net = _constant_control(2, np.nan)
        with pytest.raises(SimulationError) as info:
            simulate(None, u_net, self_potential, constant_schedule, 3, 3, 0, 2)
        assert info.value.stage == "anneal"
        assert info.value.step == 0

    def test_invalid_counts(self, self_potential, constant_schedule):
        with pytest.raises(InputError):
            simulate(None, None, self_potential, constant_schedule, 0, 3, 0)
        with pytest.raises(InputError):
            simulate_prior(None, constant_schedule, 3, 0)

    def test_no_noise_without_control_stays_at_origin(self, quadratic_potential):
        sched = NoiseSchedule.geometric(0.01, 1.0)
        traj = simulate(None, None, quadratic_potential, sched, 3, 3, 0, 2, noise=False)
        np.testing.assert_array_equal(traj.states, 0.0)


class TestLeanAdjoint:
    """Backward lean-adjoint solve along the annealed stage."""

    def test_zero_when_prior_equals_target(self, self_potential):
        sched = NoiseSchedule.geometric(0.01, 1.0)
        traj = simulate(None, None, self_potential, sched, 5, 20, 1, 4)
        adj = solve_lean_adjoint(traj, self_potential, sched)
        np.testing.assert_array_equal(adj.adjoints, 0.0)
        assert adj.adjoints.shape == (21, 4, 2)

    def _adjoint_error(self, pot, n):
        sched = NoiseSchedule.constant(1.0)
        v_net = _constant_control(2, [1.0, 0.5])
        traj = simulate(v_net, None, pot, sched, 1, n, 0, 1, noise=False)
        adj = solve_lean_adjoint(traj, pot, sched)
        # U_t = h(t)|x|^2 / 2 with h = 1 + 3t, so a(0) = 3 X_0 int_0^1 exp(-t - 1.5 t^2) dt
        integral = integrate.quad(lambda t: np.exp(-t - 1.5 * t**2), 0.0, 1.0, epsabs=1e-14)[0]
        exact = 3.0 * traj.x0[0] * integral
        return np.linalg.norm(adj.a0[0] - exact) / np.linalg.norm(exact)

    def test_closed_form_on_quadratic_potentials(self, quadratic_potential):
        assert self._adjoint_error(quadratic_potential, 4000) <= 1e-3

    def test_first_order_convergence(self, quadratic_potential):
        coarse = self._adjoint_error(quadratic_potential, 1000)
        fine = self._adjoint_error(quadratic_potential, 2000)
        assert 1.6 <= coarse / fine <= 2.4

    def test_terminal_condition_and_clipping(self, quadratic_potential):
        sched = NoiseSchedule.constant(1.0)
        pot = AnnealedPotential(
            quadratic_potential.prior, quadratic_potential.target, a_max=0.01
        )
        traj = simulate(None, None, pot, sched, 2, 10, 0, 8)
        adj = solve_lean_adjoint(traj, pot, sched)
        np.testing.assert_array_equal(adj.adjoints[-1], 0.0)
        assert adj.max_norm() <= 0.01 + 1e-12

    def test_needs_annealed_stage(self, constant_schedule):
        traj = simulate_prior(None, constant_schedule, 3, 0, 2, dim=2)
        with pytest.raises(InputError):
            solve_lean_adjoint(traj, None, constant_schedule)

    def test_non_finite_adjoint(self, constant_schedule):
        class Broken(EnergyModel):
            def _energy(self, x):
                return np.zeros(x.shape[0])

            def _grad(self, x):
                return np.full(x.shape, np.inf)

        pot = AnnealedPotential(IsotropicGaussian(2), Broken(2))
        times, boundary = time_grid(1, 3)
        traj = Trajectory(times, np.zeros((5, 2, 2)), boundary=boundary)
        with pytest.raises(AdjointError) as info:
            solve_lean_adjoint(traj, pot, constant_schedule)
        assert info.value.step == 2


class TestBridge:
    """Brownian bridge pinned at ``X_{-1} = 0`` and ``X_0 = x0``."""

    def test_pinned_end_points(self, rng):
        x0 = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(bridge_sample(x0, -1.0, 2.0, rng), 0.0)
        np.testing.assert_array_equal(bridge_sample(x0, 0.0, 2.0, rng), x0)

    def test_interior_moments(self):
        n, t, sigma_bar = 100000, -0.3, 1.5
        x0 = np.tile([1.0, -2.0], (n, 1))
        draws = bridge_sample(x0, t, sigma_bar, np.random.default_rng(1))
        mean, variance = (1 + t) * x0[0], (1 + t) * (-t) * sigma_bar**2
        np.testing.assert_array_less(np.abs(draws.mean(axis=0) - mean), 4 * np.sqrt(variance / n))
        se = variance * np.sqrt(2.0 / n)
        np.testing.assert_array_less(np.abs(draws.var(axis=0) - variance), 4 * se)

    def test_marginal_matches_brownian_motion(self):
        # X_0 ~ N(0, sigma_bar^2) bridged back to t gives N(0, (1 + t) sigma_bar^2)
        n, t, sigma_bar = 100000, -0.5, 2.0
        rng = np.random.default_rng(2)
        x0 = sigma_bar * rng.standard_normal((n, 1))
        draws = bridge_sample(x0, t, sigma_bar, rng)
        variance = (1 + t) * sigma_bar**2
        assert abs(draws.var() - variance) <= 4 * variance * np.sqrt(2.0 / n)

    def test_per_row_times(self):
        x0 = np.ones((3, 2))
        t = np.array([-1.0, -0.5, 0.0])
        draws = bridge_sample(x0, t, 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(draws[0], 0.0)
        np.testing.assert_array_equal(draws[2], 1.0)

    @pytest.mark.parametrize("t", [0.1, -1.5])
    def test_time_out_of_range(self, t):
        with pytest.raises(InputError):
            bridge_sample(np.zeros(2), t, 1.0, 0)
