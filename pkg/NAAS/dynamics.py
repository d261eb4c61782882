"""
Forward simulation of the two-stage controlled dynamics, the backward lean-adjoint solve and
the Brownian-bridge conditional of the prior stage.

Prior stage, ``t in [-1, 0]``, from ``X_{-1} = 0``::

    dX = sigma_bar v(t, X) dt + sigma_bar dW

Annealed stage, ``t in [0, 1]``::

    dX = (-(sigma_t^2 / 2) grad U_t(X) + sigma_t u(t, X)) dt + sigma_t dW

Both stages use Euler-Maruyama on uniform grids. The lean adjoint is integrated backwards with
explicit Euler on the same annealed grid, which is the discrete adjoint of the forward scheme.
"""

import logging

import numpy as np

from NAAS.energy import AnnealedPotential, clip_norm
from NAAS.exceptions import AdjointError, InputError, SimulationError
from NAAS.path import AdjointPath, Trajectory
from NAAS.schedule import NoiseSchedule
from NAAS.streams import as_generator, path_stream

logger = logging.getLogger(__name__)

DIVERGENCE_RADIUS = 1e6


def time_grid(n_prior: int, n_anneal: int) -> tuple[np.ndarray, int]:
    """
    Uniform grids on ``[-1, 0]`` and ``[0, 1]`` joined at ``t = 0``.

    Returns
    -------
    tuple
        The grid of ``n_prior + n_anneal + 1`` times and the index of ``t = 0``.
    """
    prior = -1.0 + np.arange(n_prior + 1) / n_prior if n_prior else np.zeros(1)
    anneal = np.arange(1, n_anneal + 1) / n_anneal if n_anneal else np.zeros(0)
    return np.concatenate([prior, anneal]), n_prior


def brownian_increments(
    seed: int, key: tuple, n_paths: int, n_steps: int, dim: int, offset: int = 0
) -> np.ndarray:
    """
    Standard normal draws for each path from its own stream, shape ``(n_steps, n_paths, dim)``.

    Path ``i`` uses the stream keyed by ``(seed, key, offset + i)``, so any split of the paths
    into chunks reproduces exactly the same draws.
    """
    noise = np.empty((n_steps, n_paths, dim))
    for i in range(n_paths):
        noise[:, i, :] = path_stream(seed, key, offset + i).standard_normal((n_steps, dim))
    return noise


def _control(net, t, x):
    if net is None:
        return np.zeros_like(x)
    return net(t, x)


def _advance(x, update, diverged, step, stage):
    proposed = x + update
    if np.any(np.isnan(proposed[~diverged])):
        raise SimulationError(f"non-finite state in the {stage} stage at step {step}", step, stage)
    norms = np.linalg.norm(proposed, axis=1)
    newly = ~diverged & ~(norms <= DIVERGENCE_RADIUS)
    if np.any(newly):
        logger.warning(
            "%d paths exceeded the divergence radius in the %s stage at step %d",
            int(newly.sum()),
            stage,
            step,
        )
    diverged = diverged | newly
    proposed[diverged] = x[diverged]
    return proposed, diverged


def _simulate(v_net, u_net, pot, sched, dim, n_prior, n_anneal, seed, n_paths, key, offset, noise):
    times, boundary = time_grid(n_prior, n_anneal)
    n_steps = n_prior + n_anneal
    if noise:
        unit = brownian_increments(seed, key, n_paths, n_steps, dim, offset)
    else:
        unit = np.zeros((n_steps, n_paths, dim))
    increments = unit * np.sqrt(np.diff(times))[:, None, None]

    states = np.empty((n_steps + 1, n_paths, dim))
    states[0] = 0.0
    diverged = np.zeros(n_paths, dtype=bool)
    x = states[0]
    sigma_bar = sched.sigma_bar

    for k in range(n_prior):
        t, dt = times[k], times[k + 1] - times[k]
        update = sigma_bar * _control(v_net, t, x) * dt + sigma_bar * increments[k]
        x, diverged = _advance(x, update, diverged, k, "prior")
        states[k + 1] = x

    for j in range(n_anneal):
        k = boundary + j
        t, dt = times[k], times[k + 1] - times[k]
        sigma = sched.sigma(t)
        drift = -0.5 * sigma**2 * pot.grad(t, x) + sigma * _control(u_net, t, x)
        x, diverged = _advance(x, drift * dt + sigma * increments[k], diverged, j, "anneal")
        states[k + 1] = x

    if np.any(diverged):
        logger.debug("%d of %d paths flagged as diverged", int(diverged.sum()), n_paths)
    return Trajectory(times, states, increments, boundary, diverged)


def simulate(
    v_net,
    u_net,
    pot: AnnealedPotential,
    sched: NoiseSchedule,
    n_prior: int,
    n_anneal: int,
    seed: int,
    n_paths: int = 1,
    key: tuple = (),
    offset: int = 0,
    noise: bool = True,
) -> Trajectory:
    """
    Simulate ``n_paths`` paths of the two-stage dynamics over ``[-1, 1]``.

    Parameters
    ----------
    v_net, u_net : ControlNet or None
        Controls of the prior and annealed stages; ``None`` means the zero control.
    pot : AnnealedPotential
        Supplies the E_max-clipped ``grad U_t`` of the reference drift.
    sched : NoiseSchedule
        ``sigma_bar`` for the prior stage and ``sigma_t`` for the annealed stage.
    n_prior, n_anneal : int
        Uniform step counts per stage, both at least 1.
    seed : int
        Run seed; together with ``key`` and the path index it fixes the Brownian noise.
    n_paths : int
        Number of paths.
    key : tuple of int
        Extra stream keys distinguishing refreshes (stage, phase, epoch, ...).
    offset : int
        Index of the first path, for simulating a chunk of a larger batch.
    noise : bool
        If False, no Brownian noise is injected (deterministic flow).

    Raises
    ------
    SimulationError
        If a state becomes NaN; the error names the step and stage.
    """
    if n_prior < 1 or n_anneal < 1:
        raise InputError(f"step counts must be at least 1, got {n_prior} and {n_anneal}")
    if n_paths < 0:
        raise InputError(f"path count must be non-negative, got {n_paths}")
    return _simulate(
        v_net, u_net, pot, sched, pot.dim, n_prior, n_anneal, seed, n_paths, key, offset, noise
    )


def simulate_prior(
    v_net,
    sched: NoiseSchedule,
    n_prior: int,
    seed: int,
    n_paths: int = 1,
    key: tuple = (),
    offset: int = 0,
    noise: bool = True,
    dim: int = None,
) -> Trajectory:
    """
    Simulate only the prior stage on ``[-1, 0]``.

    The noise of each path coincides with the first ``n_prior`` increments that ``simulate``
    draws for the same ``(seed, key, path)``.
    """
    if n_prior < 1:
        raise InputError(f"step count must be at least 1, got {n_prior}")
    if v_net is None and dim is None:
        raise InputError("the state dimension is needed when the control is None")

    dim = dim if dim is not None else v_net.dim
    return _simulate(v_net, None, None, sched, dim, n_prior, 0, seed, n_paths, key, offset, noise)


def solve_lean_adjoint(
    traj: Trajectory, pot: AnnealedPotential, sched: NoiseSchedule
) -> AdjointPath:
    """
    Integrate the lean adjoint backwards along the annealed stage of ``traj``.

    ``da/dt = (sigma_t^2 / 2) grad^2 U_t(X_t) a - d/dt grad U_t(X_t)`` with ``a(1) = 0``, stepped
    as ``a_k = a_{k+1} - dt (sigma_k^2 / 2) H(t_k, X_k) a_{k+1} + dt d/dt grad U(X_k)``. Each
    ``a_k`` is clipped in norm at the potential's A_max.

    Raises
    ------
    AdjointError
        If an adjoint state is not finite.
    """
    if traj.n_anneal < 1:
        raise InputError("trajectory does not cover the annealed stage [0, 1]")
    times = traj.anneal_times
    states = traj.anneal_states
    adjoints = np.zeros_like(states)
    for k in range(traj.n_anneal - 1, -1, -1):
        t, dt = times[k], times[k + 1] - times[k]
        x, a_next = states[k], adjoints[k + 1]
        half_var = 0.5 * sched.sigma(t) ** 2
        a = a_next - dt * half_var * pot.hvp(t, x, a_next) + dt * pot.dt_grad(x)
        a = clip_norm(a, pot.a_max)
        if not np.all(np.isfinite(a[traj.valid])):
            raise AdjointError(f"non-finite adjoint at step {k}", k)
        adjoints[k] = a
    return AdjointPath(times, adjoints)


def bridge_sample(x0: np.ndarray, t, sigma_bar: float, rng) -> np.ndarray:
    """
    Draw ``X_t`` from the Brownian bridge on ``[-1, 0]`` pinned at ``X_{-1} = 0``, ``X_0 = x0``.

    ``X_t ~ N((1 + t) x0, (1 + t)(-t) sigma_bar^2 I)``.

    Parameters
    ----------
    x0 : np.ndarray
        End points, ``(d,)`` or ``(n, d)``.
    t : float or np.ndarray
        A time in ``[-1, 0]``, shared or one per row.
    sigma_bar : float
        Diffusion coefficient of the prior stage.
    rng : np.random.Generator or int
    """
    rng = as_generator(rng)
    x0 = np.asarray(x0, dtype=np.float64)
    t_array = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_array)) or np.any(t_array < -1.0) or np.any(t_array > 0.0):
        raise InputError(f"bridge time must lie in [-1, 0], got {t}")
    if x0.ndim == 2 and t_array.ndim == 1:
        t_array = t_array[:, None]
    elapsed = 1.0 + t_array
    std = sigma_bar * np.sqrt(elapsed * (-t_array))
    return elapsed * x0 + std * rng.standard_normal(x0.shape)
