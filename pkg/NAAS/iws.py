"""
Importance weights of simulated paths and resampling by those weights.

For a path simulated under the controls ``(v, u)`` the log-weight against the target path
measure is, up to an additive constant shared by all paths,

    log w = sum_prior  (-1/2 |v|^2 dt - v . dW)
          + sum_anneal (-1/2 |u|^2 dt - u . dW - d/dt U_t(X) dt)

with every term evaluated at the left end of its step. The weights are a diagnostic only:
training never consumes them.
"""

import logging

import numpy as np
from scipy.special import logsumexp

from NAAS.energy import AnnealedPotential
from NAAS.exceptions import BufferStateError, InputError
from NAAS.path import Trajectory
from NAAS.streams import as_generator

logger = logging.getLogger(__name__)

RESAMPLING_METHODS = ("multinomial", "systematic")


def _control(net, t, x):
    if net is None:
        return np.zeros_like(x)
    return net(t, x)


def log_weight(traj: Trajectory, v_net, u_net, pot: AnnealedPotential) -> np.ndarray:
    """
    Discretised log Radon-Nikodym derivative of each path, shape ``(n_paths,)``.

    Paths flagged as diverged get ``-inf``.

    Parameters
    ----------
    traj : Trajectory
        A two-stage trajectory with its Brownian increments.
    v_net, u_net : ControlNet or None
        The controls the trajectory was simulated with; ``None`` is the zero control.
    pot : AnnealedPotential
        Supplies ``d/dt U_t``.
    """
    if traj.increments is None:
        raise InputError("trajectory has no stored Brownian increments")
    times = traj.times
    log_w = np.zeros(traj.n_paths)
    for k in range(times.shape[0] - 1):
        t, dt = times[k], times[k + 1] - times[k]
        x, dw = traj.states[k], traj.increments[k]
        if k < traj.boundary:
            c = _control(v_net, t, x)
        else:
            c = _control(u_net, t, x)
            log_w -= pot.dt_energy(x) * dt
        log_w += -0.5 * np.sum(c**2, axis=1) * dt - np.sum(c * dw, axis=1)
    log_w[traj.diverged] = -np.inf
    return log_w


class WeightSet:
    """Self-normalised importance weights of a set of paths."""

    def __init__(self, log_weights: np.ndarray):
        """
        Parameters
        ----------
        log_weights : np.ndarray
            Unnormalised log-weights, one per path; ``-inf`` marks a zero weight.
        """
        log_weights = np.asarray(log_weights, dtype=np.float64).reshape(-1)
        if (
            log_weights.size == 0
            or np.any(np.isnan(log_weights))
            or np.all(np.isneginf(log_weights))
        ):
            raise BufferStateError("importance weights are degenerate (empty, NaN or all zero)")
        if np.any(np.isposinf(log_weights)):
            raise BufferStateError("importance weights contain +inf")
        self.log_weights = log_weights
        self.normalized = np.exp(log_weights - logsumexp(log_weights))

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "WeightSet":
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0):
            raise InputError("importance weights must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(np.log(weights))

    def __len__(self):
        return self.log_weights.size

    @property
    def ess(self) -> float:
        """Effective sample size ``1 / sum w^2``, in ``[1, N]``."""
        return float(1.0 / np.sum(self.normalized**2))

    @property
    def variance(self) -> float:
        """Variance of ``N * w``, which is 0 for uniform weights."""
        return float(np.var(len(self) * self.normalized))

    def __str__(self):
        return f"WeightSet of {len(self)} paths, ESS {self.ess:.1f}, variance {self.variance:.3g}"


def needs_resampling(weights: WeightSet, fraction: float = 0.5) -> bool:
    """True when the ESS has fallen below ``fraction * N``."""
    return weights.ess < fraction * len(weights)


def resample(
    samples: np.ndarray, weights: WeightSet, rng, method: str = "multinomial"
) -> np.ndarray:
    """
    Draw ``N`` samples with replacement according to the normalised weights.

    Parameters
    ----------
    samples : np.ndarray
        ``(N, d)`` samples, one per weight.
    weights : WeightSet or np.ndarray
        Their weights; a plain array is read as non-negative unnormalised weights.
    rng : np.random.Generator or int
    method : str
        ``"multinomial"`` (independent categorical draws) or ``"systematic"`` (a single
        uniform offset on an evenly spaced grid).

    Returns
    -------
    np.ndarray
        The resampled ``(N, d)`` array.
    """
    if not isinstance(weights, WeightSet):
        weights = WeightSet.from_weights(weights)
    samples = np.asarray(samples)
    n = samples.shape[0]
    if n != len(weights):
        raise InputError(f"{n} samples but {len(weights)} weights")
    if method not in RESAMPLING_METHODS:
        raise InputError(f"unknown resampling method {method!r}")
    rng = as_generator(rng)

    cdf = np.cumsum(weights.normalized)
    cdf[-1] = 1.0
    if method == "multinomial":
        u = rng.random(n)
    else:
        u = (rng.random() + np.arange(n)) / n
    index = np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)
    logger.debug("resampled %d samples (%s), ESS %.1f", n, method, weights.ess)
    return samples[index]
