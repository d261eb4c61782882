"""
Sample-quality metrics and exact reference samplers.

- ``sinkhorn``: entropic optimal-transport cost ``<P, C>`` between two empirical measures with
  uniform weights and the squared Euclidean cost, solved by log-domain Sinkhorn iterations.
- ``mmd``: unbiased maximum mean discrepancy with an RBF kernel.
- ``mode_weights``: empirical share of samples nearest to each mode centre.
- ``reference_samples``: exact i.i.d. draws from a benchmark target.

Reductions over sample pairs sum sorted values, so permuting the rows of an input does not
change the result in any bit.
"""

import logging
import warnings

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from NAAS.array_type import SampleSet
from NAAS.energy import EnergyModel
from NAAS.exceptions import InputError, SinkhornConvergenceWarning
from NAAS.streams import as_generator

logger = logging.getLogger(__name__)


def _as_samples(X, name: str) -> np.ndarray:
    array = np.asarray(X, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2 or array.shape[0] == 0:
        raise InputError(f"{name} must be a non-empty (n, d) matrix, got shape {array.shape}")
    return array


def _check_pair(X, Y) -> tuple[np.ndarray, np.ndarray]:
    X, Y = _as_samples(X, "X"), _as_samples(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise InputError(f"sample dimensions differ: {X.shape[1]} and {Y.shape[1]}")
    return X, Y


def _stable_sum(values: np.ndarray) -> float:
    return float(np.sort(values, axis=None).sum())


def sinkhorn_plan(
    X,
    Y,
    epsilon: float = 1e-3,
    max_iters: int = 10000,
    tol: float = 1e-6,
    scaling: bool = True,
    scaling_decay: float = 0.5,
) -> tuple[np.ndarray, dict]:
    """
    Entropic transport plan between the empirical measures on ``X`` and ``Y``.

    Iterates on the dual potentials ``(f, g)`` in the log domain. With ``scaling`` the
    regularisation starts at the largest cost and is divided by ``1 / scaling_decay`` per
    level until it reaches ``epsilon``, each level warm-starting the next; only the final
    level is run to the tolerance.

    Parameters
    ----------
    X, Y : array_like
        Samples ``(n, d)`` and ``(m, d)``.
    epsilon : float
        Entropic regularisation.
    max_iters : int
        Iteration cap at the final level.
    tol : float
        Tolerance on the L1 violation of the row marginal.
    scaling : bool
        Use epsilon scaling.
    scaling_decay : float
        Factor in ``(0, 1)`` between successive regularisation levels.

    Returns
    -------
    tuple
        The ``(n, m)`` plan and a log with ``err``, ``n_iter`` and ``converged``.
    """
    X, Y = _check_pair(X, Y)
    if epsilon <= 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    cost = cdist(X, Y, "sqeuclidean")
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f, g = np.zeros(n), np.zeros(m)

    levels = [epsilon]
    if scaling and cost.max() > epsilon:
        level = float(cost.max())
        levels = []
        while level > epsilon:
            levels.append(level)
            level *= scaling_decay
        levels.append(epsilon)

    def update(eps, f, g):
        g = -eps * logsumexp((f[:, None] - cost) / eps + log_a[:, None], axis=0)
        f = -eps * logsumexp((g[None, :] - cost) / eps + log_b[None, :], axis=1)
        return f, g

    def log_plan(eps, f, g):
        return (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]

    for eps in levels[:-1]:
        for _ in range(10):
            f, g = update(eps, f, g)

    err, n_iter, converged = np.inf, 0, False
    for n_iter in range(1, max_iters + 1):
        f, g = update(epsilon, f, g)
        if n_iter % 10 == 0 or n_iter == max_iters:
            # the column marginal is exact after the g update; f then fixes the rows
            plan = np.exp(log_plan(epsilon, f, g))
            err = float(np.abs(plan.sum(axis=0) - np.exp(log_b)).sum())
            if err <= tol:
                converged = True
                break
    plan = np.exp(log_plan(epsilon, f, g))
    if not converged:
        err = float(np.abs(plan.sum(axis=0) - np.exp(log_b)).sum())
        warnings.warn(
            f"Sinkhorn did not converge in {max_iters} iterations, marginal error {err:.3g}",
            SinkhornConvergenceWarning,
            stacklevel=3,
        )
    logger.debug("Sinkhorn: %d iterations over %d levels, error %.3g", n_iter, len(levels), err)
    return plan, {"err": err, "n_iter": n_iter, "converged": converged, "cost": cost}


def sinkhorn(
    X, Y, epsilon: float = 1e-3, max_iters: int = 10000, tol: float = 1e-6, scaling: bool = True
) -> float:
    """
    Entropic optimal-transport cost ``<P, C>`` with squared Euclidean ``C``.

    The pair is put in a canonical order before solving, so ``sinkhorn(X, Y)`` and
    ``sinkhorn(Y, X)`` agree exactly. A :class:`SinkhornConvergenceWarning` is issued when the
    tolerance is not reached; the value is still returned.
    """
    X, Y = _check_pair(X, Y)
    if (Y.shape, Y.tobytes()) < (X.shape, X.tobytes()):
        X, Y = Y, X
    plan, log = sinkhorn_plan(X, Y, epsilon, max_iters, tol, scaling)
    return max(_stable_sum(plan * log["cost"]), 0.0)


def median_bandwidth(X, Y) -> float:
    """Median of all pairwise Euclidean distances in the pooled sample; 1 if that is 0."""
    pooled = np.vstack([X, Y])
    if pooled.shape[0] < 2:
        return 1.0
    median = float(np.median(pdist(pooled)))
    return median if median > 0 else 1.0


def mmd(X, Y, bandwidth="median") -> float:
    """
    Maximum mean discrepancy with the kernel ``exp(-|x - y|^2 / (2 h^2))``.

    The unbiased estimate of MMD^2 is clamped at 0 before taking the square root.

    Parameters
    ----------
    X, Y : array_like
        Samples ``(n, d)`` and ``(m, d)``.
    bandwidth : str or float
        ``"median"`` for the median heuristic, or a fixed ``h``.
    """
    X, Y = _check_pair(X, Y)
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise InputError(f"unknown bandwidth policy {bandwidth!r}")
        h = median_bandwidth(X, Y)
    else:
        h = float(bandwidth)
        if h <= 0:
            raise InputError(f"bandwidth must be positive, got {h}")
    n, m = X.shape[0], Y.shape[0]

    def kernel_sum(A, B, same):
        k = np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * h**2))
        if same:
            np.fill_diagonal(k, 0.0)
        return _stable_sum(k)

    within_x = kernel_sum(X, X, True) / (n * (n - 1)) if n > 1 else 0.0
    within_y = kernel_sum(Y, Y, True) / (m * (m - 1)) if m > 1 else 0.0
    across = kernel_sum(X, Y, False) / (n * m)
    return float(np.sqrt(max(within_x + within_y - 2.0 * across, 0.0)))


def mode_weights(X, centers) -> np.ndarray:
    """
    Fraction of samples whose nearest centre is each of ``centers``.

    Ties go to the centre with the lowest index.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] == 0:
        raise InputError("at least one centre is required")
    X = np.asarray(X, dtype=np.float64).reshape(-1, centers.shape[1])
    if X.shape[0] == 0:
        return np.zeros(centers.shape[0])
    nearest = np.argmin(cdist(X, centers, "sqeuclidean"), axis=1)
    return np.bincount(nearest, minlength=centers.shape[0]) / X.shape[0]


def reference_samples(model: EnergyModel, n: int, rng) -> SampleSet:
    """
    Exact i.i.d. samples from a benchmark target.

    Raises
    ------
    InputError
        If the model has no exact sampler.
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    samples = model.sample(n, as_generator(rng))
    return SampleSet(samples.reshape(-1, model.dim), provenance="reference", seed=seed)
