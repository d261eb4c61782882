"""
Potential functions for the sampler: the Gaussian prior, the synthetic benchmark targets and
the time-interpolated annealed potential that drives the reference dynamics.

Every model exposes ``energy`` (the negative log of the unnormalised density), its analytic
``grad`` and, where a closed form is cheap, an analytic Hessian-vector product ``hvp``.
Inputs may be a single vector of shape ``(d,)`` or a batch of shape ``(n, d)``; outputs keep
the input's batch shape.

Additive constants
------------------
The constant in each energy is fixed so that the minimum of the dominant mode is (close to)
zero:

- ``IsotropicGaussian``: ``|x|^2 / (2 sigma_bar^2)``, zero at the mean.
- ``GaussianMixture`` and ``StudentMixture``: ``-logsumexp_k(log w_k + log c_k(x)) + log max_k w_k``
  with the component kernels ``c_k`` normalised to 1 at their centre, so the energy at the
  centre of a well-separated heaviest mode is 0.
- ``ManyWell``: ``sum_{i<=m} (x_i^2 - delta)^2 + 1/2 sum_{i>m} x_i^2``, zero at every well.
- ``Funnel``: ``x_1^2 / (2 sigma^2) + 1/2 exp(-x_1) sum_{i>=2} x_i^2 + (d - 1) x_1 / 2``, zero at
  the origin.
"""

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

from NAAS.exceptions import InputError
from NAAS.streams import stream


def clip_norm(vectors: np.ndarray, bound: float = None) -> np.ndarray:
    """
    Rescale each row so that its Euclidean norm does not exceed ``bound``.

    Rows already inside the ball are returned unchanged; longer rows keep their direction.

    Parameters
    ----------
    vectors : np.ndarray
        A vector ``(d,)`` or a batch ``(n, d)``.
    bound : float, optional
        The maximum norm. ``None`` disables clipping.

    Returns
    -------
    np.ndarray
        The clipped vectors, same shape as the input.
    """
    if bound is None:
        return vectors
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norms, np.finfo(np.float64).tiny))
    return vectors * scale


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    array = np.asarray(x, dtype=np.float64)
    single = array.ndim == 1
    if single:
        array = array[None, :]
    if array.ndim != 2 or array.shape[1] != dim:
        raise InputError(f"expected vectors of dimension {dim}, got shape {np.shape(x)}")
    return array, single


def _unbatch(values: np.ndarray, single: bool):
    if not single:
        return values
    value = values[0]
    return float(value) if np.ndim(value) == 0 else value


class EnergyModel:
    """
    Base class for potentials ``U(x) = -log density(x) + const``.

    Subclasses implement ``_energy``, ``_grad`` and optionally ``_hvp`` and ``_sample`` on
    batches of shape ``(n, d)``; the public methods handle shapes and validation.
    """

    variant = "EnergyModel"

    def __init__(self, dim: int):
        """
        Parameters
        ----------
        dim : int
            The dimension ``d`` of the state space.
        """
        if int(dim) != dim or dim < 1:
            raise InputError(f"dimension must be a positive integer, got {dim!r}")
        self.dim = int(dim)

    def energy(self, x: np.ndarray):
        """Energy of ``x``; a float for a single vector, an ``(n,)`` array for a batch."""
        batch, single = _as_batch(x, self.dim)
        return _unbatch(self._energy(batch), single)

    def grad(self, x: np.ndarray, clip: float = None) -> np.ndarray:
        """
        Analytic gradient of the energy.

        Parameters
        ----------
        x : np.ndarray
            Points ``(d,)`` or ``(n, d)``.
        clip : float, optional
            If given, each gradient is rescaled so its norm is at most ``clip`` (E_max).
        """
        batch, single = _as_batch(x, self.dim)
        return _unbatch(clip_norm(self._grad(batch), clip), single)

    @property
    def has_analytic_hvp(self) -> bool:
        return type(self)._hvp is not EnergyModel._hvp

    def hvp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Analytic Hessian-vector product ``(grad^2 U)(x) v``."""
        batch, single = _as_batch(x, self.dim)
        directions = np.broadcast_to(np.asarray(v, dtype=np.float64), batch.shape)
        return _unbatch(self._hvp(batch, directions), single)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. draws from the normalised density, shape ``(n, d)``."""
        if n < 0:
            raise InputError(f"sample count must be non-negative, got {n}")
        return self._sample(int(n), rng)

    def params(self) -> dict:
        """Parameters identifying the model, for logs and audit files."""
        return {"variant": self.variant, "dim": self.dim}

    def _energy(self, x):
        raise NotImplementedError

    def _grad(self, x):
        raise NotImplementedError

    def _hvp(self, x, v):
        raise InputError(f"{self.variant} has no analytic Hessian-vector product")

    def _sample(self, n, rng):
        raise InputError(f"no exact sampler for variant {self.variant}")

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items() if k != "variant")
        return f"{self.__class__.__name__}({args})"


class IsotropicGaussian(EnergyModel):
    """``U(x) = |x|^2 / (2 sigma_bar^2)``, the prior ``U_0`` of the annealed path."""

    variant = "IsotropicGaussian"

    def __init__(self, dim: int, sigma_bar: float = 1.0):
        super().__init__(dim)
        if sigma_bar <= 0:
            raise InputError(f"sigma_bar must be positive, got {sigma_bar}")
        self.sigma_bar = float(sigma_bar)

    def _energy(self, x):
        return 0.5 * np.sum(x**2, axis=1) / self.sigma_bar**2

    def _grad(self, x):
        return x / self.sigma_bar**2

    def _hvp(self, x, v):
        return v / self.sigma_bar**2

    def _sample(self, n, rng):
        return self.sigma_bar * rng.standard_normal((n, self.dim))

    def params(self):
        return {**super().params(), "sigma_bar": self.sigma_bar}


class GaussianMixture(EnergyModel):
    """
    Mixture of isotropic Gaussians with a shared variance.

    ``density(x) = sum_k w_k N(x; mu_k, s^2 I)``. The GMM-grid, GMM40 and bimodal benchmarks are
    presets of this class.
    """

    variant = "GaussianMixture"

    def __init__(self, centers: np.ndarray, variance: float = 1.0, weights=None, variant=None):
        """
        Parameters
        ----------
        centers : np.ndarray
            Mode centres, shape ``(m, d)``.
        variance : float
            The shared component variance ``s^2``.
        weights : array-like, optional
            Mixture weights; normalised internally. Uniform if omitted.
        variant : str, optional
            Tag overriding the class-level variant name (used by the presets).
        """
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        super().__init__(centers.shape[1])
        if variance <= 0:
            raise InputError(f"component variance must be positive, got {variance}")
        if weights is None:
            weights = np.full(centers.shape[0], 1.0 / centers.shape[0])
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (centers.shape[0],) or np.any(weights <= 0):
            raise InputError("mixture weights must be positive, one per centre")
        self.centers = centers
        self.variance = float(variance)
        self.weights = weights / weights.sum()
        self.log_weights = np.log(self.weights)
        if variant is not None:
            self.variant = variant

    @classmethod
    def grid2d(cls, spacing: float = 5.0, variance: float = 0.3):
        """Nine equally weighted modes at ``spacing * (i - 2, j - 2)``, ``i, j in {1, 2, 3}``."""
        offsets = np.array([-1.0, 0.0, 1.0]) * spacing
        centers = np.array([(a, b) for a in offsets for b in offsets])
        return cls(centers, variance=variance, variant="GMMGrid2D")

    @classmethod
    def gmm40(cls, dim: int, seed: int, n_modes: int = 40, low: float = -40.0, high: float = 40.0):
        """
        Equally weighted unit-variance modes with centres uniform on ``[low, high]^d``.

        Centre ``k`` is drawn from its own stream keyed by ``(seed, k)``, so the mixture is
        reproducible from ``(seed, dim, n_modes)`` alone.
        """
        centers = np.stack(
            [stream(seed, "centers", k).uniform(low, high, size=dim) for k in range(n_modes)]
        )
        model = cls(centers, variance=1.0, variant="GMM40")
        model.seed = seed
        return model

    @classmethod
    def bimodal(cls, dim: int, separation: float = 1.0, weights=(2 / 3, 1 / 3), variance=1.0):
        """Two modes at ``-a 1_d`` and ``+a 1_d`` with unequal weights."""
        ones = np.ones(dim)
        centers = np.stack([-separation * ones, separation * ones])
        return cls(centers, variance=variance, weights=weights, variant="BimodalGMM")

    def _log_components(self, x):
        sq_dist = cdist(x, self.centers, "sqeuclidean")
        return self.log_weights[None, :] - 0.5 * sq_dist / self.variance

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Posterior component probabilities ``r_k(x)``, shape ``(n, m)``."""
        batch, single = _as_batch(x, self.dim)
        return _unbatch(softmax(self._log_components(batch), axis=1), single)

    def _energy(self, x):
        return -logsumexp(self._log_components(x), axis=1) + self.log_weights.max()

    def _grad(self, x):
        r = softmax(self._log_components(x), axis=1)
        return (x - r @ self.centers) / self.variance

    def _hvp(self, x, v):
        r = softmax(self._log_components(x), axis=1)
        mean = r @ self.centers
        projections = v @ self.centers.T
        second = (r * projections) @ self.centers - mean * np.sum(mean * v, axis=1, keepdims=True)
        return v / self.variance - second / self.variance**2

    def _sample(self, n, rng):
        components = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.centers[components] + np.sqrt(self.variance) * noise

    def export_centers(self, path) -> None:
        """Write the mode centres to CSV, one row per mode, for auditing a run."""
        header = ",".join(f"x{i + 1}" for i in range(self.dim))
        np.savetxt(path, self.centers, delimiter=",", header=header, comments="")

    def params(self):
        params = {
            **super().params(),
            "n_modes": len(self.weights),
            "variance": self.variance,
        }
        if hasattr(self, "seed"):
            params["seed"] = self.seed
        return params


def _sample_double_well(n: int, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from ``exp(-(x^2 - delta)^2)`` with a uniform envelope."""
    # beyond this radius the density is below exp(-50)
    half_width = np.sqrt(max(delta, 0.0) + np.sqrt(50.0))
    log_peak = 0.0 if delta >= 0 else -(delta**2)
    accepted = np.empty(0)
    while accepted.size < n:
        proposals = rng.uniform(-half_width, half_width, size=2 * (n - accepted.size) + 16)
        log_ratio = -((proposals**2 - delta) ** 2) - log_peak
        keep = np.log(rng.uniform(size=proposals.size)) < log_ratio
        accepted = np.concatenate([accepted, proposals[keep]])
    return accepted[:n]


class ManyWell(EnergyModel):
    """
    Separable many-well energy with ``2^m`` wells.

    ``U(x) = sum_{i<=m} (x_i^2 - delta)^2 + 1/2 sum_{i>m} x_i^2``.
    """

    variant = "ManyWell"

    def __init__(self, dim: int = 5, n_wells: int = 5, delta: float = 4.0):
        super().__init__(dim)
        if not 1 <= n_wells <= dim:
            raise InputError(f"well count must lie in [1, {dim}], got {n_wells}")
        self.n_wells = int(n_wells)
        self.delta = float(delta)

    def _energy(self, x):
        wells = x[:, : self.n_wells]
        rest = x[:, self.n_wells :]
        return np.sum((wells**2 - self.delta) ** 2, axis=1) + 0.5 * np.sum(rest**2, axis=1)

    def _grad(self, x):
        grad = x.copy()
        wells = x[:, : self.n_wells]
        grad[:, : self.n_wells] = 4.0 * wells * (wells**2 - self.delta)
        return grad

    def _hvp(self, x, v):
        curvature = np.ones_like(x)
        curvature[:, : self.n_wells] = 12.0 * x[:, : self.n_wells] ** 2 - 4.0 * self.delta
        return curvature * v

    def _sample(self, n, rng):
        samples = rng.standard_normal((n, self.dim))
        samples[:, : self.n_wells] = _sample_double_well(n * self.n_wells, self.delta, rng).reshape(
            n, self.n_wells
        )
        return samples

    @property
    def centers(self) -> np.ndarray:
        """The ``2^m`` well minima (``+-sqrt(delta)`` per well coordinate, zero elsewhere)."""
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * self.n_wells, indexing="ij"))
        corners = corners.reshape(self.n_wells, -1).T * np.sqrt(max(self.delta, 0.0))
        return np.hstack([corners, np.zeros((corners.shape[0], self.dim - self.n_wells))])

    def params(self):
        return {**super().params(), "n_wells": self.n_wells, "delta": self.delta}


class Funnel(EnergyModel):
    """
    Neal's funnel: ``x_1 ~ N(0, sigma^2)`` and ``x_{2:d} | x_1 ~ N(0, exp(x_1) I)``.
    """

    variant = "Funnel"

    def __init__(self, dim: int = 10, variance: float = 9.0):
        super().__init__(dim)
        if dim < 2:
            raise InputError("the funnel needs at least two dimensions")
        if variance <= 0:
            raise InputError(f"funnel variance must be positive, got {variance}")
        self.variance = float(variance)

    def _energy(self, x):
        first, rest = x[:, 0], x[:, 1:]
        return (
            0.5 * first**2 / self.variance
            + 0.5 * np.exp(-first) * np.sum(rest**2, axis=1)
            + 0.5 * (self.dim - 1) * first
        )

    def _grad(self, x):
        first, rest = x[:, :1], x[:, 1:]
        scale = np.exp(-first)
        grad_first = (
            first / self.variance
            - 0.5 * scale * np.sum(rest**2, axis=1, keepdims=True)
            + 0.5 * (self.dim - 1)
        )
        return np.hstack([grad_first, scale * rest])

    def _hvp(self, x, v):
        first, rest = x[:, :1], x[:, 1:]
        v_first, v_rest = v[:, :1], v[:, 1:]
        scale = np.exp(-first)
        h11 = 1.0 / self.variance + 0.5 * scale * np.sum(rest**2, axis=1, keepdims=True)
        out_first = h11 * v_first - scale * np.sum(rest * v_rest, axis=1, keepdims=True)
        out_rest = -scale * rest * v_first + scale * v_rest
        return np.hstack([out_first, out_rest])

    def _sample(self, n, rng):
        first = np.sqrt(self.variance) * rng.standard_normal((n, 1))
        rest = np.exp(0.5 * first) * rng.standard_normal((n, self.dim - 1))
        return np.hstack([first, rest])

    def params(self):
        return {**super().params(), "variance": self.variance}


class StudentMixture(EnergyModel):
    """
    Equally (or explicitly) weighted mixture of multivariate Student-t modes.

    Component ``k`` contributes ``-((nu + d) / 2) log(1 + |x - m_k|^2 / nu)`` to its log density.
    """

    variant = "StudentMixture"

    def __init__(self, centers: np.ndarray, dof: float = 2.0, weights=None):
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        super().__init__(centers.shape[1])
        if dof <= 0:
            raise InputError(f"degrees of freedom must be positive, got {dof}")
        if weights is None:
            weights = np.full(centers.shape[0], 1.0 / centers.shape[0])
        weights = np.asarray(weights, dtype=np.float64)
        self.centers = centers
        self.dof = float(dof)
        self.weights = weights / weights.sum()
        self.log_weights = np.log(self.weights)

    @classmethod
    def mos(cls, dim: int, seed: int, n_modes: int = 10, low=-10.0, high=10.0, dof=2.0):
        """Centres uniform on ``[low, high]^d``, drawn per mode from ``(seed, k)``."""
        centers = np.stack(
            [stream(seed, "centers", k).uniform(low, high, size=dim) for k in range(n_modes)]
        )
        model = cls(centers, dof=dof)
        model.seed = seed
        return model

    def _log_components(self, x):
        sq_dist = cdist(x, self.centers, "sqeuclidean")
        exponent = 0.5 * (self.dof + self.dim)
        return self.log_weights[None, :] - exponent * np.log1p(sq_dist / self.dof)

    def _energy(self, x):
        return -logsumexp(self._log_components(x), axis=1) + self.log_weights.max()

    def _grad(self, x):
        r = softmax(self._log_components(x), axis=1)
        sq_dist = cdist(x, self.centers, "sqeuclidean")
        coeff = r * (self.dof + self.dim) / (self.dof + sq_dist)
        return coeff.sum(axis=1, keepdims=True) * x - coeff @ self.centers

    def _sample(self, n, rng):
        components = rng.choice(len(self.weights), size=n, p=self.weights)
        gaussian = rng.standard_normal((n, self.dim))
        chi2 = rng.chisquare(self.dof, size=(n, 1))
        return self.centers[components] + gaussian / np.sqrt(chi2 / self.dof)

    def params(self):
        params = {**super().params(), "n_modes": len(self.weights), "dof": self.dof}
        if hasattr(self, "seed"):
            params["seed"] = self.seed
        return params


def build_energy(variant: str, dim: int = None, seed: int = 0, **params) -> EnergyModel:
    """
    Construct a target energy from its benchmark name.

    Parameters
    ----------
    variant : str
        One of ``gaussian``, ``gmm-grid``, ``gmm40``, ``bimodal``, ``many-well``, ``funnel``,
        ``mos``.
    dim : int, optional
        State dimension (ignored by ``gmm-grid``, which is two-dimensional).
    seed : int
        Seed for randomly placed centres.
    **params
        Variant parameters: ``sigma_bar``, ``n_modes``, ``center_range``, ``variance``,
        ``separation``, ``weight``, ``n_wells``, ``delta``, ``dof``.
    """
    if variant == "gaussian":
        return IsotropicGaussian(dim, params.get("sigma_bar", 1.0))
    if variant == "gmm-grid":
        return GaussianMixture.grid2d(variance=params.get("variance", 0.3))
    if variant == "gmm40":
        half = params.get("center_range", 40.0)
        return GaussianMixture.gmm40(dim, seed, params.get("n_modes", 40), -half, half)
    if variant == "bimodal":
        weight = params.get("weight", 2 / 3)
        return GaussianMixture.bimodal(
            dim, params.get("separation", 1.0), (weight, 1.0 - weight), params.get("variance", 1.0)
        )
    if variant == "many-well":
        return ManyWell(dim, params.get("n_wells", dim), params.get("delta", 4.0))
    if variant == "funnel":
        return Funnel(dim, params.get("variance", 9.0))
    if variant == "mos":
        half = params.get("center_range", 10.0)
        return StudentMixture.mos(
            dim, seed, params.get("n_modes", 10), -half, half, params.get("dof", 2.0)
        )
    raise InputError(f"unknown energy variant {variant!r}")


class AnnealedPotential:
    """
    Linear interpolation ``U_t = (1 - t) U_0 + t U_1`` between a prior and a target energy.

    The drift of the reference dynamics uses the E_max-clipped gradient; the adjoint solve uses
    the Hessian-vector product (analytic or finite-difference) clipped at A_max.
    """

    HVP_STRATEGIES = ("fd", "analytic")

    def __init__(
        self,
        prior: EnergyModel,
        target: EnergyModel,
        e_max: float = None,
        a_max: float = None,
        hvp_strategy: str = "fd",
        hvp_eps: float = 1e-5,
    ):
        """
        Parameters
        ----------
        prior : EnergyModel
            ``U_0``.
        target : EnergyModel
            ``U_1``.
        e_max : float, optional
            Norm bound for ``grad U_t`` in the drift.
        a_max : float, optional
            Norm bound for Hessian-vector products.
        hvp_strategy : str
            ``"fd"`` (symmetric differences of the gradient) or ``"analytic"``.
        hvp_eps : float
            Relative finite-difference step.
        """
        if prior.dim != target.dim:
            raise InputError(f"prior dimension {prior.dim} != target dimension {target.dim}")
        if hvp_strategy not in self.HVP_STRATEGIES:
            raise InputError(f"unknown HVP strategy {hvp_strategy!r}")
        if hvp_strategy == "analytic" and not (prior.has_analytic_hvp and target.has_analytic_hvp):
            raise InputError("analytic HVP requested but a model has no closed form")
        self.prior = prior
        self.target = target
        self.e_max = e_max
        self.a_max = a_max
        self.hvp_strategy = hvp_strategy
        self.hvp_eps = hvp_eps

    @property
    def dim(self) -> int:
        return self.target.dim

    @staticmethod
    def _time(t):
        t_array = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t_array)) or np.any(t_array < 0.0) or np.any(t_array > 1.0):
            raise InputError(f"annealing time must lie in [0, 1], got {t}")
        return t_array if t_array.ndim == 0 else t_array.reshape(-1, 1)

    def energy(self, t, x):
        tau = self._time(t)
        tau = tau if np.ndim(tau) == 0 else tau[:, 0]
        return (1.0 - tau) * self.prior.energy(x) + tau * self.target.energy(x)

    def raw_grad(self, t, x) -> np.ndarray:
        """Unclipped ``grad U_t(x)``."""
        tau = self._time(t)
        return (1.0 - tau) * self.prior.grad(x) + tau * self.target.grad(x)

    def grad(self, t, x) -> np.ndarray:
        """``grad U_t(x)`` clipped in norm at E_max."""
        return clip_norm(self.raw_grad(t, x), self.e_max)

    def dt_energy(self, x):
        """``d/dt U_t(x) = U_1(x) - U_0(x)``, independent of ``t``."""
        return self.target.energy(x) - self.prior.energy(x)

    def dt_grad(self, x) -> np.ndarray:
        """``d/dt grad U_t(x) = grad U_1(x) - grad U_0(x)``."""
        return self.target.grad(x) - self.prior.grad(x)

    def hvp(self, t, x, v) -> np.ndarray:
        """
        Hessian-vector product ``(grad^2 U_t)(x) v``, clipped in norm at A_max.

        The finite-difference strategy uses the step ``eps (1 + |x|) / max(|v|, 1e-12)`` per row
        on the unclipped gradient.
        """
        tau = self._time(t)
        x = np.asarray(x, dtype=np.float64)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        if self.hvp_strategy == "analytic":
            product = (1.0 - tau) * self.prior.hvp(x, v) + tau * self.target.hvp(x, v)
        else:
            x_norm = np.linalg.norm(x, axis=-1, keepdims=True)
            v_norm = np.linalg.norm(v, axis=-1, keepdims=True)
            step = self.hvp_eps * (1.0 + x_norm) / np.maximum(v_norm, 1e-12)
            forward = self.raw_grad(t, x + step * v)
            backward = self.raw_grad(t, x - step * v)
            product = (forward - backward) / (2.0 * step)
        return clip_norm(product, self.a_max)

    def annealed_eval(self, t, x) -> tuple:
        """
        Evaluate everything the dynamics and the adjoint need at ``(t, x)``.

        Returns
        -------
        tuple
            ``(U_t, grad U_t, d/dt U_t, d/dt grad U_t)``; the gradient is E_max-clipped.
        """
        return self.energy(t, x), self.grad(t, x), self.dt_energy(x), self.dt_grad(x)

    def __repr__(self):
        return (
            f"AnnealedPotential(prior={self.prior!r}, target={self.target!r}, "
            f"e_max={self.e_max}, a_max={self.a_max}, hvp={self.hvp_strategy})"
        )
