import numpy as np

from NAAS.exceptions import InputError


class NoiseSchedule:
    """
    Diffusion coefficients of the two-stage dynamics.

    The prior stage on ``[-1, 0]`` always diffuses with the constant ``sigma_bar``. The annealed
    stage on ``[0, 1]`` uses either the geometric schedule

        sigma_t = sigma_min^t * sigma_max^(1 - t) * sqrt(2 log(sigma_max / sigma_min))

    or, for the ``constant`` kind, ``sigma_bar`` again.
    """

    KINDS = ("geometric", "constant")

    def __init__(
        self,
        kind: str = "geometric",
        sigma_min: float = 0.01,
        sigma_max: float = 1.0,
        sigma_bar: float = 1.0,
    ):
        """
        Parameters
        ----------
        kind : str
            ``"geometric"`` or ``"constant"``.
        sigma_min, sigma_max : float
            Geometric schedule end points; ``0 < sigma_min < sigma_max``.
        sigma_bar : float
            Prior-stage diffusion coefficient (also the constant-kind value).
        """
        if kind not in self.KINDS:
            raise InputError(f"unknown schedule kind {kind!r}")
        if sigma_bar <= 0:
            raise InputError(f"sigma_bar must be positive, got {sigma_bar}")
        if kind == "geometric" and not 0 < sigma_min < sigma_max:
            raise InputError(
                f"geometric schedule needs 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )
        self.kind = kind
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.sigma_bar = float(sigma_bar)

    @classmethod
    def geometric(cls, sigma_min: float, sigma_max: float, sigma_bar: float = 1.0):
        return cls("geometric", sigma_min, sigma_max, sigma_bar)

    @classmethod
    def constant(cls, sigma_bar: float = 1.0):
        return cls("constant", sigma_bar=sigma_bar)

    def sigma(self, t):
        """
        Diffusion coefficient of the annealed stage at ``t in [0, 1]``.

        Accepts a scalar or an array of times and returns the same shape.
        """
        t_array = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t_array)) or np.any(t_array < 0.0) or np.any(t_array > 1.0):
            raise InputError(f"schedule time must lie in [0, 1], got {t}")
        if self.kind == "constant":
            values = np.full_like(t_array, self.sigma_bar)
        else:
            log_ratio = np.log(self.sigma_max / self.sigma_min)
            values = (
                self.sigma_min**t_array
                * self.sigma_max ** (1.0 - t_array)
                * np.sqrt(2.0 * log_ratio)
            )
        return float(values) if values.ndim == 0 else values

    def beta(self, t):
        """``sigma_t^2 / sigma_bar^2``, the rate of the equivalent variance-preserving process."""
        return np.asarray(self.sigma(t)) ** 2 / self.sigma_bar**2

    def __repr__(self):
        if self.kind == "constant":
            return f"NoiseSchedule.constant(sigma_bar={self.sigma_bar})"
        return (
            f"NoiseSchedule.geometric(sigma_min={self.sigma_min}, sigma_max={self.sigma_max}, "
            f"sigma_bar={self.sigma_bar})"
        )
