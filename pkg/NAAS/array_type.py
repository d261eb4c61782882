"""
This module defines the array wrapper used for sample sets handed to the evaluation metrics.

Classes:
    SampleSet: An ``(n, d)`` float array that remembers where its rows came from (generated by
               a sampler or drawn from an exact reference sampler) and the seed behind them.

Usage:
    samples = SampleSet(x, provenance="generated", seed=7)
    samples.to_csv("samples/generated.csv")
"""

import numpy as np

from NAAS.exceptions import InputError

PROVENANCES = ("generated", "reference", "resampled")


class SampleSet(np.ndarray):
    """Matrix of ``n`` samples in ``R^d`` with provenance metadata."""

    def __new__(cls, samples, provenance: str = "generated", seed: int = None, dim: int = None):
        array = np.asarray(samples, dtype=np.float64)
        if array.ndim == 1 and array.size == 0 and dim is not None:
            array = array.reshape(0, dim)
        if array.ndim != 2:
            raise InputError(f"a sample set must be an (n, d) matrix, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise InputError("a sample set must have finite entries")
        if provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {provenance!r}")
        obj = array.view(cls)
        obj.provenance = provenance
        obj.seed = seed
        return obj

    def __array_finalize__(self, obj):
        if obj is None:
            return
        self.provenance = getattr(obj, "provenance", "generated")
        self.seed = getattr(obj, "seed", None)

    def __array_wrap__(self, out_arr, context=None, return_scalar=False):
        # arithmetic on samples gives plain arrays
        if return_scalar:
            return out_arr[()]
        return np.asarray(out_arr)

    @property
    def n(self) -> int:
        return self.shape[0]

    @property
    def dim(self) -> int:
        return self.shape[1]

    def to_csv(self, path) -> None:
        header = ",".join(f"x{i + 1}" for i in range(self.dim))
        np.savetxt(path, np.asarray(self), delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, provenance: str = "generated") -> "SampleSet":
        return cls(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2), provenance=provenance)
