"""
This module defines the containers for simulated paths of the two-stage dynamics and for the
lean adjoint solved backwards along them.

Paths are stored as batches: one ``Trajectory`` holds ``n_paths`` paths on a shared time grid,
so the states form an array of shape ``(n_steps + 1, n_paths, d)``. Indexing a trajectory with
an integer path index returns a single-path view.

Classes:
    Trajectory: Time grid over ``[-1, 1]``, states, Brownian increments and the index of
                ``t = 0``, plus a mask of paths flagged as divergent.
    AdjointPath: Time grid over ``[0, 1]`` and the adjoint states ``a(t_k; X)``.

Usage:
    ``dynamics.simulate`` returns a ``Trajectory``; ``dynamics.solve_lean_adjoint`` turns it
    into an ``AdjointPath``; ``buffer.BufferU.push_trajectory`` consumes both.
"""

import numpy as np

from NAAS.exceptions import InputError


class Trajectory:
    def __init__(
        self,
        times: np.ndarray,
        states: np.ndarray,
        increments: np.ndarray = None,
        boundary: int = 0,
        diverged: np.ndarray = None,
    ):
        """
        Initialise a batch of paths.

        Parameters
        ----------
        times : np.ndarray
            The time grid ``t_0 < ... < t_K``, shape ``(K + 1,)``.
        states : np.ndarray
            States at each grid time, shape ``(K + 1, n_paths, d)``.
        increments : np.ndarray, optional
            Brownian increments ``W(t_{k+1}) - W(t_k)``, shape ``(K, n_paths, d)``.
        boundary : int
            Grid index of ``t = 0``, the junction between the prior and annealed stages.
        diverged : np.ndarray, optional
            Boolean mask over paths whose state norm left the admissible range.
        """
        times = np.asarray(times, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 3 or states.shape[0] != times.shape[0]:
            raise InputError(
                f"states of shape {states.shape} do not match a grid of {times.shape[0]} times"
            )
        if increments is not None and increments.shape != (times.shape[0] - 1,) + states.shape[1:]:
            raise InputError(f"increments of shape {increments.shape} do not match the states")
        self.times = times
        self.states = states
        self.increments = increments
        self.boundary = int(boundary)
        if diverged is None:
            diverged = np.zeros(states.shape[1], dtype=bool)
        self.diverged = diverged

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def n_prior(self) -> int:
        return self.boundary

    @property
    def n_anneal(self) -> int:
        return self.times.shape[0] - 1 - self.boundary

    @property
    def prior_times(self) -> np.ndarray:
        return self.times[: self.boundary + 1]

    @property
    def anneal_times(self) -> np.ndarray:
        return self.times[self.boundary :]

    @property
    def anneal_states(self) -> np.ndarray:
        """States on ``[0, 1]``, shape ``(n_anneal + 1, n_paths, d)``."""
        return self.states[self.boundary :]

    @property
    def x0(self) -> np.ndarray:
        """States at ``t = 0``, shape ``(n_paths, d)``."""
        return self.states[self.boundary]

    @property
    def terminal(self) -> np.ndarray:
        """States at the last grid time, shape ``(n_paths, d)``."""
        return self.states[-1]

    @property
    def valid(self) -> np.ndarray:
        return ~self.diverged

    def __getitem__(self, item: int) -> "Trajectory":
        # negative indices count from the last path; out of range raises IndexError
        item = range(self.n_paths)[item]
        index = slice(item, item + 1)
        return Trajectory(
            self.times,
            self.states[:, index],
            None if self.increments is None else self.increments[:, index],
            self.boundary,
            self.diverged[index],
        )

    def __len__(self):
        return self.n_paths

    def to_csv(self, path) -> None:
        """Write one row per (path, step): ``path, step, t, x1, ..., xd``."""
        n_times = self.times.shape[0]
        path_index = np.repeat(np.arange(self.n_paths), n_times)
        step_index = np.tile(np.arange(n_times), self.n_paths)
        coordinates = self.states.transpose(1, 0, 2).reshape(-1, self.dim)
        table = np.column_stack([path_index, step_index, self.times[step_index], coordinates])
        header = ",".join(["path", "step", "t"] + [f"x{i + 1}" for i in range(self.dim)])
        formats = ["%d", "%d", "%.17g"] + ["%.17g"] * self.dim
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=formats)

    def __str__(self):
        return (
            f"Trajectory with {self.n_paths} paths, {self.n_prior}+{self.n_anneal} steps, "
            f"{int(self.diverged.sum())} diverged"
        )


class AdjointPath:
    def __init__(self, times: np.ndarray, adjoints: np.ndarray):
        """
        Initialise an adjoint path.

        Parameters
        ----------
        times : np.ndarray
            The annealed-stage grid over ``[0, 1]``, shape ``(K + 1,)``.
        adjoints : np.ndarray
            Adjoint states ``a(t_k; X)``, shape ``(K + 1, n_paths, d)``; the last slice is zero.
        """
        self.times = np.asarray(times, dtype=np.float64)
        self.adjoints = np.asarray(adjoints, dtype=np.float64)

    @property
    def a0(self) -> np.ndarray:
        """Adjoint at ``t = 0``, shape ``(n_paths, d)``."""
        return self.adjoints[0]

    @property
    def n_paths(self) -> int:
        return self.adjoints.shape[1]

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.adjoints, axis=-1)))

    def __str__(self):
        return f"AdjointPath with {self.n_paths} paths over {self.times.shape[0] - 1} steps"
