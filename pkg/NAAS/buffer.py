"""
Replay buffers holding the regression targets of the two controls.

Classes:
    Batch: A value snapshot of sampled buffer entries.
    BufferU: Triples ``(t, X_t, a_t)`` from the annealed stage, consumed by the u-phase.
    BufferV: Pairs ``(X_0, a_0)``, consumed by the v-phase.

Both buffers are preallocated rings with a fixed capacity; once full, each insertion evicts the
oldest entry. Entries are addressed in insertion order (oldest first), so sampling depends only
on the buffer contents and the generator, never on where the ring currently wraps.

Usage:
    buf = BufferU(capacity=10000, dim=2)
    buf.push_trajectory(traj, adj)
    batch = buf.sample_batch(512, rng)
"""

import logging
import threading
from dataclasses import dataclass

import numpy as np

from NAAS.exceptions import BufferStateError, InputError
from NAAS.path import AdjointPath, Trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    t: np.ndarray
    x: np.ndarray
    a: np.ndarray

    def __len__(self):
        return self.x.shape[0]


class _RingBuffer:
    def __init__(self, capacity: int, dim: int):
        """
        Parameters
        ----------
        capacity : int
            Maximum number of entries.
        dim : int
            State dimension.
        """
        if capacity < 1:
            raise InputError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.t = np.zeros(self.capacity)
        self.x = np.zeros((self.capacity, self.dim))
        self.a = np.zeros((self.capacity, self.dim))
        self.offset = 0
        self.size = 0
        self.inserted = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self.size

    def reset(self):
        with self._lock:
            self.offset = 0
            self.size = 0

    def _append(self, t: np.ndarray, x: np.ndarray, a: np.ndarray) -> int:
        n = x.shape[0]
        if n == 0:
            return 0
        if x.shape[1:] != (self.dim,) or a.shape != x.shape or t.shape != (n,):
            raise InputError(
                f"entries of shape {x.shape} do not fit a buffer of dimension {self.dim}"
            )
        with self._lock:
            # only the newest `capacity` entries can survive
            keep = min(n, self.capacity)
            t, x, a = t[n - keep :], x[n - keep :], a[n - keep :]
            slots = (self.offset + np.arange(keep)) % self.capacity
            self.t[slots] = t
            self.x[slots] = x
            self.a[slots] = a
            self.offset = (self.offset + keep) % self.capacity
            self.size = min(self.size + keep, self.capacity)
            self.inserted += n
        return n

    def _slots(self, logical: np.ndarray) -> np.ndarray:
        oldest = (self.offset - self.size) % self.capacity
        return (oldest + logical) % self.capacity

    def entries(self) -> Batch:
        """All entries, oldest first, as a copy."""
        with self._lock:
            slots = self._slots(np.arange(self.size))
            return Batch(self.t[slots], self.x[slots], self.a[slots])

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """
        Draw ``batch_size`` entries uniformly with replacement.

        Raises
        ------
        BufferStateError
            If the buffer is empty.
        """
        with self._lock:
            if self.size == 0:
                raise BufferStateError(f"cannot sample from an empty {type(self).__name__}")
            slots = self._slots(rng.integers(0, self.size, size=batch_size))
            return Batch(self.t[slots], self.x[slots], self.a[slots])


class BufferU(_RingBuffer):
    """FIFO store of annealed-stage triples ``(t, X_t, a_t)``."""

    def push(self, t: np.ndarray, x: np.ndarray, a: np.ndarray) -> int:
        return self._append(
            np.asarray(t, dtype=np.float64).reshape(-1),
            np.atleast_2d(np.asarray(x, dtype=np.float64)),
            np.atleast_2d(np.asarray(a, dtype=np.float64)),
        )

    def push_trajectory(self, traj: Trajectory, adj: AdjointPath, stride: int = 1) -> int:
        """
        Insert every ``stride``-th annealed-stage triple of each path of ``traj``.

        Paths flagged as diverged contribute nothing. Entries are inserted path by path, and in
        time order within a path.

        Returns
        -------
        int
            The number of entries inserted.
        """
        if stride < 1:
            raise InputError(f"subsample stride must be positive, got {stride}")
        times = traj.anneal_times
        if adj.times.shape != times.shape or not np.array_equal(adj.times, times):
            raise InputError("trajectory and adjoint path do not share a time grid")
        if adj.n_paths != traj.n_paths:
            raise InputError(f"adjoint path has {adj.n_paths} paths, trajectory {traj.n_paths}")

        steps = np.arange(0, times.shape[0], stride)
        paths = np.flatnonzero(traj.valid)
        if paths.size < traj.n_paths:
            logger.warning("skipping %d diverged paths", traj.n_paths - paths.size)
        # (steps, paths, d) -> (paths, steps, d), path-major
        x = traj.anneal_states[steps][:, paths].transpose(1, 0, 2).reshape(-1, self.dim)
        a = adj.adjoints[steps][:, paths].transpose(1, 0, 2).reshape(-1, self.dim)
        t = np.tile(times[steps], paths.size)
        count = self._append(t, x, a)
        logger.debug("BufferU received %d entries, holds %d", count, self.size)
        return count


class BufferV(_RingBuffer):
    """FIFO store of end-point pairs ``(X_0, a_0)``; the stored time is always 0."""

    def push(self, x0: np.ndarray, a0: np.ndarray) -> int:
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        a0 = np.atleast_2d(np.asarray(a0, dtype=np.float64))
        return self._append(np.zeros(x0.shape[0]), x0, a0)

    def push_endpoints(self, traj: Trajectory, adj: AdjointPath) -> int:
        """Insert ``(X_0, a_0)`` of every non-diverged path."""
        if adj.n_paths != traj.n_paths:
            raise InputError(f"adjoint path has {adj.n_paths} paths, trajectory {traj.n_paths}")
        valid = traj.valid
        count = self.push(traj.x0[valid], adj.a0[valid])
        logger.debug("BufferV received %d entries, holds %d", count, self.size)
        return count
