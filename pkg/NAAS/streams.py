"""
Named, counter-based random streams.

All randomness in a run flows from one integer seed. A stream is identified by a name
(``"paths"``, ``"batches"``, ...) and any number of integer keys, and is backed by the Philox
counter-based bit generator, so the numbers drawn depend only on ``(seed, name, keys)``,
never on the order in which streams are created or on how work is split across workers.
"""

import zlib

import numpy as np

STREAM_NAMES = (
    "centers",
    "init",
    "paths",
    "batches",
    "bridge",
    "eval",
    "reference",
    "resample",
)


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Create the generator for a named stream.

    Parameters
    ----------
    seed : int
        The run seed.
    name : str
        Stream name; any string is accepted, the common ones are listed in ``STREAM_NAMES``.
    *keys : int
        Non-negative integers further splitting the stream (stage, epoch, path index, ...).

    Returns
    -------
    np.random.Generator
        A Philox-backed generator.
    """
    sequence = np.random.SeedSequence(
        int(seed), spawn_key=(_name_key(name),) + tuple(int(k) for k in keys)
    )
    return np.random.Generator(np.random.Philox(sequence))


def path_stream(seed: int, key: tuple, path_index: int) -> np.random.Generator:
    """Generator owned by a single simulated path."""
    return stream(seed, "paths", *key, path_index)


def as_generator(rng) -> np.random.Generator:
    """Accept a generator or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng), "default")
