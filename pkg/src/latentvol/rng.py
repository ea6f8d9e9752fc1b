"""Namespaced random-number streams.

Every stochastic component draws from its own generator derived from
(seed, purpose), so e.g. sampling never perturbs the training stream and
adding a new consumer never shifts existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def rng_stream(seed: int, purpose: str) -> np.random.Generator:
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's bit-generator state."""
    return _to_plain(gen.bit_generator.state)


def restore_generator(state: dict) -> np.random.Generator:
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_to_plain(v) for v in obj.tolist()]
    return obj
