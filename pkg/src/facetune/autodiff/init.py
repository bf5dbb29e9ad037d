"""Weight initialisation and seeded random streams."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import get_default_dtype


def rng_for(seed: int, consumer: str, counter: int = 0) -> np.random.Generator:
    """Independent generator for one consumer (``"init"``, ``"batch"``, ...) of a run seed.

    Streams are keyed by a CRC of the consumer name, so each component can be
    reproduced without replaying the others.
    """
    ss = np.random.SeedSequence([int(seed), zlib.crc32(consumer.encode()), int(counter)])
    return np.random.default_rng(ss)


def kaiming_normal(shape, fan_in: int, rng=None, seed: int | None = None, dtype=None) -> np.ndarray:
    """Samples from N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(tuple(shape)) * std).astype(dtype or get_default_dtype())


def kaiming_init(shape, fan_in: int, seed: int):
    """Kaiming-normal :class:`Tensor`, deterministic in ``seed``."""
    from .tensor import Tensor

    return Tensor(kaiming_normal(shape, fan_in, seed=seed))
