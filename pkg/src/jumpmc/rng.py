"""Counter-based random streams, one triple per realization.

Every realization ``i`` owns three independent Philox streams (Wiener
increments, jump times, marks).  The stream key encodes the configured
seed, the realization index and the stream id, so path ``i`` draws the
same numbers no matter how realizations are batched or spread over
workers.  That property is what makes output byte-identical for any
worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

STREAM_WIENER = 0
STREAM_JUMP_TIMES = 1
STREAM_MARKS = 2

_STREAM_SHIFT = 60  # realization indices stay below 2**60


@dataclass(frozen=True)
class SeedConfig:
    """Seeds for the three per-realization stream families."""

    wiener: int = 7
    jump_times: int = 20
    marks: int = 101

    def __post_init__(self):
        for field in ("wiener", "jump_times", "marks"):
            value = getattr(self, field)
            if not 0 <= value < 2 ** 64:
                raise ParameterError(
                    f"seed '{field}' must be in [0, 2**64), got {value}"
                )


def stream(seed: int, realization: int, stream_id: int) -> np.random.Generator:
    """Generator for one (seed, realization, stream) triple."""
    if realization < 0 or realization >= 1 << _STREAM_SHIFT:
        raise ParameterError(f"realization index out of range: {realization}")
    key = np.array(
        [
            np.uint64(seed),
            np.uint64(realization) + (np.uint64(stream_id + 1) << np.uint64(_STREAM_SHIFT)),
        ],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def realization_streams(seeds: SeedConfig, realization: int):
    """(wiener, jump_times, marks) generators for one realization."""
    return (
        stream(seeds.wiener, realization, STREAM_WIENER),
        stream(seeds.jump_times, realization, STREAM_JUMP_TIMES),
        stream(seeds.marks, realization, STREAM_MARKS),
    )
