"""Counter-based random substreams.

Every random draw in the package comes from a :class:`RngStream`, which wraps
a Philox4x64 generator keyed by ``(master_seed, stream_id)``. Philox is a
counter-based generator: two keys give independent streams and a stream's
output depends only on its key, so work can be split across threads in any
order without changing results.

Normal deviates are produced by NumPy's ziggurat sampler
(:meth:`numpy.random.Generator.standard_normal`). Results are bit-stable for
a fixed NumPy release; NumPy does not promise stream stability across major
versions, so the installed version is recorded in every provenance block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1

# Feature generation uses the bare attempt counter as stream id (< 2**56).
# Everything else is tagged in the top byte so the two ranges never overlap.
MAX_ATTEMPT_STREAM = 1 << 56
NS_SUBSET = 0x10
NS_IMPOSTOR = 0x11
NS_EXPERIMENT = 0x20


def substream_id(namespace: int, *counters: int) -> int:
    """Pack a namespace tag and up to three small counters into a 64-bit id.

    Layout: 8-bit namespace | 24 | 16 | 16 bits. Counters are checked for
    overflow, since silent wrap-around would alias two streams.
    """
    widths = (24, 16, 16)
    if len(counters) > len(widths):
        raise ValueError("at most three counters")
    if not 0x10 <= namespace < 256:
        raise ValueError("namespace must be in [0x10, 0xff]")
    out = namespace
    for width, value in zip(widths, counters + (0,) * (3 - len(counters))):
        if not 0 <= value < (1 << width):
            raise ValueError(f"counter {value} does not fit in {width} bits")
        out = (out << width) | value
    return out


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(master_seed, stream_id)``."""

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= int(value) <= _U64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value!r}")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = (int(self.stream_id) << 64) | int(self.master_seed)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.master_seed, stream_id)


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngStream` or an existing generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")
