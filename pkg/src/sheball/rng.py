"""Counter-based random streams keyed by ``(seed, stream_id)``.

Every draw in the package goes through an :class:`RngStream`. There is no
module level generator, so results never depend on call order across
replicas.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream.

    Parameters
    ----------
    seed : int
        Master seed (64-bit).
    stream_id : int
        Replica index. Distinct ids give independent Philox streams.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed), int(self.stream_id)])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        """Derive a sub-stream; the result is a pure function of the keys."""
        ss = np.random.SeedSequence([int(self.seed), int(self.stream_id), *map(int, keys)])
        sid = int(ss.generate_state(2, np.uint64)[0])
        return RngStream(self.seed, sid)

    def spawn(self, k: int) -> list["RngStream"]:
        return [self.child(i) for i in range(k)]
