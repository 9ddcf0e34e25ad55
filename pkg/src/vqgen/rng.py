"""Deterministic random number streams.

All randomness in the package flows through named child generators spawned
from a single integer seed. Each consumer (init, shuffling, dropout, synth
data) gets its own stream, so adding a new consumer never perturbs the
others and every run with the same seed is bit-identical.
"""

from __future__ import annotations

import numpy as np

# Fixed role tags. Streams are keyed by (seed, tag) so that consumers are
# independent of call order.
ROLE_INIT = 0
ROLE_SHUFFLE = 1
ROLE_DROPOUT = 2
ROLE_SYNTH = 3
ROLE_MISC = 4


def generator(seed: int, role: int, *extra: int) -> np.random.Generator:
    """Return a PCG64 generator for (seed, role, *extra).

    `extra` lets callers derive per-epoch or per-step streams, e.g.
    generator(seed, ROLE_SHUFFLE, epoch) yields the epoch's permutation
    stream without any shared mutable state.
    """
    ss = np.random.SeedSequence([int(seed), int(role), *[int(e) for e in extra]])
    return np.random.Generator(np.random.PCG64(ss))


def permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Stateless shuffle order for one epoch; same (seed, epoch, n) -> same order."""
    return generator(seed, ROLE_SHUFFLE, epoch).permutation(n)
