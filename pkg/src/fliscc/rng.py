"""Counter-based random streams keyed by (seed, purpose, device, round).

Every stochastic step draws from its own Philox stream, so results do not
depend on the order in which devices are processed.
"""

from __future__ import annotations

import numpy as np

# purpose tags; never renumber, stored streams depend on them
PARTITION = 0
DATA = 1
MINIBATCH = 2
CHANNEL = 3
NOISE = 4
INIT = 5
PROBE = 6

SERVER = 2**31 - 1


def stream(seed: int, purpose: int, device: int = SERVER, round_: int = 0) -> np.random.Generator:
    """Return an independent generator for one (purpose, device, round) cell."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(device), int(round_)))
    return np.random.Generator(np.random.Philox(ss))
