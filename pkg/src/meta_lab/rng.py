"""Counter-based random streams keyed by (seed, role, index).

Each draw site in the simulator asks for its own stream, so results do not
depend on the order in which tasks, runs or workers are scheduled.  A
stream is a Philox generator whose 128-bit key is derived from
``(seed, role)`` and whose counter starts at the task index, placed in a
counter word that the generator's own increments never reach in practice.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

ROLES = ("init_B", "init_J", "u", "delta_B", "train", "val", "noise", "test", "drift")
_ROLE_ID = {name: i for i, name in enumerate(ROLES)}


@lru_cache(maxsize=256)
def _key(seed: int, role: str) -> tuple[int, int]:
    if role not in _ROLE_ID:
        raise ValueError(f"unknown stream role {role!r}; expected one of {ROLES}")
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    words = np.random.SeedSequence(entropy=seed, spawn_key=(_ROLE_ID[role],)).generate_state(2, np.uint64)
    return int(words[0]), int(words[1])


def stream(seed: int, role: str, index: int = 0) -> np.random.Generator:
    """Generator for draw site ``role`` of task ``index`` under ``seed``."""
    if index < 0:
        raise ValueError(f"stream index must be nonnegative, got {index}")
    key = np.array(_key(int(seed), role), dtype=np.uint64)
    counter = np.array([0, 0, int(index), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
