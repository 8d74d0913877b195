"""Seed plumbing.

Every random draw in the package comes from a Philox generator keyed by a
root seed plus a path of integers/strings, so independent streams (per cloud,
per epoch, per layer) never depend on call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path entries must be non-negative, got {part}")
        return int(part)
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for ``seed`` split along ``path``."""
    entropy = [_tag(seed), *(_tag(p) for p in path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path: int | str) -> int:
    """A 63-bit child seed, for handing to code that wants a plain integer."""
    ss = np.random.SeedSequence([_tag(seed), *(_tag(p) for p in path)])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
