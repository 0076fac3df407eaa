"""Deterministic sub-seed derivation from one global seed."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, role: str) -> int:
    """Map (seed, role-tag) to an independent 64-bit sub-seed.

    Every component that needs its own random stream derives it through this
    function, so one global seed pins the whole run while keeping the streams
    of unrelated components (snippet draws, encoder weights, batch shuffling)
    decoupled from each other.
    """
    digest = hashlib.sha256(f"{seed}:{role}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
