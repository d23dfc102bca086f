"""Deterministic fan-out from one master seed to per-purpose sub-seeds."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *scope) -> int:
    """Stable 63-bit sub-seed for a (master, scope...) path.

    Scope elements are stringified, so any mix of names and indices works:
    ``derive_seed(7, "bench", "jpeg", 3)``.
    """
    text = ":".join([str(int(master))] + [str(s) for s in scope])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF
