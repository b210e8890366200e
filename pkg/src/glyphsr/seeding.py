"""Stable seed derivation.

Seeds are mixed by hashing their parts, so derived streams are reproducible
across platforms and independent of worker scheduling.
"""

from __future__ import annotations

import hashlib


def mix_seed(*parts) -> int:
    """Hash any mix of ints/strings/None into a non-negative 63-bit seed."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)
