"""Small shared helpers."""

from __future__ import annotations

import hashlib


def stable_seed(*parts):
    """Deterministic 63-bit seed from arbitrary printable parts."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1
