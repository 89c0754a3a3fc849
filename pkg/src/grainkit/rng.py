"""Keyed counter-based random number generation.

Every random draw in the toolkit flows through a Philox generator keyed by
(seed, *context parts).  Philox is counter-based, so two generators built
from the same key produce the same stream regardless of how many other
draws happened elsewhere: results never depend on call order or worker
count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _canonical_part(part: object) -> bytes:
    if isinstance(part, bytes):
        return b"b" + part
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    if isinstance(part, bool):
        return b"?" + (b"1" if part else b"0")
    if isinstance(part, int):
        return b"i" + str(part).encode("ascii")
    if isinstance(part, float):
        return b"f" + repr(part).encode("ascii")
    raise TypeError(f"unsupported rng key part: {type(part)!r}")


def key_digest(seed: int, *parts: object) -> bytes:
    h = hashlib.sha256()
    h.update(_canonical_part(int(seed)))
    for part in parts:
        piece = _canonical_part(part)
        h.update(len(piece).to_bytes(4, "little"))
        h.update(piece)
    return h.digest()


def keyed_rng(seed: int, *parts: object) -> np.random.Generator:
    """Generator keyed by (seed, *parts); identical keys give identical streams."""
    key = int.from_bytes(key_digest(seed, *parts)[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
