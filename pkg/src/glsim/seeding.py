"""Counter-mode seed derivation.

Scheme ``glsim-seed-v1``: the 64-bit seed for ``(master, index, tag)`` is the
little-endian integer read from an 8-byte BLAKE2b digest of::

    b"glsim-seed-v1" | master (u64 LE) | index (u64 LE) | utf-8(tag)

with personalization ``b"glsim"``.  The layout is frozen; changing it
requires a new scheme id.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

SCHEME_ID = "glsim-seed-v1"
_MASK64 = (1 << 64) - 1


def derive_seed(master: int, index: int, tag: str = "") -> int:
    payload = (SCHEME_ID.encode()
               + struct.pack("<QQ", int(master) & _MASK64, int(index) & _MASK64)
               + tag.encode("utf-8"))
    digest = hashlib.blake2b(payload, digest_size=8, person=b"glsim").digest()
    return int.from_bytes(digest, "little")


def derive_seeds(master: int, count: int, tag: str = "", start: int = 0) -> list:
    return [derive_seed(master, start + i, tag) for i in range(count)]


def generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & _MASK64)
