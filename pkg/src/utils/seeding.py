import hashlib
import struct
from typing import Union

import numpy as np

SeedPart = Union[int, float, str]

_MASK64 = 0xFFFFFFFFFFFFFFFF


def mix_seed(*parts: SeedPart) -> int:
    """
    Derive a stable 64-bit seed from an ordered tuple of parts.

    The parts are packed into a canonical byte string and hashed with SHA-256;
    the first eight bytes of the digest form the seed. The result does not
    depend on process, platform or scheduling order.

    Args:
        *parts: integers, floats or strings identifying a seed stream

    Returns:
        int: unsigned 64-bit seed
    """
    hasher = hashlib.sha256()
    for part in parts:
        if isinstance(part, int):
            hasher.update(b"i" + struct.pack("<Q", int(part) & _MASK64))
        elif isinstance(part, float):
            hasher.update(b"f" + struct.pack("<d", part))
        else:
            encoded = str(part).encode("utf-8")
            hasher.update(b"s" + struct.pack("<I", len(encoded)) + encoded)
    return struct.unpack("<Q", hasher.digest()[:8])[0]


def make_rng(seed: int, *stream: SeedPart) -> np.random.Generator:
    """Counter-based generator (Philox) for a seed and an optional named sub-stream."""
    key = mix_seed(seed, *stream) if stream else int(seed) & _MASK64
    return np.random.Generator(np.random.Philox(key))


def fingerprint(*buffers: bytes) -> str:
    """SHA-256 hex digest over a sequence of byte buffers."""
    hasher = hashlib.sha256()
    for buffer in buffers:
        hasher.update(buffer)
    return hasher.hexdigest()
