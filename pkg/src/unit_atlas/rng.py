"""Named, counter-based random streams.

Each stream is a Philox generator keyed by a hash of ``(seed, *names)``, so a
stream's values never depend on how many other streams were drawn first.
"""
import hashlib

import numpy as np


def stream_key(seed, *names) -> int:
    text = "/".join([str(int(seed))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "little")


def stream(seed, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
