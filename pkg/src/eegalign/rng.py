"""Named, counter-based random streams.

Each consumer (weight init, batch order, dropout, synthetic data) asks for a
stream by name plus integer coordinates (fold, epoch, ...). The stream key is
a hash of those, fed to a Philox generator, so draws never depend on which
other streams were used first.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *names) -> np.ndarray:
    text = "/".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def stream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
