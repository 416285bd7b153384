"""Named, portable random substreams.

All randomness in a run flows from one 64-bit config seed through named
substreams (``world``, ``train``, ``sample``, ``eval``, ...), each backed by
a counter-based Philox generator keyed by a hash of the stream path.  The
same (seed, path) always yields the same stream, on any platform, and
distinct paths yield statistically independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *path: object) -> np.random.Generator:
    """Return the generator for stream `path` under `seed`.

    Path components are joined as text, so ``substream(s, "world", 3)`` and
    ``substream(s, "world", "3")`` are the same stream; keep components
    unambiguous (no '/' inside a component).
    """
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
