"""Named seed splitting.

Every randomized subsystem gets its own seed derived from one base seed::

    derive_seed(base, "eval", genome_text)
      = int.from_bytes(sha256(f"{base}/eval/{genome_text}")[:8], "little") >> 1

The result fits in 63 bits, so it is a valid numpy seed and JSON integer.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *names) -> int:
    key = "/".join([str(int(base))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(base: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *names))
