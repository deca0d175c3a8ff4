"""Named random substreams derived from one root seed.

Every stage (data, vae, stage2, probes, ...) draws from its own stream so a
stage can be re-run in isolation and reproduce exactly, independent of what
ran before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "rng_for"]


def derive_seed(root_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{root_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1  # keep it positive


def rng_for(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, name))
