"""Deterministic seed derivation for decoupled module substreams.

Every random decision in a run is driven by a generator derived from the
master seed plus a label path (module name, round index, client id, ...).
Modules therefore never share or advance each other's streams, which is what
makes clean clients bit-identical across runs that only differ in defect
plans.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Map (master seed, label path) to a stable 63-bit integer seed."""
    text = ":".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def derive_rng(master: int, *labels) -> np.random.Generator:
    """Generator seeded by derive_seed(master, *labels)."""
    return np.random.default_rng(derive_seed(master, *labels))
