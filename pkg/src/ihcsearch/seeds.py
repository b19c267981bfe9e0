"""Named random sub-streams derived from one top-level seed."""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(seed: int, *names) -> int:
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(seed: int, *names) -> np.random.Generator:
    """Generator for stream ``names`` under ``seed``, e.g. ``rng_for(42, "synth", "patient", 7)``.

    Streams depend only on (seed, names), never on call order.
    """
    return np.random.default_rng(substream_seed(seed, *names))
