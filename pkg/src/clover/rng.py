"""Seedable random source.

Philox is counter-based, so an identical seed plus an identical call
sequence reproduces the stream bit-for-bit. Derived streams take extra
integer tags so sub-generators (per step, per example) never collide.
"""

import numpy as np

__all__ = ["make_rng"]


def make_rng(seed, *stream):
    """Deterministic generator for ``seed`` and optional sub-stream tags."""
    entropy = [int(seed)] + [int(tag) for tag in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
