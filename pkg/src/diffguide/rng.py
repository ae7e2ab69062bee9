"""Deterministic RNG fan-out.

A master seed expands into independent substreams keyed by (seed, label,
index): the label is hashed with crc32 and the triple feeds a SeedSequence.
Adding a new labeled purpose never perturbs existing streams.
"""

import zlib

import numpy as np


def substream_seed(master_seed: int, label: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), zlib.crc32(label.encode()), int(index)])


def substream(master_seed: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master_seed, label, index))
