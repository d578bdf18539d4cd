"""
Random Streams
One seed per run, split into independent named streams.

Every consumer (parameter init, shuffling, dropout, MLM masking, negative
sampling) draws from its own stream so that toggling one of them does not
shift the draws of another.
"""

import hashlib
from typing import Dict

import numpy as np


class RngStreams:
    """
    Named `numpy.random.Generator` streams derived from a single seed.

    Args:
        seed: Run seed
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def _spawn_key(self, purpose: str) -> int:
        digest = hashlib.sha256(purpose.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")

    def get(self, purpose: str) -> np.random.Generator:
        """
        Get the generator for a purpose, creating it on first use.

        Args:
            purpose: Stream name, e.g. "shuffle" or "dropout"

        Returns:
            np.random.Generator: Stream-local generator
        """
        if purpose not in self._streams:
            sequence = np.random.SeedSequence([self.seed, self._spawn_key(purpose)])
            self._streams[purpose] = np.random.default_rng(sequence)
        return self._streams[purpose]

    def __getitem__(self, purpose: str) -> np.random.Generator:
        return self.get(purpose)
