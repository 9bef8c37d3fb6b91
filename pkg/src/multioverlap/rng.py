"""Counter-based random streams.

Every Markov chain owns a 64-bit key; its n-th uniform is a pure function of
(key, n).  Chains therefore produce the same numbers no matter how they are
batched, chunked or distributed over worker processes.
"""
from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_TWO53 = 1.0 / 9007199254740992.0


def derive_key(*labels) -> int:
    """Hash an arbitrary tuple of labels (ints/strings) into a 64-bit key."""
    text = "\x1f".join(str(label) for label in labels).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def derive_seed_sequence(*labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(derive_key(*labels))


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps modulo 2**64
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def counter_uniform(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    """Uniform(0, 1] variates for each (key, counter) pair."""
    with np.errstate(over="ignore"):
        z = _mix(keys + (counters + np.uint64(1)) * _GOLDEN)
        z = _mix(z ^ keys)
    return ((z >> _S11).astype(np.float64) + 1.0) * _TWO53


class CounterRNG:
    """A vector of independent streams, one per chain.

    ``uniform(mask)`` advances only the streams selected by ``mask``; the
    values seen by a given chain depend only on its key and on how many draws
    it has made so far.
    """

    def __init__(self, keys):
        self.keys = np.asarray(keys, dtype=np.uint64).copy()
        self.counters = np.zeros(self.keys.shape, dtype=np.uint64)

    @classmethod
    def from_labels(cls, labels_per_stream):
        return cls([derive_key(*labels) for labels in labels_per_stream])

    def __len__(self):
        return self.keys.size

    def uniform(self, mask=None) -> np.ndarray:
        if mask is None:
            u = counter_uniform(self.keys, self.counters)
            self.counters += np.uint64(1)
            return u
        u = counter_uniform(self.keys[mask], self.counters[mask])
        self.counters[mask] += np.uint64(1)
        return u

    def normal(self, mask=None) -> np.ndarray:
        # Box-Muller, one normal per pair of uniforms
        u1 = self.uniform(mask)
        u2 = self.uniform(mask)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def spawn_keys(keys, n: int) -> np.ndarray:
    """Child keys of shape keys.shape + (n,), one per sub-stream (e.g. per site)."""
    keys = np.asarray(keys, dtype=np.uint64)
    j = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(_mix(keys[..., None] ^ (j * _M2)) + j * _GOLDEN)
