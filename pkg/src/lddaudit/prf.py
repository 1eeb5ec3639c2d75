"""Counter-mode pseudo-random functions.

Everything random in the package is a deterministic function of a key and a
counter, built on numpy's Philox bit generator. Keys are derived from labels
with SHA-256 so independent streams never share state.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np

SEED_BYTES = 32  # lambda = 256 bits
_U53 = 2.0**-53


def derive_key(*labels: object) -> int:
    """128-bit Philox key for the given label path."""
    h = hashlib.sha256("\x1f".join(str(x) for x in labels).encode()).digest()
    return int.from_bytes(h[:16], "little")


def philox(key: int) -> np.random.Philox:
    return np.random.Philox(key=key)


_local = threading.local()
_MASK64 = (1 << 64) - 1


def _rekeyed(key: int) -> np.random.Philox:
    """Thread-local Philox reset to counter 0 under ``key``.

    Equivalent to ``philox(key)`` but avoids constructing a new bit
    generator; the result is only valid until the next call on this thread.
    """
    bg = getattr(_local, "bitgen", None)
    if bg is None:
        bg = _local.bitgen = np.random.Philox(key=0)
    bg.state = {
        "bit_generator": "Philox",
        "state": {"counter": np.zeros(4, np.uint64),
                  "key": np.array([key & _MASK64, key >> 64], np.uint64)},
        "buffer": np.zeros(4, np.uint64),
        "buffer_pos": 4,
        "has_uint32": 0,
        "uinteger": 0,
    }
    return bg


def normals(key: int, shape: tuple) -> np.ndarray:
    """Standard normal block drawn from the stream keyed by ``key``."""
    return np.random.Generator(_rekeyed(key)).standard_normal(shape)


def generator(*labels: object) -> np.random.Generator:
    return np.random.Generator(philox(derive_key(*labels)))


def rand_tags(seed_r: bytes, n: int) -> np.ndarray:
    """Per-step randomness r_i = PRF(seed_r, i) for i in [0, n).

    Output i of Philox depends only on (key, i), so a prefix of length m is
    the same no matter how many tags are requested.
    """
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    key = int.from_bytes(hashlib.sha256(b"rand-tag\x00" + seed_r).digest()[:16], "little")
    return _rekeyed(key).random_raw(n).astype(np.uint64)


def tag_uniform(tags: np.ndarray | int) -> np.ndarray | float:
    """Map 64-bit tags to doubles in [0, 1) using the top 53 bits."""
    if isinstance(tags, (int, np.integer)):
        return (int(tags) >> 11) * _U53
    return (np.asarray(tags, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * _U53


class Stream:
    """Named, chunk-invariant stream of raw 64-bit draws.

    Drawing 10 values then 20 yields the same 30 values as drawing 30 at
    once, so batched and one-at-a-time consumers stay reproducible.
    """

    def __init__(self, root_seed: int, name: str):
        self.root_seed = root_seed
        self.name = name
        self._bitgen = philox(derive_key("stream", root_seed, name))

    def raw(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        return tag_uniform(self.raw(n))

    def seeds(self, n: int) -> list[bytes]:
        words = self.raw(4 * n).reshape(n, 4)
        return [row.astype("<u8").tobytes() for row in words]

    def keys(self, n: int) -> list[int]:
        words = self.raw(2 * n).reshape(n, 2)
        return [int(a) | (int(b) << 64) for a, b in words]
