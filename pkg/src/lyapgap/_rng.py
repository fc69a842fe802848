"""Counter-based random blocks.

Every draw is addressed by ``(seed, stream, index)``: the words for index ``n``
come from a fixed window of the Philox counter space, so any index can be
regenerated on its own and trials never depend on each other's consumption.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO53 = 2.0 ** -53


def stream_key(*parts) -> int:
    """Hash an arbitrary tuple of labels to a 64-bit stream identifier."""
    text = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def raw_words(seed: int, stream: int, start: int, count: int, width: int = 64) -> np.ndarray:
    """Return ``(count, width)`` uint64 words for indices ``start .. start+count-1``.

    ``width`` must be a multiple of 4 (one Philox block yields four words).
    """
    if width % 4:
        raise ValueError("width must be a multiple of 4")
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    counter = np.array([(start * (width // 4)) & _MASK64, 0, 0, 0], dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=counter)
    return bg.random_raw(count * width).reshape(count, width)


def uniform01(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in [0, 1) using the top 53 bits."""
    return (words >> np.uint64(11)).astype(np.float64) * _TWO53


def symmetric_uniform(seed: int, stream: int, start: int, count: int, size: int) -> np.ndarray:
    """Uniform draws on [-1, 1), shape ``(count, size)`` with ``size <= 64``."""
    if size > 64:
        raise ValueError("at most 64 values per index")
    w = raw_words(seed, stream, start, count, 64)[:, :size]
    return 2.0 * uniform01(w) - 1.0


def standard_normal(seed: int, stream: int, start: int, count: int, size: int) -> np.ndarray:
    """Gaussian draws via Box-Muller, shape ``(count, size)`` with ``size <= 64``."""
    if size > 64:
        raise ValueError("at most 64 values per index")
    u = uniform01(raw_words(seed, stream, start, count, 128))
    u1 = 1.0 - u[:, :64]  # (0, 1], keeps the log finite
    u2 = u[:, 64:]
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z[:, :size]


def haar_orthogonal(seed: int, stream: int, start: int, count: int, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrices, shape ``(count, dim, dim)``."""
    g = standard_normal(seed, stream, start, count, dim * dim).reshape(count, dim, dim)
    q, r = np.linalg.qr(g)
    sign = np.sign(np.diagonal(r, axis1=1, axis2=2))
    sign[sign == 0] = 1.0
    return q * sign[:, None, :]
