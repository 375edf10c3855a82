"""Deterministic random streams.

Two flavours are used in the package:

* ``stream(seed, *tags)`` builds an independent ``numpy`` Generator for a
  named purpose ("batch", step 12, worker 3, ...).  Streams with different
  tags never overlap, and the same tags always reproduce the same draws.

* ``counter_uniform(seed, key, draw)`` is a stateless counter-based hash
  that maps integer coordinates straight to uniforms in [0, 1).  Rendering
  keys it on (pixel index, sample index), so a pixel's jitter and radius
  perturbation do not depend on evaluation order, batching, or which frame
  of a trajectory is being rendered.  That keeps repeated renders of a
  static camera bit-identical.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer; wraps modulo 2**64 like the reference code."""
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def _mix_tags(seed: int, tags: tuple) -> np.uint64:
    h = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for tag in tags:
        if isinstance(tag, str):
            t = np.uint64(abs(hash_str(tag)))
        else:
            t = np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF)
        h = _splitmix64(h ^ t)
    return h


def hash_str(s: str) -> int:
    """Stable 64-bit FNV-1a of a string (``hash()`` is salted per process)."""
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent Generator for the given (seed, tags) combination."""
    key = _mix_tags(seed, tags)
    return np.random.Generator(np.random.Philox(key=int(key)))


def counter_uniform(seed: int, key: np.ndarray, draw: np.ndarray | int) -> np.ndarray:
    """Uniforms in [0, 1) addressed by integer coordinates.

    Parameters
    ----------
    seed : int
        Render seed.
    key : array of int
        Primary counter, typically a flattened pixel index.  Broadcasts
        against ``draw``.
    draw : array of int or int
        Secondary counter, typically the sample index within the pixel.

    Returns
    -------
    float64 array of the broadcast shape, each value in [0, 1).
    """
    key = np.asarray(key, dtype=np.uint64)
    draw = np.asarray(draw, dtype=np.uint64)
    base = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        h = _splitmix64(base ^ (key * _GOLDEN))
        h = _splitmix64(h ^ (draw * _MIX1))
    # use the top 53 bits so the uniform is exactly representable
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
