"""Reproducible random streams keyed by (seed, counters).

Two flavours are needed:

* ``stream(seed, *ids)`` gives a sequential ``numpy`` Generator (Philox) for
  bulk draws that are consumed in a fixed order, e.g. the base increments of
  one path or one block of random walks.
* ``hashed_normal(key, a, b, c)`` gives random access: a standard normal that
  is a pure function of its counters.  Bridge refinement uses it so that the
  midpoint of a dyadic time interval is the same whichever refinement
  pattern (radius, eps, threshold) happened to request it.

Streams never depend on the worker that computes them, so results are
independent of the worker count.
"""

from __future__ import annotations

import zlib

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _as_int(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode())
    return int(x)


def seed_sequence(seed: int, *ids) -> np.random.SeedSequence:
    return np.random.SeedSequence([_as_int(seed) & 0xFFFFFFFFFFFFFFFF, *(_as_int(i) for i in ids)])


def stream(seed: int, *ids) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *ids)))


def stream_key(seed: int, *ids) -> np.uint64:
    """64-bit key for :func:`hashed_normal` derived from the same counters."""
    return seed_sequence(seed, *ids).generate_state(1, np.uint64)[0]


@nb.njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _h4(key, a, b, c):
    z = _mix(key + _GOLDEN)
    z = _mix(z ^ (a * _GOLDEN + np.uint64(1)))
    z = _mix(z ^ (b * _M1 + np.uint64(2)))
    return _mix(z ^ (c * _M2 + np.uint64(3)))


@nb.njit(cache=True)
def hashed_normal(key, a, b, c):
    """Standard normal, a pure function of its four uint64 counters."""
    h1 = _h4(np.uint64(key), np.uint64(a), np.uint64(b), np.uint64(c))
    h2 = _mix(h1 ^ _M2)
    u1 = (np.float64(h1 >> np.uint64(11)) + 0.5) * _INV_2_53
    u2 = (np.float64(h2 >> np.uint64(11)) + 0.5) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


@nb.njit(cache=True)
def hashed_uniform(key, a, b, c):
    h = _h4(np.uint64(key), np.uint64(a), np.uint64(b), np.uint64(c))
    return (np.float64(h >> np.uint64(11)) + 0.5) * _INV_2_53


@nb.njit(cache=True)
def _hashed_normals(key, a, b, c, out):
    for i in range(out.shape[0]):
        out[i] = hashed_normal(key, a[i], b[i], c[i])


def hashed_normals(key, a, b, c) -> np.ndarray:
    """Vectorised :func:`hashed_normal` over broadcast counter arrays."""
    a, b, c = np.broadcast_arrays(
        np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64), np.asarray(c, dtype=np.uint64)
    )
    shape = a.shape
    out = np.empty(a.size)
    _hashed_normals(np.uint64(key), a.ravel().copy(), b.ravel().copy(), c.ravel().copy(), out)
    return out.reshape(shape)
