"""Counter-based random numbers (Philox4x32-10) and a Poisson sampler on top.

Every draw is a pure function of ``(seed, stream, counter)``, so values do not
depend on evaluation order, platform or thread count.

Poisson variates use inversion by sequential search for means below 10 and
the PTRS transformed-rejection method (Hormann, 1993) above.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)

POISSON_INVERSION_LIMIT = 10.0


@numba.njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 = np.uint32(k0 + _W0)
            k1 = np.uint32(k1 + _W1)
        p0 = np.uint64(c0) * _M0
        p1 = np.uint64(c2) * _M1
        hi0 = np.uint32(p0 >> np.uint64(32))
        lo0 = np.uint32(p0 & _MASK)
        hi1 = np.uint32(p1 >> np.uint64(32))
        lo1 = np.uint32(p1 & _MASK)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True)
def philox4x32(counter, key):
    """Philox4x32-10 block function on a 4-word counter and 2-word key."""
    out = np.empty(4, np.uint32)
    out[0], out[1], out[2], out[3] = _philox(
        np.uint32(counter[0]), np.uint32(counter[1]), np.uint32(counter[2]), np.uint32(counter[3]),
        np.uint32(key[0]), np.uint32(key[1]),
    )
    return out


@numba.njit(cache=True, inline="always")
def _to_unit(a, b):
    # 53-bit double in [0, 1)
    return ((a >> np.uint32(5)) * 67108864.0 + (b >> np.uint32(6))) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, inline="always")
def _uniform_pair(index, rnd, stream, k0, k1):
    c0, c1, c2, c3 = _philox(
        np.uint32(index & 0xFFFFFFFF), np.uint32(index >> 32), np.uint32(rnd), np.uint32(stream), k0, k1
    )
    return _to_unit(c0, c1), _to_unit(c2, c3)


def _key(seed: int) -> tuple[np.uint32, np.uint32]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


@numba.njit(cache=True)
def _uniform_kernel(n, stream, k0, k1, out):
    for i in range(n):
        a, b = _uniform_pair(np.int64(i) // 2, 0, stream, k0, k1)
        out[i] = a if i % 2 == 0 else b


def uniform(seed: int, n: int, stream: int = 0) -> np.ndarray:
    """``n`` uniforms on [0, 1) from stream ``stream`` of ``seed``."""
    k0, k1 = _key(seed)
    out = np.empty(n, np.float64)
    _uniform_kernel(n, np.uint32(stream), k0, k1, out)
    return out


@numba.njit(cache=True)
def _poisson_one(lam, index, stream, k0, k1):
    if lam <= 0.0:
        return 0.0
    if lam < POISSON_INVERSION_LIMIT:
        u, _ = _uniform_pair(index, 0, stream, k0, k1)
        k = 0
        p = math.exp(-lam)
        cdf = p
        while u > cdf and k < 1000:
            k += 1
            p *= lam / k
            cdf += p
        return float(k)
    slam = math.sqrt(lam)
    loglam = math.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    rnd = 0
    while True:
        uu, v = _uniform_pair(index, rnd, stream, k0, k1)
        rnd += 1
        u = uu - 0.5
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + lam + 0.43)
        if us >= 0.07 and v <= vr:
            return k
        if k < 0.0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b)) <= (
            -lam + k * loglam - math.lgamma(k + 1.0)
        ):
            return k


@numba.njit(cache=True)
def _poisson_kernel(lam, stream, k0, k1, out):
    for i in range(lam.size):
        out[i] = _poisson_one(lam[i], np.int64(i), stream, k0, k1)


def poisson(means: np.ndarray, seed: int, stream: int = 0) -> np.ndarray:
    """Independent Poisson draws, cell ``i`` using the counter stream ``(seed, i)``."""
    lam = np.ascontiguousarray(means, dtype=np.float64).ravel()
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("Poisson means must be finite and nonnegative")
    k0, k1 = _key(seed)
    out = np.empty(lam.size, np.float64)
    _poisson_kernel(lam, np.uint32(stream), k0, k1, out)
    return out.reshape(np.shape(means))


def uniform_pair(seed: int, index: int, stream: int = 0) -> tuple[float, float]:
    """The two uniforms of counter ``index`` (same values :func:`uniform` puts
    at positions ``2 index`` and ``2 index + 1``)."""
    k0, k1 = _key(seed)
    return _uniform_pair(np.int64(index), 0, np.uint32(stream), k0, k1)
