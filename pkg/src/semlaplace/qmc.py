"""Owen-scrambled Sobol points mapped to standard normal scores.

Sobol digits come from scipy (unscrambled, 32 bits). Nested uniform (Owen)
scrambling uses the hash-based Laine-Karras permutation applied to the
bit-reversed integer, which scrambles each digit conditioned on all higher
digits. Beyond scipy's dimension limit a randomly shifted rank-1 lattice is used.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

__all__ = ["owen_sobol", "normal_points", "SOBOL_MAX_DIM"]

SOBOL_MAX_DIM = qmc.Sobol.MAXDIM
_M32 = np.uint64(0xFFFFFFFF)


def _reverse_bits(x):
    x = x.astype(np.uint64)
    x = ((x >> np.uint64(1)) & np.uint64(0x55555555)) | ((x & np.uint64(0x55555555)) << np.uint64(1))
    x = ((x >> np.uint64(2)) & np.uint64(0x33333333)) | ((x & np.uint64(0x33333333)) << np.uint64(2))
    x = ((x >> np.uint64(4)) & np.uint64(0x0F0F0F0F)) | ((x & np.uint64(0x0F0F0F0F)) << np.uint64(4))
    x = ((x >> np.uint64(8)) & np.uint64(0x00FF00FF)) | ((x & np.uint64(0x00FF00FF)) << np.uint64(8))
    x = ((x >> np.uint64(16)) | (x << np.uint64(16))) & _M32
    return x


def _laine_karras(x, seed):
    x = (x + np.uint64(seed)) & _M32
    for c in (0x6C50B47C, 0xB82F1E52, 0xC7AFE638, 0x8D22F6E6):
        x = (x ^ ((x * np.uint64(c)) & _M32)) & _M32
    return x


def _hash32(a, b):
    # small integer hash for per-dimension seeds
    h = (a * 0x9E3779B1 + b * 0x85EBCA77 + 0x165667B1) & 0xFFFFFFFF
    h ^= h >> 15
    h = (h * 0x2C1B3C6D) & 0xFFFFFFFF
    h ^= h >> 12
    h = (h * 0x297A2D39) & 0xFFFFFFFF
    h ^= h >> 15
    return h


def owen_sobol(n, dim, seed=0):
    """n x dim Owen-scrambled Sobol points in the open unit cube."""
    if dim > SOBOL_MAX_DIM:
        return _shifted_lattice(n, dim, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eng = qmc.Sobol(dim, scramble=False, bits=32)
        u = eng.random(n)
    ints = np.round(u * 2.0**32).astype(np.uint64) & _M32
    out = np.empty((n, dim))
    for j in range(dim):
        s = _hash32(int(seed) & 0xFFFFFFFF, j)
        v = _reverse_bits(_laine_karras(_reverse_bits(ints[:, j]), s))
        out[:, j] = (v.astype(np.float64) + 0.5) / 2.0**32
    return out


def _shifted_lattice(n, dim, seed):
    # Korobov-type generating vector with a random shift
    rng = np.random.default_rng(seed)
    a = 1571
    z = np.array([pow(a, j, n if n > 1 else 2) for j in range(dim)], dtype=float)
    k = np.arange(n)[:, None]
    pts = (k * z[None, :] / n + rng.random(dim)[None, :]) % 1.0
    return np.clip(pts, 0.5 / 2**32, 1 - 0.5 / 2**32)


def normal_points(n, dim, seed=0):
    """Scrambled Sobol points pushed through the standard normal quantile."""
    return ndtri(owen_sobol(n, dim, seed))
