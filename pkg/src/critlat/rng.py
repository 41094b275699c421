"""Stateless counter-based randomness.

Every random quantity in this package is a pure function of a 64-bit seed and
a tuple of integer words (site coordinates, lane ids, step counters, ...).
There is no mutable generator state: hashing the same words in any order, on
any slice of a batch, yields the same numbers.  The mixer is the standard
splitmix64 finalizer (xorshift/multiply chain), which is bijective on 64-bit
words; folding a word is therefore injective for a fixed prior state.

All arithmetic is done on uint64 ndarrays.  numpy wraps unsigned arithmetic
(mod 2^64), which is exactly what we want; 0-d inputs would additionally emit
overflow RuntimeWarnings, so the wrapping steps run under errstate(over=
"ignore").
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = float(2.0**-53)

__all__ = ["mix64", "fold", "fold_signed", "to_uniform", "base_state"]


def _as_u64(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == np.uint64:
        return a
    # two's-complement reinterpretation keeps negative coordinates injective
    return a.astype(np.int64).astype(np.uint64)


def mix64(state: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise on uint64 arrays."""
    z = _as_u64(state)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _MIX_1
        z = (z ^ (z >> _S27)) * _MIX_2
    return z ^ (z >> _S31)


def fold(state, word) -> np.ndarray:
    """Absorb one word into the hash state (broadcasts over arrays)."""
    with np.errstate(over="ignore"):
        acc = _as_u64(state) + _GOLDEN + _as_u64(word)
    return mix64(acc)


def fold_signed(state, word) -> np.ndarray:
    """fold() for possibly-negative integer words."""
    return fold(state, _as_u64(word))


def base_state(salt: int, seed: int) -> np.ndarray:
    """Root state for an independent named stream of a given seed."""
    return fold(fold(np.zeros((), dtype=np.uint64), salt), seed)


def to_uniform(state) -> np.ndarray:
    """Map hash states to doubles in the open interval (0, 1)."""
    bits = _as_u64(state) >> _S11
    return (bits.astype(np.float64) + 0.5) * _INV53
