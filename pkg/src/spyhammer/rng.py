"""Deterministic, splittable randomness.

Two primitives back every random decision in the simulator:

* ``keyed_generator`` derives an independent Philox stream from a module
  seed plus a tuple of integer coordinates (chunk index, temperature,
  repetition, ...).  Work units keyed this way can run in any order or in
  parallel and still reproduce the serial results bit for bit.

* ``coord_uniforms`` hashes (seed, row, bit, temperature, repetition) into
  a uniform in [0, 1) with a splitmix64-style finalizer.  A cell's flip
  outcome therefore depends only on its coordinates, never on how many
  other cells were sampled first, which keeps single-row hammers, region
  sweeps, and canary monitoring mutually consistent.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_INV_2_53 = float(2.0**-53)


def _mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; accepts scalars or uint64 arrays."""
    x = (x + _GAMMA) & _U64
    x = ((x ^ (x >> np.uint64(30))) * _MIX1) & _U64
    x = ((x ^ (x >> np.uint64(27))) * _MIX2) & _U64
    return x ^ (x >> np.uint64(31))


def hash_fields(seed: int, *fields: int) -> int:
    """Fold integer fields into one 64-bit value (order-sensitive)."""
    h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for f in fields:
        h = _mix64(h ^ np.uint64(int(f) & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def keyed_generator(seed: int, *fields: int) -> np.random.Generator:
    """Independent Philox stream for the work unit identified by fields."""
    k0 = hash_fields(seed, 0x5B, *fields)
    k1 = hash_fields(seed, 0xA7, *fields)
    return np.random.Generator(np.random.Philox(key=[k0, k1]))


def coord_uniforms(
    seed: int,
    rows: np.ndarray | int,
    bits: np.ndarray | int,
    temp_c: int,
    rep: int,
) -> np.ndarray:
    """Per-cell uniforms in [0, 1), a pure function of the coordinates."""
    rows = np.asarray(rows, dtype=np.uint64)
    bits = np.asarray(bits, dtype=np.uint64)
    base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64((temp_c & 0xFFFF) | ((rep & 0xFFFF) << 16)))
    h = _mix64(base ^ (rows * np.uint64(0x9E3779B1)))
    h = _mix64(h ^ (bits * np.uint64(0x85EBCA77)))
    return (h >> np.uint64(11)).astype(np.float64) * _INV_2_53
