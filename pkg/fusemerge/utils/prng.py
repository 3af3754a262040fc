
import struct

import numpy as np

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL_1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL_2 = 0x94D049BB133111EB
MASK_64 = 0xFFFFFFFFFFFFFFFF

_U64 = np.uint64

def fnv1a_64(data, h=FNV_OFFSET_BASIS):
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK_64

    return h

def splitmix64(state):
    """One splitmix64 output for the given 64-bit state (state is advanced by the gamma first)
    """
    z = (state + SPLITMIX_GAMMA) & MASK_64
    z = ((z ^ (z >> 30)) * SPLITMIX_MUL_1) & MASK_64
    z = ((z ^ (z >> 27)) * SPLITMIX_MUL_2) & MASK_64

    return z ^ (z >> 31)

def to_unit_interval(z):
    """Top 53 bits of a 64-bit output mapped to [0, 1)
    """
    return (z >> 11) / float(1 << 53)

def stream_key(seed, target_idx, name):
    """Hash state after (seed, target index, tensor name); the flat index is hashed on top of it
    """
    h = fnv1a_64(struct.pack("<Q", seed & MASK_64))
    h = fnv1a_64(struct.pack("<Q", target_idx & MASK_64), h)
    h = fnv1a_64(name.encode("utf-8"), h)

    return h

def uniform(seed, target_idx, name, flat_idx):
    """Single draw keyed by (seed, target index, tensor name, flat index)
    """
    h = fnv1a_64(struct.pack("<Q", flat_idx & MASK_64), stream_key(seed, target_idx, name))

    return to_unit_interval(splitmix64(h))

def uniform_array(seed, target_idx, name, size):
    """Vectorized uniform() for flat indexes 0..size-1 (bit-identical to the scalar version)
    """
    # uint64 arrays wrap on overflow, which is the modular arithmetic both hashes need
    with np.errstate(over="ignore"):
        h = np.full(size, stream_key(seed, target_idx, name), dtype=_U64)
        idx = np.arange(size, dtype=_U64)

        for byte in range(8):
            h ^= (idx >> _U64(8 * byte)) & _U64(0xFF)
            h *= _U64(FNV_PRIME)

        z = h + _U64(SPLITMIX_GAMMA)
        z = (z ^ (z >> _U64(30))) * _U64(SPLITMIX_MUL_1)
        z = (z ^ (z >> _U64(27))) * _U64(SPLITMIX_MUL_2)
        z = z ^ (z >> _U64(31))

    return (z >> _U64(11)).astype(np.float64) / float(1 << 53)
