"""64-bit seed derivation shared by every sampler."""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    """SplitMix64 finaliser (Steele, Lea & Flood constants)."""
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed: s <- splitmix64(s ^ (p * GOLDEN)) per part."""
    state = 0
    for p in parts:
        state = splitmix64(state ^ ((int(p) * GOLDEN) & MASK64))
    return state


def rng_for(*parts: int) -> np.random.Generator:
    return np.random.default_rng(mix_seed(*parts))
