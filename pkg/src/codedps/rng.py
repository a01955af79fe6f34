"""Counter-based pseudo-randomness.

Every random quantity in the simulator (entry initialization, workload
sampling, gradient directions) is a pure function of a seed plus integer
counters, computed by chaining a splitmix64 finalizer.  Nothing carries RNG
state, so any component can regenerate a value independently: the replay
oracles rely on this.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# stream tags keep unrelated uses of the same (seed, counter) apart
TAG_INIT = 0x11
TAG_LOOKUP = 0x22
TAG_GRAD = 0x33
TAG_FAULT = 0x44


def _finalize(z: int) -> int:
    z = (z ^ (z >> 30)) * _MIX1 & _MASK
    z = (z ^ (z >> 27)) * _MIX2 & _MASK
    return z ^ (z >> 31)


def mix64(*parts: int) -> int:
    """Hash a tuple of integers to a uniform 64-bit value."""
    state = 0
    for part in parts:
        state = _finalize((state + _GOLDEN + (part & _MASK)) & _MASK)
    return state


def mix_unit(*parts: int) -> float:
    """Uniform float in [0, 1) derived from ``parts``."""
    return mix64(*parts) / 2.0**64


def unit_array(count: int, *parts: int) -> np.ndarray:
    """Vector of ``count`` uniform floats in [0, 1), one per counter value.

    Element ``i`` equals ``mix_unit(*parts, i)``.
    """
    base = np.uint64(mix64(*parts))
    z = np.arange(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (base + np.uint64(_GOLDEN) + z) & np.uint64(_MASK)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z.astype(np.float64) / 2.0**64


def initial_entry_value(init_seed: int, entry_id: int, dim: int) -> np.ndarray:
    """Deterministic initial value of an entry: uniform in [-0.1, 0.1]."""
    u = unit_array(dim, TAG_INIT, init_seed, entry_id)
    return (0.2 * u - 0.1).astype(np.float32)
