"""Echo-mode embedding construction.

This mirrors the engine's synthetic provider step for step: FNV-1a 64 of
the payload, a SplitMix64 stream seeded with mix64(seed) XOR that hash,
uniforms via ((u64 >> 11) + 0.5) / 2^53, Box-Muller pairs (cos then sin),
then normalization by the ordered sum of squares. Keeping an independent
copy here is the point: the conformance suite checks the two
implementations agree bit for bit at float32.
"""

import math
import struct

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TWO53 = float(1 << 53)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _mix64(x: int) -> int:
    x &= _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def _f32(value: float) -> float:
    """Round to float32 so the JSON body carries float32-exact values."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


def echo_vector(payload: bytes, dim: int, seed: int) -> list[float]:
    """Unit-norm embedding, elementwise float32-rounded."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    state = _mix64(seed & _MASK64) ^ fnv1a64(payload)

    gauss: list[float] = []
    while len(gauss) < dim:
        state = (state + _GAMMA) & _MASK64
        u1 = ((_mix64(state) >> 11) + 0.5) / _TWO53
        state = (state + _GAMMA) & _MASK64
        u2 = ((_mix64(state) >> 11) + 0.5) / _TWO53
        radius = math.sqrt(-2.0 * math.log(u1))
        gauss.append(radius * math.cos(math.tau * u2))
        if len(gauss) < dim:
            gauss.append(radius * math.sin(math.tau * u2))

    acc = 0.0
    for value in gauss:
        acc += value * value
    norm = math.sqrt(acc)
    return [_f32(value / norm) for value in gauss]
