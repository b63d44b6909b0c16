"""Fixed-point algebra for bit-sliced weights and bit-serial inputs.

Weights are stored as ``q`` planes of +/-1 bits. Plane ``i`` (0-based here,
bit index ``i + 1`` in hardware terms) carries weight ``2**i``, so the code of
a weight is ``sum_i 2**i * b_i``. Because every bit is +/-1 the representable
codes are exactly the odd integers in ``[-(2**q - 1), 2**q - 1]``.

Inputs are unsigned: ``n`` planes of {0, 1} bits driven onto the word lines
one plane at a time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCodeError


def round_half_up(x):
    """Round to nearest integer, ties toward +inf."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def max_code(q: int) -> int:
    return (1 << q) - 1


def nearest_odd(x, q: int):
    """Nearest representable odd code to ``x`` (ties toward +inf), saturated."""
    odd = 2.0 * round_half_up((np.asarray(x, dtype=np.float64) - 1.0) / 2.0) + 1.0
    top = max_code(q)
    return np.clip(odd, -top, top).astype(np.int64)


def _check_codes(codes: np.ndarray, q: int) -> None:
    if q < 1:
        raise InvalidCodeError(f"bit count must be >= 1, got {q}")
    if np.any(codes % 2 == 0):
        bad = codes[codes % 2 == 0].flat[0]
        raise InvalidCodeError(f"code {bad} is even; +/-1 bit planes only encode odd codes")
    top = max_code(q)
    if np.any(np.abs(codes) > top):
        bad = codes[np.abs(codes) > top].flat[0]
        raise InvalidCodeError(f"code {bad} outside [-{top}, {top}] for q={q}")


def decompose(code, q: int) -> np.ndarray:
    """Split odd integer code(s) into ``q`` bit planes of +/-1.

    The result has a new leading axis of length ``q``; entry ``[i]`` is the bit
    with weight ``2**i``. A scalar code yields a length-``q`` vector.
    """
    codes = np.asarray(code)
    if not np.issubdtype(codes.dtype, np.integer):
        if not np.all(np.equal(np.mod(codes, 1), 0)):
            raise InvalidCodeError("codes must be integers")
        codes = codes.astype(np.int64)
    codes = codes.astype(np.int64)
    _check_codes(codes, q)
    unsigned = (codes + max_code(q)) // 2
    shifts = np.arange(q, dtype=np.int64).reshape((q,) + (1,) * codes.ndim)
    digits = (unsigned[np.newaxis, ...] >> shifts) & 1
    return (2 * digits - 1).astype(np.int8)


def reconstruct(bits, q: int | None = None) -> np.ndarray | int:
    """Inverse of :func:`decompose`: ``sum_i 2**i * bits[i]``."""
    bits = np.asarray(bits)
    if q is None:
        q = bits.shape[0]
    if bits.shape[0] != q:
        raise InvalidCodeError(f"expected {q} planes, got {bits.shape[0]}")
    weights = (1 << np.arange(q, dtype=np.int64)).reshape((q,) + (1,) * (bits.ndim - 1))
    value = np.sum(weights * bits.astype(np.int64), axis=0)
    return int(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class BitPlanes:
    """``q`` planes of +/-1 weights for one layer plus the real-valued scale."""

    planes: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        planes = np.asarray(self.planes)
        if planes.ndim != 3:
            raise InvalidCodeError(f"bit planes must be (q, rows, cols), got shape {planes.shape}")
        if not np.all(np.abs(planes) == 1):
            raise InvalidCodeError("bit plane entries must be exactly +1 or -1")
        if not self.scale > 0:
            raise InvalidCodeError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "planes", planes.astype(np.int8))

    @property
    def q(self) -> int:
        return self.planes.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes.shape[1], self.planes.shape[2]

    def codes(self) -> np.ndarray:
        return reconstruct(self.planes, self.q)

    def weights(self) -> np.ndarray:
        return self.scale * self.codes().astype(np.float64)


def quantize_weights(w, q: int) -> BitPlanes:
    """Quantize a real matrix onto odd codes with a single per-layer scale.

    ``scale = max|w| / (2**q - 1)``; an all-zero matrix uses scale 1.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InvalidCodeError("weights must be finite")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / max_code(q) if peak > 0 else 1.0
    codes = nearest_odd(w / scale, q)
    return BitPlanes(decompose(codes, q), scale)


@dataclass(frozen=True)
class InputPlanes:
    """``n`` unsigned bit planes; plane ``j`` carries weight ``2**j``."""

    planes: np.ndarray
    saturated: int = field(default=0, compare=False)

    def __post_init__(self):
        planes = np.asarray(self.planes)
        if not np.all((planes == 0) | (planes == 1)):
            raise InvalidCodeError("input plane entries must be 0 or 1")
        object.__setattr__(self, "planes", planes.astype(np.uint8))

    @property
    def n(self) -> int:
        return self.planes.shape[0]

    def values(self) -> np.ndarray:
        weights = (1 << np.arange(self.n, dtype=np.int64)).reshape((self.n,) + (1,) * (self.planes.ndim - 1))
        return np.sum(weights * self.planes.astype(np.int64), axis=0)


def input_planes_from_values(values, n: int) -> InputPlanes:
    values = np.asarray(values)
    if np.any(values < 0) or np.any(values > max_code(n)) or np.any(values != np.floor(values)):
        raise InvalidCodeError(f"input values must be integers in [0, {max_code(n)}]")
    values = values.astype(np.int64)
    shifts = np.arange(n, dtype=np.int64).reshape((n,) + (1,) * values.ndim)
    return InputPlanes(((values[np.newaxis, ...] >> shifts) & 1).astype(np.uint8))


def quantize_input_values(a, n: int) -> tuple[np.ndarray, int]:
    """Integer activation codes ``round(a * (2**n - 1))`` and the clamp count."""
    a = np.asarray(a, dtype=np.float64)
    saturated = int(np.count_nonzero((a < 0) | (a > 1)))
    values = round_half_up(np.clip(a, 0.0, 1.0) * max_code(n)).astype(np.int64)
    return values, saturated


def quantize_inputs(a, n: int) -> InputPlanes:
    """Quantize activations in [0, 1] to ``n`` unsigned bit planes.

    Out-of-range entries are clamped; their count is kept in ``saturated``.
    """
    values, saturated = quantize_input_values(a, n)
    planes = input_planes_from_values(values, n).planes
    return InputPlanes(planes, saturated=saturated)
