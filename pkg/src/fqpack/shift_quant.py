"""Power-of-two ("shift") quantization.

A grid with k exponent bits and integer bias b represents the values

    {0} U {s * 2^(e - b) : s in {-1, +1}, e in [0, 2^k - 1]}

(unsigned grids drop the negative branch). Quantization maps a real value to
the nearest grid member in absolute distance, with ties resolved toward the
smaller magnitude; values beyond the largest magnitude clip to it.

Symbol codes are fixed-width integers of k + 2 bits:

    0                  ZERO
    (1 << k) | e       +2^(e - b)
    (2 << k) | e       -2^(e - b)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ZERO = 0  # symbol code shared by true zeros and pruned weights

BIAS_SEARCH_RANGE = (-32, 32)


@dataclass(frozen=True)
class ShiftGrid:
    """Quantization grid: k exponent bits, bias b, optional sign branch."""

    exponent_bits: int
    bias: int
    signed: bool = True

    def __post_init__(self):
        if self.exponent_bits < 1:
            raise ValueError("exponent_bits must be >= 1")
        if not BIAS_SEARCH_RANGE[0] <= self.bias <= BIAS_SEARCH_RANGE[1]:
            raise ValueError(f"bias {self.bias} outside {BIAS_SEARCH_RANGE}")

    @property
    def max_exponent(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def max_magnitude(self) -> float:
        return float(2.0 ** (self.max_exponent - self.bias))

    @property
    def min_magnitude(self) -> float:
        return float(2.0 ** (0 - self.bias))

    @property
    def symbol_bits(self) -> int:
        return self.exponent_bits + 2

    def alphabet(self) -> np.ndarray:
        """All representable values, sorted ascending."""
        mags = 2.0 ** (np.arange(self.max_exponent + 1) - self.bias)
        values = [0.0]
        values.extend(mags)
        if self.signed:
            values.extend(-mags)
        return np.sort(np.array(values, dtype=np.float64))

    def symbols(self) -> np.ndarray:
        """All valid symbol codes (ZERO first, then ascending code value)."""
        e = np.arange(self.max_exponent + 1)
        codes = [np.array([ZERO]), (1 << self.exponent_bits) | e]
        if self.signed:
            codes.append((2 << self.exponent_bits) | e)
        return np.concatenate(codes).astype(np.int64)


def pack_shift_code(sign: int, exponent: int, exponent_bits: int) -> int:
    """Pack (sign, exponent) into a symbol code; sign 0 packs to ZERO."""
    if sign == 0:
        return ZERO
    s_code = 1 if sign > 0 else 2
    return (s_code << exponent_bits) | int(exponent)


def unpack_shift_code(code: int, exponent_bits: int):
    """Return (sign, exponent); ZERO unpacks to (0, 0)."""
    if code == ZERO:
        return 0, 0
    s_code = code >> exponent_bits
    exponent = code & ((1 << exponent_bits) - 1)
    if s_code not in (1, 2):
        raise ValueError(f"invalid shift symbol code {code}")
    return (1 if s_code == 1 else -1), exponent


def shift_quantize_array(values: np.ndarray, grid: ShiftGrid):
    """Quantize an array; returns (codes int64, quantized float64)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    mag = np.abs(v)

    # region below the midpoint between 0 and the smallest level -> ZERO
    zero_mid = 2.0 ** (-grid.bias - 1)
    is_zero = mag <= zero_mid
    if not grid.signed:
        is_zero = is_zero | (v < 0.0)

    # nearest power of two in linear distance; tie at 1.5 * 2^a goes down
    with np.errstate(divide="ignore", invalid="ignore"):
        mant, exp = np.frexp(np.where(is_zero, 1.0, mag))
    lower = np.ldexp(1.0, exp - 1)  # 2^(exp-1) <= mag < 2^exp
    go_up = mag > 1.5 * lower
    e = exp - 1 + grid.bias + go_up.astype(np.int64)
    e = np.clip(e, 0, grid.max_exponent)

    sign = np.where(v > 0, 1, -1).astype(np.int64)
    codes = np.where(
        is_zero,
        ZERO,
        (np.where(sign > 0, 1, 2) << grid.exponent_bits) | e,
    ).astype(np.int64)
    quantized = np.where(is_zero, 0.0, sign * np.ldexp(1.0, e - grid.bias))
    return codes, quantized


def shift_quantize(value: float, grid: ShiftGrid):
    """Quantize one value; returns (symbol code, quantized value)."""
    codes, quantized = shift_quantize_array(np.array([value]), grid)
    return int(codes[0]), float(quantized[0])


def dequantize_array(codes: np.ndarray, grid: ShiftGrid) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    s_code = codes >> grid.exponent_bits
    e = codes & grid.max_exponent
    valid = (codes == ZERO) | ((s_code >= 1) & (s_code <= 2))
    if (codes < 0).any() or not valid.all():
        raise ValueError("invalid shift symbol code")
    if not grid.signed and (s_code == 2).any():
        raise ValueError("negative symbol in unsigned grid")
    sign = np.where(s_code == 1, 1.0, -1.0)
    values = sign * np.ldexp(1.0, e - grid.bias)
    return np.where(codes == ZERO, 0.0, values)


def dequantize_symbol(code: int, grid: ShiftGrid) -> float:
    """Exact real value of one symbol code."""
    return float(dequantize_array(np.array([code]), grid)[0])


@lru_cache(maxsize=None)
def _bias_thresholds(exponent_bits: int) -> np.ndarray:
    lo, hi = BIAS_SEARCH_RANGE
    biases = np.arange(lo, hi + 1)
    return 2.0 ** (((1 << exponent_bits) - 1) - biases)


def select_bias(values: np.ndarray, exponent_bits: int, signed: bool = True) -> int:
    """Pick the grid bias for a set of values.

    Returns the largest bias (tightest grid, i.e. smallest maximum magnitude)
    for which at most 1/(2^k + 1) of the non-zero values overflow the grid,
    where overflow means |v| strictly above the maximum magnitude. The
    overflowing fraction is monotone in the bias, so this is the unique
    boundary point of the feasible range. If even the loosest grid overflows
    too much, the loosest bias is returned.
    """
    if exponent_bits < 1:
        raise ValueError("exponent_bits must be >= 1")
    v = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    nonzero = np.sort(v[v > 0.0])
    if nonzero.size == 0:
        raise ValueError("cannot select a bias for all-zero values")
    bound = 1.0 / ((1 << exponent_bits) + 1)
    max_mags = _bias_thresholds(exponent_bits)  # indexed by bias - lo
    # count of values strictly above each grid's max magnitude
    above = nonzero.size - np.searchsorted(nonzero, max_mags, side="right")
    feasible = above / nonzero.size <= bound
    lo, _ = BIAS_SEARCH_RANGE
    if not feasible.any():
        return lo
    return int(lo + np.nonzero(feasible)[0].max())
