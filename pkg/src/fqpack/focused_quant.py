"""Mixture-guided quantization of one weight layer.

Two modes per layer, decided by the normalized separation of the fitted
mixture components:

* ``shift``: plain signed power-of-two quantization on k = n_bits - 2
  exponent bits.
* ``recentralized``: each unpruned weight is normalized by its component,
  ((w - mu_m) / sigma), shift-quantized on k = n_bits - 3 exponent bits, and
  decoded as alpha * (sigma * s * 2^(e - b) + mu_m).

An n-bit recentralized symbol packs [component:1][sign:2][exponent:n-3]:

    0                              ZERO (pruned weight, decodes to 0.0)
    m << (n-1) | 1 << k | e        deviation +2^(e - b) from mu_m
    m << (n-1) | 2 << k | e        deviation -2^(e - b) from mu_m
    m << (n-1) | 3 << k            component center (deviation 0)

All codes fit in n bits; ZERO is shared by the two components, which is what
lets the entropy coder exploit pruning. Shift-mode layers use the plain
(n_bits - 2)-exponent-bit shift codes, which also fit in n bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError
from .mixture import (
    MINUS,
    PLUS,
    AssignmentMask,
    MixtureModel,
    fit_em,
    sample_assignments,
    wasserstein_separation,
)
from .pruner import PruneMask
from .shift_quant import ZERO, ShiftGrid, select_bias, shift_quantize_array

MODE_SHIFT = "shift"
MODE_RECENTRALIZED = "recentralized"

MIN_BITS_SHIFT = 3
MIN_BITS_RECENTRALIZED = 4

DEFAULT_W_SEP = 2.0

_SQRT_HALF = float(np.sqrt(0.5))


def round_log2(value: float) -> int:
    """Exponent of the nearest power of two in log space; ties go down."""
    if not value > 0 or not np.isfinite(value):
        raise ValueError("round_log2 needs a positive finite value")
    mant, exp = np.frexp(value)  # value = mant * 2^exp, mant in [0.5, 1)
    return int(exp - 1 if mant <= _SQRT_HALF else exp)


def _is_pow2_or_zero(value: float) -> bool:
    if value == 0.0:
        return True
    mant, _ = np.frexp(abs(value))
    return mant == 0.5


def round_hyperparams(model: MixtureModel) -> MixtureModel:
    """Deployment rounding: component means snap to signed powers of two
    (zero stays zero) and both components share the mixing-weighted average
    of their standard deviations."""
    mu = np.zeros(2)
    for c in (MINUS, PLUS):
        m = float(model.mu[c])
        if m != 0.0:
            mu[c] = np.sign(m) * 2.0 ** round_log2(abs(m))
    shared = float(model.lam @ model.sigma)
    shared = max(shared, np.finfo(np.float64).tiny)
    return MixtureModel(
        mu, np.array([shared, shared]), model.lam.copy(),
        log_likelihood=model.log_likelihood,
    )


def choose_mode(model: MixtureModel, total_variance: float, w_sep: float) -> str:
    """Recentralized iff the normalized component separation reaches w_sep."""
    separation = wasserstein_separation(model, total_variance)
    return MODE_RECENTRALIZED if separation >= w_sep else MODE_SHIFT


@dataclass
class LayerQuantization:
    """Frozen quantization of one layer: parameters plus per-weight symbols.

    ``symbols`` is a flat int64 array covering every weight position (pruned
    positions hold ZERO). ``mu`` is (mu_minus, mu_plus); both are exact signed
    powers of two or 0. ``sigma`` is the shared component scale (1.0 for
    shift mode, where it is unused).
    """

    name: str
    mode: str
    n_bits: int
    alpha: float
    bias: int
    mu: tuple
    sigma: float
    symbols: np.ndarray
    wsep: float = 0.0

    def __post_init__(self):
        if self.mode not in (MODE_SHIFT, MODE_RECENTRALIZED):
            raise ValueError(f"unknown mode {self.mode!r}")
        min_bits = (
            MIN_BITS_RECENTRALIZED
            if self.mode == MODE_RECENTRALIZED
            else MIN_BITS_SHIFT
        )
        if not min_bits <= self.n_bits <= 8:
            raise ValueError(
                f"{self.mode} mode needs n_bits in [{min_bits}, 8], got {self.n_bits}"
            )
        # alpha and sigma live as f32 in the compressed container; hold them
        # at that precision from the start so round trips are bit-exact
        self.alpha = float(np.float32(self.alpha))
        self.sigma = float(np.float32(self.sigma))
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if not -32 <= self.bias <= 32:
            raise ValueError(f"bias {self.bias} outside [-32, 32]")
        self.mu = (float(self.mu[0]), float(self.mu[1]))
        if self.mode == MODE_RECENTRALIZED:
            if not (_is_pow2_or_zero(self.mu[0]) and _is_pow2_or_zero(self.mu[1])):
                raise ValueError("component means must be signed powers of two or 0")
            if not self.sigma > 0:
                raise ValueError("sigma must be positive")
        self.symbols = np.asarray(self.symbols, dtype=np.int64).ravel()
        if self.symbols.size == 0:
            raise ValueError("empty symbol stream")
        if self.symbols.min() < 0 or self.symbols.max() >= (1 << self.n_bits):
            raise ValueError(f"symbol out of range for {self.n_bits}-bit codes")

    @property
    def exponent_bits(self) -> int:
        return self.n_bits - (3 if self.mode == MODE_RECENTRALIZED else 2)

    @property
    def grid(self) -> ShiftGrid:
        return ShiftGrid(self.exponent_bits, self.bias)

    @property
    def alphabet_size(self) -> int:
        return 1 << self.n_bits

    @property
    def weight_count(self) -> int:
        return int(self.symbols.size)

    @property
    def zero_fraction(self) -> float:
        """Fraction of positions decoding to exactly zero."""
        return float(np.count_nonzero(self.symbols == ZERO)) / self.symbols.size


def fq_pack_array(component: np.ndarray, shift_codes: np.ndarray, n_bits: int) -> np.ndarray:
    """Combine component bits with inner shift codes into n-bit symbols.

    A zero inner code becomes the component-center symbol (sign field 3), so
    the all-zero code stays reserved for pruned positions.
    """
    k = n_bits - 3
    component = np.asarray(component, dtype=np.int64)
    shift_codes = np.asarray(shift_codes, dtype=np.int64)
    inner = np.where(shift_codes == ZERO, 3 << k, shift_codes)
    return (component << (n_bits - 1)) | inner


def fq_unpack_array(symbols: np.ndarray, n_bits: int):
    """Split n-bit symbols into (pruned, component, sign, exponent) arrays.

    ``sign`` is -1/0/+1; pruned positions report component 0, sign 0.
    """
    k = n_bits - 3
    symbols = np.asarray(symbols, dtype=np.int64)
    pruned = symbols == ZERO
    component = (symbols >> (n_bits - 1)) & 1
    s_code = (symbols >> k) & 3
    exponent = symbols & ((1 << k) - 1)
    bad = ~pruned & (s_code == 0)
    if (symbols < 0).any() or (symbols >> n_bits).any() or bad.any():
        raise ValueError("invalid symbol for this bit width")
    sign = np.zeros_like(symbols)
    sign[s_code == 1] = 1
    sign[s_code == 2] = -1
    sign[pruned] = 0
    exponent = np.where(pruned | (s_code == 3), 0, exponent)
    component = np.where(pruned, 0, component)
    return pruned, component, sign, exponent


def quantize_shift_layer(
    weights: np.ndarray,
    mask: PruneMask,
    n_bits: int,
    name: str = "",
    alpha: float = 1.0,
    wsep: float = 0.0,
) -> LayerQuantization:
    """Plain shift quantization of the unpruned weights of one layer."""
    if n_bits < MIN_BITS_SHIFT:
        raise ValueError(f"shift mode needs n_bits >= {MIN_BITS_SHIFT}")
    flat = np.asarray(weights, dtype=np.float64).ravel()
    if mask.mask.size != flat.size:
        raise ValueError("mask length != weight count")
    keep = mask.mask == 1
    unpruned = flat[keep]
    if unpruned.size == 0:
        raise DegenerateInputError("all weights pruned")
    if not np.any(unpruned != 0.0):
        raise DegenerateInputError("unpruned weights are all zero")
    k = n_bits - 2
    bias = select_bias(unpruned, k)
    codes, _ = shift_quantize_array(unpruned, ShiftGrid(k, bias))
    symbols = np.zeros(flat.size, dtype=np.int64)
    symbols[keep] = codes
    return LayerQuantization(
        name=name, mode=MODE_SHIFT, n_bits=n_bits, alpha=float(alpha),
        bias=bias, mu=(0.0, 0.0), sigma=1.0, symbols=symbols, wsep=float(wsep),
    )


def quantize_recentralized(
    weights: np.ndarray,
    mask: PruneMask,
    model: MixtureModel,
    assignment: AssignmentMask,
    n_bits: int,
    name: str = "",
    alpha: float = 1.0,
    wsep: float = 0.0,
) -> LayerQuantization:
    """Component-recentered quantization of one layer.

    ``model`` must already be deployment-rounded (power-of-two means, shared
    sigma); ``assignment`` must cover exactly the unpruned positions in flat
    order.
    """
    if n_bits < MIN_BITS_RECENTRALIZED:
        raise ValueError(
            f"recentralized mode needs n_bits >= {MIN_BITS_RECENTRALIZED}"
        )
    if model.sigma[MINUS] != model.sigma[PLUS]:
        raise ValueError("model must have a shared sigma (round_hyperparams)")
    if not (_is_pow2_or_zero(model.mu[MINUS]) and _is_pow2_or_zero(model.mu[PLUS])):
        raise ValueError("model means must be rounded to powers of two")
    flat = np.asarray(weights, dtype=np.float64).ravel()
    if mask.mask.size != flat.size:
        raise ValueError("mask length != weight count")
    keep = mask.mask == 1
    unpruned = flat[keep]
    if unpruned.size == 0:
        raise DegenerateInputError("all weights pruned")
    if assignment.component.size != unpruned.size:
        raise ValueError("assignment length != unpruned weight count")

    sigma = float(np.float32(model.sigma[MINUS]))  # container precision
    mu_per_value = model.mu[assignment.component]
    normalized = (unpruned - mu_per_value) / sigma
    if not np.any(normalized != 0.0):
        raise DegenerateInputError("normalized deviations are all zero")
    k = n_bits - 3
    bias = select_bias(normalized, k)
    codes, _ = shift_quantize_array(normalized, ShiftGrid(k, bias))
    fq_codes = fq_pack_array(assignment.component, codes, n_bits)
    symbols = np.zeros(flat.size, dtype=np.int64)
    symbols[keep] = fq_codes
    return LayerQuantization(
        name=name, mode=MODE_RECENTRALIZED, n_bits=n_bits, alpha=float(alpha),
        bias=bias, mu=(float(model.mu[MINUS]), float(model.mu[PLUS])),
        sigma=sigma, symbols=symbols, wsep=float(wsep),
    )


def quantize_layer(
    weights: np.ndarray,
    mask: PruneMask,
    n_bits: int,
    w_sep: float = DEFAULT_W_SEP,
    seed: int = 0,
    name: str = "",
    alpha: float = 1.0,
    model: Optional[MixtureModel] = None,
) -> LayerQuantization:
    """Full per-layer pipeline: fit, mode-select, round, assign, quantize.

    Assignments are sampled from the fitted (unrounded) mixture; the rounded
    hyperparameters are then used for the actual quantization. Layers whose
    unpruned weights cannot support a mixture fit fall back to shift mode,
    as do all layers when n_bits == 3 (too narrow for the recentralized
    symbol layout).
    """
    flat = np.asarray(weights, dtype=np.float64).ravel()
    if mask.mask.size != flat.size:
        raise ValueError("mask length != weight count")
    unpruned = flat[mask.mask == 1]
    if unpruned.size == 0:
        raise DegenerateInputError("all weights pruned")
    total_variance = float(unpruned.var())
    if model is None:
        try:
            model = fit_em(unpruned)
        except DegenerateInputError:
            return quantize_shift_layer(flat, mask, n_bits, name, alpha, wsep=0.0)
    wsep_value = wasserstein_separation(model, total_variance)
    mode = choose_mode(model, total_variance, w_sep)
    if mode == MODE_RECENTRALIZED and n_bits >= MIN_BITS_RECENTRALIZED:
        assignment = sample_assignments(model, unpruned, seed)
        rounded = round_hyperparams(model)
        return quantize_recentralized(
            flat, mask, rounded, assignment, n_bits, name, alpha, wsep=wsep_value
        )
    return quantize_shift_layer(flat, mask, n_bits, name, alpha, wsep=wsep_value)


def decode_symbols(lq: LayerQuantization) -> np.ndarray:
    """Symbol values before the layer scale alpha, flat float64.

    Kept separate from :func:`dequantize_layer` because the integer engine
    applies alpha once per output sum, not once per weight; both views need
    the same pre-scale values.
    """
    if lq.mode == MODE_SHIFT:
        from .shift_quant import dequantize_array

        return dequantize_array(lq.symbols, lq.grid)
    pruned, component, sign, exponent = fq_unpack_array(lq.symbols, lq.n_bits)
    deviation = sign * np.ldexp(1.0, exponent - lq.bias)
    mu = np.array(lq.mu)[component]
    return np.where(pruned, 0.0, lq.sigma * deviation + mu)


def dequantize_layer(lq: LayerQuantization) -> np.ndarray:
    """Exact real weights encoded by the symbols, flat float64."""
    return lq.alpha * decode_symbols(lq)


def kl_complexity_cost(
    original: np.ndarray, quantized: np.ndarray, bins: int = 64
) -> float:
    """KL(quantized || original) over a shared equal-width histogram.

    Both arrays are binned over their common range with add-one smoothing,
    so the result is finite and non-negative; it is 0 only when the smoothed
    histograms coincide. Used as a relative complexity diagnostic between
    quantization schemes, so the (natural) log base does not matter.
    """
    if bins < 16:
        raise ValueError("need at least 16 bins")
    a = np.asarray(original, dtype=np.float64).ravel()
    b = np.asarray(quantized, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty input")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if not hi > lo:
        raise ValueError("zero-width value range")
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, bins=edges)[0].astype(np.float64) + 1.0
    q = np.histogram(b, bins=edges)[0].astype(np.float64) + 1.0
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(q * np.log(q / p)))
