"""Fixed-point formats and differentiable quantizers.

A fixed-point value is k * 2**-f with integer mantissa k.  A format is
(signed, int_bits, frac_bits, round_mode, overflow_mode); the total width is
w = signed + int_bits + frac_bits and must be >= 0.  int_bits and frac_bits
may individually be negative.  w == 0 collapses every input to zero.

Representable set: { k * 2**-f : -signed * 2**(i+f) <= k <= 2**(i+f) - 1 },
i.e. the closed range [-signed * 2**i, 2**i - 2**-f] on a 2**-f grid.

Round modes:   RND  round to nearest, ties toward +inf
               TRN  floor
Overflow modes: WRAP two's-complement wraparound of the mantissa
                SAT  clip to the range bounds

All arithmetic here is exact: scaling by powers of two uses ldexp, and
rounding is floor + an exact fractional-part comparison, so results agree
bit-for-bit with arbitrary-precision rational evaluation of the same floats.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

LN2 = math.log(2.0)

ROUND_MODES = ("RND", "TRN")
OVERFLOW_MODES = ("WRAP", "SAT")
GRANULARITIES = ("per_tensor", "per_channel", "per_parameter")

# training guard: |rounded f or i| never exceeds this, keeping every scaled
# mantissa well inside float64's exact-integer range
_EXP_LIMIT = 32

_TOKEN_RE = re.compile(
    r"^(s?)(-?\d+)\.(-?\d+):(RND|TRN):(WRAP|SAT)$"
)


@dataclass(frozen=True)
class FixedPointFormat:
    signed: bool
    int_bits: int
    frac_bits: int
    round_mode: str = "RND"
    overflow_mode: str = "WRAP"

    def __post_init__(self):
        if self.round_mode not in ROUND_MODES:
            raise ValueError(f"bad round mode {self.round_mode!r}")
        if self.overflow_mode not in OVERFLOW_MODES:
            raise ValueError(f"bad overflow mode {self.overflow_mode!r}")
        if self.width < 0:
            raise ValueError(
                f"negative total width {self.width} "
                f"(signed={self.signed}, i={self.int_bits}, f={self.frac_bits})"
            )

    @property
    def width(self) -> int:
        return int(self.signed) + self.int_bits + self.frac_bits

    # mantissa-domain bounds; only meaningful for width > 0
    @property
    def mantissa_lo(self) -> int:
        if self.width == 0:
            return 0
        return -int(self.signed) * (1 << (self.int_bits + self.frac_bits))

    @property
    def mantissa_hi(self) -> int:
        if self.width == 0:
            return 0
        return (1 << (self.int_bits + self.frac_bits)) - 1

    @property
    def min_value(self) -> float:
        return math.ldexp(self.mantissa_lo, -self.frac_bits)

    @property
    def max_value(self) -> float:
        return math.ldexp(self.mantissa_hi, -self.frac_bits)

    def token(self) -> str:
        s = "s" if self.signed else ""
        return f"{s}{self.int_bits}.{self.frac_bits}:{self.round_mode}:{self.overflow_mode}"

    @classmethod
    def from_token(cls, text: str) -> "FixedPointFormat":
        m = _TOKEN_RE.match(text.strip())
        if m is None:
            raise ValueError(f"bad format token {text!r}")
        sgn, i, f, rnd, ovf = m.groups()
        return cls(bool(sgn), int(i), int(f), rnd, ovf)


def parse_format_token(text: str) -> FixedPointFormat:
    return FixedPointFormat.from_token(text)


def _round_to_int(scaled: np.ndarray, round_mode: str) -> np.ndarray:
    """Exact floor / round-half-up of float64 values, as float64 integers.

    floor(y) + (y - floor(y) >= 0.5) avoids the double rounding of
    floor(y + 0.5) when y is large, so the result always matches rational
    arithmetic on the same float input.
    """
    lo = np.floor(scaled)
    if round_mode == "TRN":
        return lo
    return lo + (scaled - lo >= 0.5)


def _apply_overflow(
    k: np.ndarray,
    signed: np.ndarray,
    payload_bits: np.ndarray,
    overflow_mode: str,
) -> np.ndarray:
    """Reduce integer-valued mantissas into [-s*2**p, 2**p - 1], p = i + f.

    Only called where total width > 0, hence p >= 0.
    """
    lo = -signed * np.ldexp(1.0, payload_bits)
    hi = np.ldexp(1.0, payload_bits) - 1.0
    if overflow_mode == "SAT":
        return np.clip(k, lo, hi)
    span = np.ldexp(1.0, payload_bits + signed)
    if np.any(np.abs(k) >= 2.0**52):
        # float64 can no longer do k - lo exactly; finish in exact ints
        flat = k.ravel()
        lo_f = np.broadcast_to(lo, k.shape).ravel()
        sp_f = np.broadcast_to(span, k.shape).ravel()
        out = flat.copy()
        for idx in range(flat.size):
            kk, ll, ss = int(flat[idx]), int(lo_f[idx]), int(sp_f[idx])
            out[idx] = float((kk - ll) % ss + ll)
        return out.reshape(k.shape)
    return np.mod(k - lo, span) + lo


def quantize_elementwise(
    x,
    signed,
    int_bits,
    frac_bits,
    round_mode: str,
    overflow_mode: str,
) -> np.ndarray:
    """Quantize x with per-element formats (signed/int_bits/frac_bits broadcast)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize requires finite inputs")
    s = np.asarray(signed, dtype=np.int64)
    i = np.asarray(int_bits, dtype=np.int64)
    f = np.asarray(frac_bits, dtype=np.int64)
    w = s + i + f
    if np.any(w < 0):
        raise ValueError("negative total width")
    k = _round_to_int(np.ldexp(x, np.broadcast_to(f, x.shape)), round_mode)
    k = _apply_overflow(k, s, i + f, overflow_mode)
    out = np.ldexp(k, -np.broadcast_to(f, k.shape))
    return np.where(w > 0, out, 0.0)


def quantize_deploy(x, fmt: FixedPointFormat) -> np.ndarray:
    """Deployment-semantics quantization: round, then wrap or saturate."""
    return quantize_elementwise(
        x, int(fmt.signed), fmt.int_bits, fmt.frac_bits,
        fmt.round_mode, fmt.overflow_mode,
    )


def mantissa_of(x, fmt: FixedPointFormat) -> np.ndarray:
    """Integer mantissas of quantize_deploy(x, fmt), as int64."""
    q = quantize_deploy(x, fmt)
    return np.asarray(np.ldexp(q, fmt.frac_bits), dtype=np.int64)


def make_group_index(shape: tuple, granularity: str) -> np.ndarray:
    """Element -> quantizer-group map for an array of the given shape.

    per_tensor: one group.  per_parameter: one group per element.
    per_channel: for 2-D weights, one group per output column; for 1-D
    activation lanes, one group per lane.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"bad granularity {granularity!r}")
    if granularity == "per_tensor":
        return np.zeros(shape, dtype=np.int64)
    if granularity == "per_parameter":
        return np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape)
    if len(shape) == 1:
        return np.arange(shape[0], dtype=np.int64)
    if len(shape) == 2:
        return np.broadcast_to(
            np.arange(shape[1], dtype=np.int64), shape
        ).copy()
    raise ValueError("per_channel grouping needs a 1-D or 2-D shape")


class QuantizerState:
    """Learnable quantizer for one array (weights or activation lanes).

    f_cont (and i_cont when saturating) are continuous per-group parameters,
    held as autodiff tensors so an optimizer can update them; the forward
    pass rounds them to integers with a straight-through estimator.
    running_max_abs tracks the pre-quantization |x| maximum per group for
    post-training range calibration; updates are plain in-place maxima and
    must be serialized per group (single-threaded training does this).
    """

    def __init__(
        self,
        group_index: np.ndarray,
        signed: bool,
        round_mode: str = "RND",
        overflow_mode: str = "WRAP",
        f_init: float = 2.0,
        i_init: float = 2.0,
        granularity: str = "per_tensor",
        trainable: bool = True,
        rounded_sat_bounds: bool = True,
    ):
        from .autodiff import Tensor

        if round_mode not in ROUND_MODES:
            raise ValueError(f"bad round mode {round_mode!r}")
        if overflow_mode not in OVERFLOW_MODES:
            raise ValueError(f"bad overflow mode {overflow_mode!r}")
        self.group_index = np.asarray(group_index, dtype=np.int64)
        self.n_groups = int(self.group_index.max()) + 1 if self.group_index.size else 0
        self.signed = bool(signed)
        self.round_mode = round_mode
        self.overflow_mode = overflow_mode
        self.granularity = granularity
        self.trainable = trainable
        self.rounded_sat_bounds = rounded_sat_bounds
        self.f_cont = Tensor(np.full(self.n_groups, float(f_init)))
        self.i_cont = (
            Tensor(np.full(self.n_groups, float(i_init)))
            if overflow_mode == "SAT"
            else None
        )
        self.running_max_abs = np.zeros(self.n_groups)

    def f_used(self) -> np.ndarray:
        """Integer frac_bits per group: round-half-up of f_cont, clamped."""
        f = np.floor(self.f_cont.data + 0.5)
        return np.clip(f, -_EXP_LIMIT, _EXP_LIMIT).astype(np.int64)

    def i_used(self) -> np.ndarray:
        if self.i_cont is None:
            raise ValueError("i_used is only defined for SAT quantizers")
        i = np.floor(self.i_cont.data + 0.5)
        return np.clip(i, -_EXP_LIMIT, _EXP_LIMIT).astype(np.int64)

    def reset_stats(self):
        self.running_max_abs[:] = 0.0

    def observe(self, x: np.ndarray):
        """Fold per-group |x| maxima into running_max_abs."""
        ax = np.abs(np.asarray(x, dtype=np.float64))
        # reduce leading batch dims down to the group-index shape first
        while ax.ndim > self.group_index.ndim:
            ax = ax.max(axis=0)
        np.maximum.at(self.running_max_abs, self.group_index.ravel(), ax.ravel())

    def trainable_tensors(self):
        if not self.trainable:
            return []
        out = [self.f_cont]
        if self.i_cont is not None:
            out.append(self.i_cont)
        return out


@dataclass
class QuantTrace:
    """Saved intermediates from a training-mode quantizer forward."""

    quant_error: np.ndarray   # x - round(x) before any clipping
    clipped_lo: np.ndarray    # bool, SAT only (all-False for WRAP)
    clipped_hi: np.ndarray
    f_used: np.ndarray        # per group
    i_used: np.ndarray | None
    shape: tuple


@dataclass
class QuantGradBundle:
    """Gradient contributions from one quantizer backward pass."""

    grad_wrt_input: np.ndarray
    grad_wrt_f: np.ndarray          # per group
    grad_wrt_i: np.ndarray | None   # per group, None unless SAT
    quant_error: np.ndarray


def quantize_train_forward(
    x: np.ndarray, state: QuantizerState
) -> tuple[np.ndarray, QuantTrace]:
    """Training-semantics quantization.

    WRAP: rounding only; overflow is never simulated during training, and the
    integer range is chosen by post-training calibration instead.
    SAT: rounding followed by a clip to [-s*2**i, 2**i - 2**-f].
    Also folds the pre-quantization |x| maxima into the state's running stats.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize requires finite inputs")
    gi = state.group_index
    if x.shape[-gi.ndim:] != gi.shape:
        raise ValueError(
            f"input shape {x.shape} does not end with group shape {gi.shape}"
        )
    state.observe(x)
    f_used = state.f_used()
    F = f_used[gi]
    k = _round_to_int(np.ldexp(x, np.broadcast_to(F, x.shape)), state.round_mode)
    q = np.ldexp(k, -np.broadcast_to(F, x.shape))
    err = x - q
    i_used = None
    if state.overflow_mode == "SAT":
        i_used = state.i_used()
        if state.rounded_sat_bounds:
            I = i_used[gi].astype(np.float64)
        else:
            I = state.i_cont.data[gi]
        s = float(state.signed)
        lo = -s * np.exp2(I)
        hi = np.exp2(I) - np.ldexp(1.0, -np.broadcast_to(F, x.shape))
        clip_lo = q < lo
        clip_hi = q > hi
        q = np.clip(q, lo, hi)
    else:
        clip_lo = np.zeros(x.shape, dtype=bool)
        clip_hi = np.zeros(x.shape, dtype=bool)
    trace = QuantTrace(err, clip_lo, clip_hi, f_used, i_used, x.shape)
    return q, trace


def quantize_backward(
    trace: QuantTrace, upstream: np.ndarray, state: QuantizerState
) -> QuantGradBundle:
    """Surrogate gradients for a training-mode quantizer.

    Input: straight-through (identity), zeroed where SAT clipped.
    f_cont: sum over the group of upstream * ln2 * quant_error, from the
    bit-width surrogate d(quant_error)/df = -ln2 * quant_error composed with
    q = x - quant_error.
    i_cont (SAT only): clipped elements sit on a bound whose sensitivity to i
    is ln2 * 2**i (upper) or -s * ln2 * 2**i (lower).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != forward shape {trace.shape}"
        )
    gi = state.group_index
    gi_b = np.broadcast_to(gi, trace.shape)
    passed = ~(trace.clipped_lo | trace.clipped_hi)
    grad_x = upstream * passed

    per_elem_f = upstream * LN2 * trace.quant_error
    grad_f = np.bincount(
        gi_b.ravel(), weights=per_elem_f.ravel(), minlength=state.n_groups
    )

    grad_i = None
    if state.overflow_mode == "SAT":
        if state.rounded_sat_bounds:
            I = trace.i_used[gi].astype(np.float64)
        else:
            I = state.i_cont.data[gi]
        pow_i = np.exp2(np.broadcast_to(I, trace.shape))
        s = float(state.signed)
        per_elem_i = upstream * LN2 * pow_i * (
            trace.clipped_hi.astype(np.float64)
            - s * trace.clipped_lo.astype(np.float64)
        )
        grad_i = np.bincount(
            gi_b.ravel(), weights=per_elem_i.ravel(), minlength=state.n_groups
        )
    return QuantGradBundle(grad_x, grad_f, grad_i, trace.quant_error)


def expected_log_ratio_mc(f: int, n_samples: int, seed: int) -> float:
    """Monte-Carlo mean of log(|err(f+1)| / |err(f)|) for uniform |err(f)|.

    |err(f)| ~ U(0, 2**-(f+1)); one extra fractional bit either keeps the
    error (when it already fits the finer grid's half step) or reflects it.
    The analytic mean is -ln 2, independent of f.  Draws landing in the
    unchanged branch contribute log(1) = 0 without forming the quotient.
    """
    rng = np.random.default_rng(seed)
    half = math.ldexp(1.0, -(f + 1))
    e0 = rng.uniform(0.0, half, size=n_samples)
    keep = e0 <= half / 2
    e1 = np.where(keep, e0, half - e0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(keep, 0.0, np.log(e1) - np.log(e0))
    return float(np.mean(log_ratio))
