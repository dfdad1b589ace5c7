"""Fixed-point formats, deploy quantization, and the training quantizer."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitgrad import fxp
from bitgrad.fxp import (
    LN2,
    FixedPointFormat,
    QuantizerState,
    expected_log_ratio_mc,
    make_group_index,
    mantissa_of,
    parse_format_token,
    quantize_deploy,
    quantize_elementwise,
    quantize_train_forward,
    quantize_backward,
)

from oracles import quantize_rational


# ---------------------------------------------------------------------------
# formats and tokens


def test_token_round_trip():
    for tok in ["s3.4:RND:WRAP", "2.0:TRN:SAT", "s-1.3:RND:SAT", "s5.-2:RND:WRAP"]:
        fmt = parse_format_token(tok)
        assert fmt.token() == tok


def test_token_fields():
    fmt = parse_format_token("s3.4:RND:WRAP")
    assert fmt.signed and fmt.int_bits == 3 and fmt.frac_bits == 4
    assert fmt.width == 8
    assert fmt.mantissa_lo == -128 and fmt.mantissa_hi == 127
    assert fmt.min_value == -8.0 and fmt.max_value == 127 / 16


def test_unsigned_bounds():
    fmt = parse_format_token("4.0:TRN:SAT")
    assert not fmt.signed and fmt.width == 4
    assert fmt.mantissa_lo == 0 and fmt.mantissa_hi == 15
    assert fmt.min_value == 0.0 and fmt.max_value == 15.0


@pytest.mark.parametrize(
    "bad", ["s3.4", "s3.4:RND", "x3.4:RND:WRAP", "s3.4:RNE:WRAP", "s3.4:RND:CLIP",
            "3,4:RND:WRAP", ""]
)
def test_bad_tokens_rejected(bad):
    with pytest.raises(ValueError):
        parse_format_token(bad)


def test_negative_width_rejected():
    with pytest.raises(ValueError):
        FixedPointFormat(False, 0, -1)
    # width exactly zero is legal and collapses everything to zero
    z = FixedPointFormat(False, 0, 0)
    assert z.width == 0
    assert quantize_deploy(np.array([1.2, -3.0, 0.0]), z).tolist() == [0.0, 0.0, 0.0]


@given(
    s=st.booleans(),
    f=st.integers(-6, 12),
    i=st.integers(0, 12),
    rnd=st.sampled_from(("RND", "TRN")),
    ovf=st.sampled_from(("WRAP", "SAT")),
)
def test_token_round_trip_property(s, f, i, rnd, ovf):
    int_bits = i - f if s else max(1 - f, i - f)  # keep payload and width >= 0
    fmt = FixedPointFormat(s, int_bits, f, rnd, ovf)
    assert FixedPointFormat.from_token(fmt.token()) == fmt


# ---------------------------------------------------------------------------
# deploy quantization: worked examples


def test_round_nearest_examples():
    fmt = parse_format_token("s3.1:RND:SAT")
    assert quantize_deploy(0.3, fmt) == 0.5       # 0.6 rounds up to grid 1
    assert quantize_deploy(0.24, fmt) == 0.0      # 0.48 rounds down
    assert quantize_deploy(0.25, fmt) == 0.5      # tie goes toward +inf
    assert quantize_deploy(-0.25, fmt) == 0.0     # tie goes toward +inf
    assert quantize_deploy(-3.7, parse_format_token("s3.0:RND:SAT")) == -4.0


def test_floor_examples():
    fmt = parse_format_token("s3.1:TRN:SAT")
    assert quantize_deploy(0.8, fmt) == 0.5
    assert quantize_deploy(-0.1, fmt) == -0.5
    assert quantize_deploy(0.5, fmt) == 0.5


def test_wrap_example():
    # s1.0: mantissas in [-2, 1]; 2.0 wraps to -2.0
    fmt = parse_format_token("s1.0:RND:WRAP")
    assert quantize_deploy(2.0, fmt) == -2.0
    assert quantize_deploy(1.0, fmt) == 1.0
    assert quantize_deploy(-2.0, fmt) == -2.0
    assert quantize_deploy(4.0, fmt) == 0.0


def test_sat_example():
    fmt = parse_format_token("s0.1:RND:SAT")  # range [-1.0, 0.5]
    assert quantize_deploy(1.9, fmt) == 0.5
    assert quantize_deploy(-1.9, fmt) == -1.0


def test_negative_frac_bits():
    # grid step 4
    fmt = parse_format_token("s5.-2:RND:WRAP")
    assert quantize_deploy(7.0, fmt) == 8.0
    assert quantize_deploy(5.9, fmt) == 4.0


def test_negative_int_bits():
    # s-1.3: values in [-0.5, 0.375] on a 1/8 grid
    fmt = parse_format_token("s-1.3:RND:SAT")
    assert quantize_deploy(0.3, fmt) == 0.25
    assert quantize_deploy(0.9, fmt) == 0.375
    assert quantize_deploy(-0.9, fmt) == -0.5


def test_double_rounding_guard():
    # largest double below 0.5 must round to 0, not 1 (floor(x + 0.5) fails)
    x = np.nextafter(0.5, 0.0)
    fmt = parse_format_token("s8.0:RND:SAT")
    assert quantize_deploy(x, fmt) == 0.0
    assert float(Fraction(x) + Fraction(1, 2)) == 1.0  # the naive trap exists


def test_large_mantissa_wrap_uses_exact_ints():
    # |k| >= 2**52 takes the exact integer path
    fmt = parse_format_token("s8.0:RND:WRAP")
    x = 1.0e17
    got = Fraction(float(quantize_deploy(x, fmt)))
    want = quantize_rational(x, 1, 8, 0, "RND", "WRAP")
    assert got == want


def test_mantissa_of():
    fmt = parse_format_token("s3.8:RND:SAT")
    m = mantissa_of(np.array([0.5, -8.0, 100.0]), fmt)
    assert m.dtype == np.int64
    assert m.tolist() == [128, -2048, 2047]


def test_quantize_rejects_nonfinite():
    fmt = parse_format_token("s3.1:RND:SAT")
    with pytest.raises(ValueError):
        quantize_deploy(np.array([1.0, np.nan]), fmt)
    with pytest.raises(ValueError):
        quantize_deploy(np.inf, fmt)


def test_quantize_elementwise_per_lane_formats():
    q = quantize_elementwise(
        np.array([1.3, 1.3]), 1, np.array([2, 0]), np.array([1, 1]), "RND", "SAT"
    )
    assert q.tolist() == [1.5, 0.5]  # second lane saturates at 2**0 - 2**-1


def test_quantize_elementwise_negative_width_rejected():
    with pytest.raises(ValueError):
        quantize_elementwise(np.array([1.0]), 0, -2, 1, "RND", "SAT")


# ---------------------------------------------------------------------------
# deploy quantization: rational oracle and properties


def _fmt_strategy():
    return st.tuples(
        st.booleans(),
        st.integers(-6, 10),
        st.sampled_from(("RND", "TRN")),
        st.sampled_from(("WRAP", "SAT")),
    )


@settings(max_examples=300)
@given(
    x=st.floats(-65536, 65536, allow_nan=False, allow_infinity=False),
    fmt=_fmt_strategy(),
    payload=st.integers(0, 16),
)
def test_matches_rational_oracle(x, fmt, payload):
    s, f, rnd, ovf = fmt
    i = payload - f
    if int(s) + i + f < 1:
        i = 1 - int(s) - f
    q = quantize_deploy(x, FixedPointFormat(s, i, f, rnd, ovf))
    assert Fraction(float(q)) == quantize_rational(x, int(s), i, f, rnd, ovf)


@settings(max_examples=200)
@given(
    x=st.floats(-65536, 65536, allow_nan=False, allow_infinity=False),
    fmt=_fmt_strategy(),
    payload=st.integers(0, 16),
)
def test_idempotent_and_in_range(x, fmt, payload):
    s, f, rnd, ovf = fmt
    i = payload - f
    if int(s) + i + f < 1:
        i = 1 - int(s) - f
    format_ = FixedPointFormat(s, i, f, rnd, ovf)
    q = quantize_deploy(x, format_)
    assert quantize_deploy(q, format_) == q
    assert format_.min_value <= float(q) <= format_.max_value


@settings(max_examples=200)
@given(
    x=st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False),
    f=st.integers(-4, 12),
    rnd=st.sampled_from(("RND", "TRN")),
)
def test_rounding_error_bound(x, f, rnd):
    # int_bits large enough that overflow never fires
    fmt = FixedPointFormat(True, 24, f, rnd, "SAT")
    err = Fraction(x) - Fraction(float(quantize_deploy(x, fmt)))
    step = Fraction(2) ** -f
    if rnd == "TRN":
        assert Fraction(0) <= err < step
    else:
        assert -step / 2 <= err <= step / 2


def test_floor_bias_is_positive():
    rng = np.random.default_rng(7)
    x = rng.uniform(-4.0, 4.0, size=5000)
    fmt = parse_format_token("s8.3:TRN:SAT")
    err = x - quantize_deploy(x, fmt)
    assert (err >= 0).all() and (err < 2.0**-3).all()
    assert err.mean() > 2.0**-5  # one expects step/2 = 2**-4


def test_round_error_uniformity_chi_square():
    rng = np.random.default_rng(11)
    x = rng.uniform(-8.0, 8.0, size=20000)
    fmt = parse_format_token("s8.3:RND:SAT")
    err = x - quantize_deploy(x, fmt)
    half = 2.0**-4
    bins = np.floor((err + half) / (2 * half) * 16).astype(int)
    counts = np.bincount(np.clip(bins, 0, 15), minlength=16)
    expected = x.size / 16
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 37.70  # 99.9th percentile of chi-square with 15 dof


# ---------------------------------------------------------------------------
# training-mode quantizer


def _tensor_state(n=1, **kw):
    defaults = dict(
        group_index=make_group_index((n,), "per_tensor"),
        signed=True,
        round_mode="RND",
        overflow_mode="WRAP",
        f_init=2.0,
        granularity="per_tensor",
    )
    defaults.update(kw)
    return QuantizerState(**defaults)


def test_train_forward_round_example():
    state = _tensor_state(f_init=0.9)
    q, trace = quantize_train_forward(np.array([0.3]), state)
    assert state.f_used().tolist() == [1]
    assert q.tolist() == [0.5]
    assert trace.quant_error.tolist() == [0.3 - 0.5]


def test_train_forward_never_wraps():
    # WRAP trains without overflow: huge values just round
    state = _tensor_state(f_init=0.0)
    q, _ = quantize_train_forward(np.array([1000.25]), state)
    assert q.tolist() == [1000.0]
    assert state.running_max_abs.tolist() == [1000.25]


def test_train_forward_sat_clips():
    state = _tensor_state(3, overflow_mode="SAT", f_init=1.0, i_init=0.0)
    q, trace = quantize_train_forward(np.array([1.9, -1.9, 0.3]), state)
    assert q.tolist() == [0.5, -1.0, 0.5]
    assert trace.clipped_hi.tolist() == [True, False, False]
    assert trace.clipped_lo.tolist() == [False, True, False]
    # quant_error is the pre-clip rounding error
    assert np.allclose(trace.quant_error, [-0.1, 0.1, -0.2])


def test_backward_ste_and_f_grad():
    state = _tensor_state(f_init=0.9)
    x = np.array([0.3])
    _, trace = quantize_train_forward(x, state)
    g = quantize_backward(trace, np.array([2.0]), state)
    assert g.grad_wrt_input.tolist() == [2.0]
    assert g.grad_wrt_i is None
    assert g.grad_wrt_f == pytest.approx([2.0 * LN2 * (0.3 - 0.5)], rel=1e-12)


def test_backward_sat_grads():
    state = _tensor_state(3, overflow_mode="SAT", f_init=1.0, i_init=0.0)
    x = np.array([1.9, -1.9, 0.3])
    _, trace = quantize_train_forward(x, state)
    up = np.array([1.0, 1.0, 1.0])
    g = quantize_backward(trace, up, state)
    # straight-through is blocked on clipped elements
    assert g.grad_wrt_input.tolist() == [0.0, 0.0, 1.0]
    # f grad includes every element, clipped or not
    want_f = LN2 * ((1.9 - 2.0) + (-1.9 + 2.0) + (0.3 - 0.5))
    assert g.grad_wrt_f == pytest.approx([want_f], rel=1e-12)
    # i grad: +ln2*2**i per upper clip, -s*ln2*2**i per lower clip
    assert g.grad_wrt_i == pytest.approx([LN2 * 1.0 - LN2 * 1.0], abs=1e-15)


def test_backward_sat_upper_only():
    state = _tensor_state(overflow_mode="SAT", f_init=1.0, i_init=0.0)
    _, trace = quantize_train_forward(np.array([1.9]), state)
    g = quantize_backward(trace, np.array([3.0]), state)
    assert g.grad_wrt_i == pytest.approx([3.0 * LN2], rel=1e-12)


def test_group_reduction_per_channel():
    gi = make_group_index((2, 3), "per_channel")
    state = QuantizerState(gi, signed=True, f_init=1.0, granularity="per_channel")
    x = np.array([[0.3, 0.3, 0.3], [0.3, 0.3, 0.3]])
    _, trace = quantize_train_forward(x, state)
    up = np.ones_like(x)
    g = quantize_backward(trace, up, state)
    # each column collects its two elements' contributions
    assert g.grad_wrt_f == pytest.approx([2 * LN2 * -0.2] * 3, rel=1e-12)


def test_batch_dims_are_reduced_for_stats():
    gi = make_group_index((3,), "per_channel")
    state = QuantizerState(gi, signed=False, f_init=1.0, granularity="per_channel")
    x = np.array([[0.1, 5.0, 0.2], [0.4, 1.0, 0.3]])
    quantize_train_forward(x, state)
    assert state.running_max_abs.tolist() == [0.4, 5.0, 0.3]


def test_forward_shape_check():
    state = _tensor_state(group_index=make_group_index((3,), "per_channel"),
                          granularity="per_channel")
    with pytest.raises(ValueError):
        quantize_train_forward(np.zeros((4, 2)), state)


def test_backward_shape_check():
    state = _tensor_state()
    _, trace = quantize_train_forward(np.array([0.3]), state)
    with pytest.raises(ValueError):
        quantize_backward(trace, np.zeros(2), state)


def test_f_used_clamped():
    state = _tensor_state(f_init=100.0)
    assert state.f_used().tolist() == [32]
    state.f_cont.data[:] = -100.0
    assert state.f_used().tolist() == [-32]


def test_make_group_index_shapes():
    assert make_group_index((2, 2), "per_tensor").tolist() == [[0, 0], [0, 0]]
    assert make_group_index((2, 2), "per_parameter").tolist() == [[0, 1], [2, 3]]
    assert make_group_index((2, 3), "per_channel").tolist() == [[0, 1, 2], [0, 1, 2]]
    assert make_group_index((3,), "per_channel").tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        make_group_index((2, 2), "per_row")


@settings(max_examples=150)
@given(
    xs=st.lists(st.floats(-512, 512, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=6),
    f_cont=st.floats(-3.4, 10.4),
)
def test_train_forward_matches_pure_rounding(xs, f_cont):
    state = _tensor_state(len(xs), f_init=f_cont)
    x = np.array(xs)
    q, trace = quantize_train_forward(x, state)
    F = int(state.f_used()[0])
    for xv, qv, ev in zip(xs, q, x - q):
        want = quantize_rational(xv, 1, 40 - F, F, "RND", "SAT")  # never overflows
        assert Fraction(float(qv)) == want
    assert np.array_equal(trace.quant_error, x - q)


# ---------------------------------------------------------------------------
# the log error-ratio Monte Carlo

# Var[log ratio] = pi**2 / 6 - ln(2)**2: the ratio is 1 on half the draws
# and (1-u)/u, u ~ U(1/2, 1), on the rest; E[X] = -ln 2 and
# E[X**2] = integral_0^1 ln(t)**2 / (1+t)**2 dt = pi**2 / 6.
LOG_RATIO_VAR = math.pi**2 / 6 - LN2**2


def test_expected_log_ratio_mc_close():
    n = 200_000
    for f in (0, 3, 7):
        got = expected_log_ratio_mc(f, n, seed=123)
        se = math.sqrt(LOG_RATIO_VAR / n)
        assert abs(got + LN2) < 3 * se


def test_expected_log_ratio_mc_deterministic():
    a = expected_log_ratio_mc(4, 10_000, seed=9)
    b = expected_log_ratio_mc(4, 10_000, seed=9)
    c = expected_log_ratio_mc(4, 10_000, seed=10)
    assert a == b
    assert a != c
