"""Hardware cost model: differentiable bit-operation counts, range
calibration, CSD encoding, and the regularized training loss.

The cost of a model is counted as
    sum over multiplications of  b_weight * b_input
  + sum over bias additions of  max(b_bias, b_output)
with b the total width (sign + integer + fractional bits, clamped at 0) of
the operand's quantizer group.  A width-0 group is pruned hardware and
contributes nothing.  The surrogate keeps this differentiable by rounding
fractional widths with a straight-through estimator and treating
value-derived integer widths as constants; evaluated at integer widths with
identical range statistics it equals the exact count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fxp
from .autodiff import Tensor, add, colmax, gather, maximum, mul, relu, round_ste, tsum
from .layers import CalibratedModel, LayerCalibration, QModel

_PRUNED = -1.0e9  # width constant for empty groups; relu() floors them at 0


# ---------------------------------------------------------------------------
# canonical signed digit encoding


def csd_encode(c: int) -> list[int]:
    """CSD digits of an integer, least significant first.

    Digits are in {-1, 0, +1} with no two adjacent non-zeros; this is the
    minimal-nonzero-count signed-digit form.  csd_encode(0) == [].
    """
    c = int(c)
    digits = []
    while c:
        if c & 1:
            d = 2 - (c % 4)
            digits.append(d)
            c -= d
        else:
            digits.append(0)
        c //= 2
    return digits


def csd_decode(digits) -> int:
    return sum(d << p for p, d in enumerate(digits))


def csd_nonzero_count(c: int) -> int:
    return sum(1 for d in csd_encode(c) if d)


# ---------------------------------------------------------------------------
# width helpers shared by the surrogate and the exact count


def payload_bits(k: np.ndarray) -> np.ndarray:
    """Smallest p with -2**p <= k <= 2**p - 1, elementwise (0 for k == 0)."""
    k = np.asarray(k, dtype=np.int64)
    t = np.where(k >= 0, k + 1, -k).astype(np.float64)
    m, e = np.frexp(t)
    return (e - (m == 0.5)).astype(np.int64)


def smallest_int_bits(max_abs: np.ndarray, frac_bits: np.ndarray, signed) -> np.ndarray:
    """Smallest i such that [-s*2**i, 2**i - 2**-f] covers |x| <= max_abs.

    Equivalent to the smallest p = i + f with 2**p >= max_abs * 2**f + 1;
    groups that never saw a non-zero value get i = -s - f (total width 0).
    """
    M = np.asarray(max_abs, dtype=np.float64)
    f = np.asarray(frac_bits, dtype=np.int64)
    s = np.asarray(signed, dtype=np.int64)
    mf = np.ldexp(M, np.broadcast_to(f, M.shape))
    m, e = np.frexp(mf + 1.0)
    p = (e - (m == 0.5)).astype(np.int64)
    p = np.where(M == 0.0, -s, p)
    return p - f


def _weight_group_consts(layer) -> tuple[np.ndarray, np.ndarray]:
    """(per-group width constant for the surrogate, per-group integer width).

    The constant is chosen so that relu(round_ste(f_cont) + const) evaluates
    to the group's exact width: sign + payload bits of the widest current
    mantissa, or 0 when every mantissa in the group is zero.
    """
    q = layer.weight_q
    f_used = q.f_used()
    gi = q.group_index
    k = fxp._round_to_int(
        np.ldexp(layer.weight.data, f_used[gi]), q.round_mode
    ).astype(np.int64)
    p = payload_bits(k)
    p_group = np.zeros(q.n_groups, dtype=np.int64)
    np.maximum.at(p_group, gi.ravel(), p.ravel())
    nonzero = np.bincount(gi.ravel(), weights=(k != 0).ravel(), minlength=q.n_groups) > 0
    width = np.where(nonzero, int(q.signed) + p_group, 0)
    const = np.where(nonzero, int(q.signed) + p_group - f_used, _PRUNED)
    return const.astype(np.float64), width


def _act_group_consts(state) -> tuple[np.ndarray, np.ndarray]:
    """As above for an activation quantizer (stats-derived or learned i)."""
    f_used = state.f_used()
    s = int(state.signed)
    if state.overflow_mode == "SAT":
        i_used = state.i_used()
        width = np.maximum(0, s + i_used + f_used)
        return (s + i_used).astype(np.float64), width
    i_eff = smallest_int_bits(state.running_max_abs, f_used, s)
    width = np.maximum(0, s + i_eff + f_used)
    const = np.where(width > 0, (s + i_eff).astype(np.float64), _PRUNED)
    return const, width


def _bias_consts(layer, f_in: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(surrogate constant, integer width, accumulator frac bits) per lane."""
    f_acc = layer.accum_frac_bits(f_in)
    k = fxp._round_to_int(np.ldexp(layer.bias.data, f_acc), "RND").astype(np.int64)
    p = payload_bits(k)
    width = np.where(k != 0, 1 + p, 0)
    const = np.where(k != 0, (1 + p - f_acc).astype(np.float64), _PRUNED)
    return const, width, f_acc


def _f_tensor(state, rounded: bool) -> Tensor:
    return round_ste(state.f_cont) if rounded else state.f_cont


def _surrogate_terms(model: QModel, rounded: bool = True):
    """Per-layer (mul_term, add_term, width tensors) for the cost surrogate."""
    n_in0 = model.layers[0].n_in
    in_f = Tensor(np.full(n_in0, float(model.input_format.frac_bits)))
    in_b = Tensor(np.full(n_in0, float(model.input_format.width)))
    f_in_used = np.full(n_in0, model.input_format.frac_bits, dtype=np.int64)
    layers = []
    for layer in model.layers:
        wq, aq = layer.weight_q, layer.act_q
        w_const, _ = _weight_group_consts(layer)
        b_w = relu(add(_f_tensor(wq, rounded), Tensor(w_const)))
        a_const, _ = _act_group_consts(aq)
        if aq.overflow_mode == "SAT":
            i_t = round_ste(aq.i_cont) if rounded else aq.i_cont
            b_a = relu(add(add(_f_tensor(aq, rounded), i_t), Tensor(float(aq.signed))))
        else:
            b_a = relu(add(_f_tensor(aq, rounded), Tensor(a_const)))

        rows = np.broadcast_to(
            np.arange(layer.n_in, dtype=np.int64)[:, None], (layer.n_in, layer.n_out)
        )
        mul_term = tsum(mul(gather(b_w, wq.group_index), gather(in_b, rows)))

        bias_const, _, _ = _bias_consts(layer, f_in_used)
        f_acc_t = colmax(add(gather(_f_tensor(wq, rounded), wq.group_index),
                             gather(in_f, rows)))
        b_bias = relu(add(f_acc_t, Tensor(bias_const)))
        b_out = gather(b_a, aq.group_index)
        add_term = tsum(maximum(b_bias, b_out))

        layers.append((mul_term, add_term, b_w, b_a))
        in_f = gather(_f_tensor(aq, rounded), aq.group_index)
        in_b = b_out
        f_in_used = aq.f_used()[aq.group_index]
    return layers


def bitops_surrogate(model: QModel, rounded: bool = True) -> Tensor:
    """Differentiable total bit-operation count (autodiff scalar)."""
    total = Tensor(0.0)
    for mul_term, add_term, _, _ in _surrogate_terms(model, rounded):
        total = add(add(total, mul_term), add_term)
    return total


def bitwidth_sum(model: QModel, rounded: bool = True) -> Tensor:
    """Sum of all learnable group widths (clamped at 0), for L1 pressure."""
    total = Tensor(0.0)
    for _, _, b_w, b_a in _surrogate_terms(model, rounded):
        total = add(total, add(tsum(b_w), tsum(b_a)))
    return total


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class LossConfig:
    beta_init: float = 5e-7
    beta_final: float = 1e-3
    gamma: float = 2e-8


def beta_at(cfg: LossConfig, step: int, total_steps: int) -> float:
    """Exponential (log-linear) interpolation from beta_init to beta_final."""
    if cfg.beta_init == cfg.beta_final:
        return cfg.beta_init
    if cfg.beta_init <= 0.0 or cfg.beta_final <= 0.0:
        raise ValueError("beta schedule endpoints must be positive (or equal)")
    t = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return cfg.beta_init * (cfg.beta_final / cfg.beta_init) ** t


def total_loss(
    base: Tensor, model: QModel, cfg: LossConfig, step: int, total_steps: int
) -> Tensor:
    beta = beta_at(cfg, step, total_steps)
    out = base
    if beta != 0.0:
        out = add(out, mul(bitops_surrogate(model), Tensor(beta)))
    if cfg.gamma != 0.0:
        out = add(out, mul(bitwidth_sum(model), Tensor(cfg.gamma)))
    return out


# ---------------------------------------------------------------------------
# post-training range calibration


def calibrate(model: QModel, X: np.ndarray, batch_size: int = 1024) -> CalibratedModel:
    """Freeze the model to integer formats using profiled ranges.

    Fractional widths come from rounding the learned parameters; integer
    widths for wrapping groups are the smallest that admit no overflow for
    any value seen in X (re-running X through the result is overflow-free by
    construction); saturating groups keep their learned integer widths;
    weight and bias ranges come from their exact quantized values.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("calibration needs at least one sample")
    model.reset_stats()
    for lo in range(0, X.shape[0], batch_size):
        model.forward(X[lo : lo + batch_size])

    layers = []
    f_in = np.full(model.layers[0].n_in, model.input_format.frac_bits, dtype=np.int64)
    for layer in model.layers:
        wq, aq = layer.weight_q, layer.act_q
        f_w_group = wq.f_used()
        gi = wq.group_index
        f_w = f_w_group[gi]
        k_w = fxp._round_to_int(
            np.ldexp(layer.weight.data, f_w), wq.round_mode
        ).astype(np.int64)
        p = payload_bits(k_w)
        p_group = np.zeros(wq.n_groups, dtype=np.int64)
        np.maximum.at(p_group, gi.ravel(), p.ravel())
        nonzero = (
            np.bincount(gi.ravel(), weights=(k_w != 0).ravel(), minlength=wq.n_groups) > 0
        )
        i_w_group = np.where(nonzero, p_group - f_w_group, -1 - f_w_group)
        w_width_group = np.where(nonzero, 1 + p_group, 0)

        bias_const_f = layer.accum_frac_bits(f_in)
        k_b = fxp._round_to_int(np.ldexp(layer.bias.data, bias_const_f), "RND").astype(
            np.int64
        )
        p_b = payload_bits(k_b)
        bias_i = np.where(k_b != 0, p_b - bias_const_f, -1 - bias_const_f)
        bias_width = np.where(k_b != 0, 1 + p_b, 0)

        f_a_group = aq.f_used()
        s_a = int(aq.signed)
        if aq.overflow_mode == "SAT":
            i_a_group = aq.i_used()
        else:
            i_a_group = smallest_int_bits(aq.running_max_abs, f_a_group, s_a)
        a_width_group = np.maximum(0, s_a + i_a_group + f_a_group)

        agi = aq.group_index
        layers.append(
            LayerCalibration(
                weight_mantissas=k_w,
                weight_f=f_w,
                weight_i=i_w_group[gi],
                weight_width=w_width_group[gi],
                weight_group_index=gi,
                bias_mantissas=k_b,
                bias_f=bias_const_f,
                bias_i=bias_i,
                bias_width=bias_width,
                act_signed=bool(aq.signed),
                act_i=i_a_group[agi],
                act_f=f_a_group[agi],
                act_width=a_width_group[agi],
                act_group_index=agi,
                act_round_mode=aq.round_mode,
                act_overflow_mode=aq.overflow_mode,
                use_relu=layer.use_relu,
            )
        )
        f_in = f_a_group[agi]
    return CalibratedModel(model.input_format, layers)


# ---------------------------------------------------------------------------
# exact counts and reports


@dataclass
class LayerBitOps:
    mul: int
    add: int

    @property
    def total(self) -> int:
        return self.mul + self.add


@dataclass
class BitOpsReport:
    layers: list[LayerBitOps] = field(default_factory=list)
    csd_weighted_total: int = 0
    dsp_coefficient: float = 55.0

    @property
    def mul_total(self) -> int:
        return sum(l.mul for l in self.layers)

    @property
    def add_total(self) -> int:
        return sum(l.add for l in self.layers)

    @property
    def total(self) -> int:
        return self.mul_total + self.add_total

    @property
    def lut_pred(self) -> float:
        return lut_estimate(self.total)

    def to_text(self) -> str:
        lines = ["bit-ops report"]
        for idx, l in enumerate(self.layers):
            lines.append(f"  layer {idx}: mul={l.mul} add={l.add} total={l.total}")
        lines.append(f"  total={self.total} (mul={self.mul_total} add={self.add_total})")
        lines.append(f"  csd_weighted_total={self.csd_weighted_total}")
        lines.append(f"  lut_pred={self.lut_pred:.3f}")
        lines.append(
            f"  note: total ~ LUT + {self.dsp_coefficient:g}*DSP on comparable parts"
        )
        return "\n".join(lines)

    def to_kv(self) -> str:
        rows = []
        for idx, l in enumerate(self.layers):
            rows.append(f"layer{idx}.mul={l.mul}")
            rows.append(f"layer{idx}.add={l.add}")
        rows += [
            f"mul_total={self.mul_total}",
            f"add_total={self.add_total}",
            f"total={self.total}",
            f"csd_weighted_total={self.csd_weighted_total}",
            f"lut_pred={self.lut_pred!r}",
            f"dsp_coefficient={self.dsp_coefficient!r}",
        ]
        return "\n".join(rows)


def dense_bitops(b_w: np.ndarray, b_in: np.ndarray, b_bias: np.ndarray,
                 b_out: np.ndarray) -> tuple[int, int]:
    """Exact (mul, add) bit-op count of one dense layer from operand widths."""
    b_w = np.asarray(b_w, dtype=np.int64)
    b_in = np.asarray(b_in, dtype=np.int64)
    mul_term = int((b_w * b_in[:, None]).sum())
    add_term = int(np.maximum(np.asarray(b_bias), np.asarray(b_out)).sum())
    return mul_term, add_term


def bitops_exact(cm: CalibratedModel, dsp_coefficient: float = 55.0) -> BitOpsReport:
    """Exact bit-op count of a calibrated model, plus the CSD-weighted variant
    (signed-digit count of each constant times the variable operand width)."""
    report = BitOpsReport(dsp_coefficient=dsp_coefficient)
    b_in = np.full(cm.layers[0].weight_mantissas.shape[0], cm.input_format.width,
                   dtype=np.int64)
    csd_total = 0
    for lc in cm.layers:
        m, a = dense_bitops(lc.weight_width, b_in, lc.bias_width, lc.act_width)
        report.layers.append(LayerBitOps(m, a))
        nnz = np.array(
            [[csd_nonzero_count(int(k)) for k in row] for row in lc.weight_mantissas],
            dtype=np.int64,
        )
        csd_total += int((nnz * b_in[:, None]).sum()) + a
        b_in = lc.act_width
    report.csd_weighted_total = csd_total
    return report


def lut_estimate(total: float) -> float:
    """Empirical LUT predictor: exp(0.985 * ln(total)); 0 for an empty model."""
    if total <= 0:
        return 0.0
    return math.exp(0.985 * math.log(total))


def combined_resource(lut: float, dsp: float, dsp_coefficient: float = 55.0) -> float:
    """Fold a synthesis report into one number comparable to the bit-op total.

    The coefficient is part-family specific (55 fits recent UltraScale+
    results); this is for reporting only and feeds back into nothing.
    """
    return float(lut) + dsp_coefficient * float(dsp)
