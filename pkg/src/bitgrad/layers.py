"""Quantized dense layers and the model container.

Training semantics per layer: quantize weights (straight-through), exact
float64 matmul, add the bias quantized to the accumulator's derived format,
ReLU on hidden layers, then requantize through the layer's activation
quantizer.  ReLU runs before requantization; for round-to-nearest-ties-up
and floor the two orders agree exactly, and unsigned activation formats
require the quantizer to see non-negative values.

Deployment semantics (deploy_forward) evaluate a calibrated model with
integer mantissas in float64; every intermediate is an exact dyadic, so the
result is bit-identical to the integer interpreter over the lowered graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fxp
from .autodiff import Tensor, add, matmul, relu
from .fxp import FixedPointFormat, QuantizerState


def quantize_t(x: Tensor, state: QuantizerState) -> Tensor:
    """Autodiff node wrapping the training-mode quantizer."""
    y, trace = fxp.quantize_train_forward(x.data, state)
    parents = [x, state.f_cont]
    if state.i_cont is not None:
        parents.append(state.i_cont)
    out = Tensor(y, parents)

    def _bwd(o):
        g = fxp.quantize_backward(trace, o.grad, state)
        x._accum(g.grad_wrt_input)
        state.f_cont._accum(g.grad_wrt_f)
        if g.grad_wrt_i is not None:
            state.i_cont._accum(g.grad_wrt_i)

    out._backward = _bwd
    return out


def quantize_bias_t(bias: Tensor, frac_bits: np.ndarray) -> Tensor:
    """Round the bias onto a fixed per-lane grid, straight-through gradient."""
    F = np.asarray(frac_bits, dtype=np.int64)
    k = fxp._round_to_int(np.ldexp(bias.data, F), "RND")
    out = Tensor(np.ldexp(k, -F), (bias,))
    out._backward = lambda o: bias._accum(o.grad)
    return out


class QDense:
    """Dense layer with quantized weights, derived-format bias, and an
    output quantizer whose format is learned.

    The bias grid is f_acc(j) = max_i (f_w(i,j) + f_in(i)), the exact
    fractional width of the accumulated products, which keeps the
    accumulator on a single grid and makes the rounding constant fusable
    at lowering time.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        weight_q: QuantizerState,
        act_q: QuantizerState,
        use_relu: bool,
        rng: np.random.Generator,
    ):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
        self.bias = Tensor(np.zeros(n_out))
        self.weight_q = weight_q
        self.act_q = act_q
        self.use_relu = use_relu

    def accum_frac_bits(self, f_in: np.ndarray) -> np.ndarray:
        """Per-lane fractional bits of the exact product accumulator."""
        f_w = self.weight_q.f_used()[self.weight_q.group_index]
        return (f_w + np.asarray(f_in, dtype=np.int64)[:, None]).max(axis=0)

    def forward(self, x: Tensor, f_in: np.ndarray) -> tuple[Tensor, np.ndarray]:
        wq = quantize_t(self.weight, self.weight_q)
        bq = quantize_bias_t(self.bias, self.accum_frac_bits(f_in))
        acc = add(matmul(x, wq), bq)
        if self.use_relu:
            acc = relu(acc)
        out = quantize_t(acc, self.act_q)
        f_out = self.act_q.f_used()[self.act_q.group_index]
        return out, f_out


class QModel:
    """A stack of QDense layers behind a fixed-format input quantizer."""

    def __init__(self, input_format: FixedPointFormat, layers: list[QDense]):
        self.input_format = input_format
        self.layers = layers

    @classmethod
    def mlp(
        cls,
        layer_sizes: list[int],
        seed: int = 0,
        weight_granularity: str = "per_parameter",
        act_granularity: str = "per_channel",
        weight_f_init: float = 2.0,
        act_f_init: float = 4.0,
        act_i_init: float = 2.0,
        round_mode: str = "RND",
        act_overflow: str = "WRAP",
        input_format: str | FixedPointFormat = "s3.8:RND:SAT",
        rounded_sat_bounds: bool = True,
    ) -> "QModel":
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if isinstance(input_format, str):
            input_format = FixedPointFormat.from_token(input_format)
        rng = np.random.default_rng(seed)
        layers = []
        for li in range(len(layer_sizes) - 1):
            n_in, n_out = layer_sizes[li], layer_sizes[li + 1]
            last = li == len(layer_sizes) - 2
            weight_q = QuantizerState(
                fxp.make_group_index((n_in, n_out), weight_granularity),
                signed=True,
                round_mode=round_mode,
                overflow_mode="WRAP",
                f_init=weight_f_init,
                granularity=weight_granularity,
            )
            act_q = QuantizerState(
                fxp.make_group_index((n_out,), act_granularity),
                signed=last,  # hidden lanes are post-ReLU, hence unsigned
                round_mode=round_mode,
                overflow_mode=act_overflow,
                f_init=act_f_init,
                i_init=act_i_init,
                granularity=act_granularity,
                rounded_sat_bounds=rounded_sat_bounds,
            )
            layers.append(QDense(n_in, n_out, weight_q, act_q, not last, rng))
        return cls(input_format, layers)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def forward(self, x: np.ndarray) -> Tensor:
        xq = Tensor(fxp.quantize_deploy(x, self.input_format))
        f_in = np.full(self.layers[0].n_in, self.input_format.frac_bits, dtype=np.int64)
        h = xq
        for layer in self.layers:
            h, f_in = layer.forward(h, f_in)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).data

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def bitwidth_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += layer.weight_q.trainable_tensors()
            out += layer.act_q.trainable_tensors()
        return out

    def quantizer_states(self) -> list[QuantizerState]:
        out = []
        for layer in self.layers:
            out += [layer.weight_q, layer.act_q]
        return out

    def reset_stats(self):
        for s in self.quantizer_states():
            s.reset_stats()

    # ---- snapshot / restore (deep copies, for Pareto checkpoints) ----

    def state_arrays(self) -> dict:
        st = {}
        for li, layer in enumerate(self.layers):
            st[f"layer{li}.weight"] = layer.weight.data.copy()
            st[f"layer{li}.bias"] = layer.bias.data.copy()
            st[f"layer{li}.weight_q.f_cont"] = layer.weight_q.f_cont.data.copy()
            st[f"layer{li}.weight_q.max"] = layer.weight_q.running_max_abs.copy()
            st[f"layer{li}.act_q.f_cont"] = layer.act_q.f_cont.data.copy()
            st[f"layer{li}.act_q.max"] = layer.act_q.running_max_abs.copy()
            if layer.act_q.i_cont is not None:
                st[f"layer{li}.act_q.i_cont"] = layer.act_q.i_cont.data.copy()
        return st

    def load_state_arrays(self, st: dict):
        for li, layer in enumerate(self.layers):
            layer.weight.data = st[f"layer{li}.weight"].copy()
            layer.bias.data = st[f"layer{li}.bias"].copy()
            layer.weight_q.f_cont.data = st[f"layer{li}.weight_q.f_cont"].copy()
            layer.weight_q.running_max_abs = st[f"layer{li}.weight_q.max"].copy()
            layer.act_q.f_cont.data = st[f"layer{li}.act_q.f_cont"].copy()
            layer.act_q.running_max_abs = st[f"layer{li}.act_q.max"].copy()
            if layer.act_q.i_cont is not None:
                layer.act_q.i_cont.data = st[f"layer{li}.act_q.i_cont"].copy()


# ---------------------------------------------------------------------------
# calibrated models: integer mantissas + concrete formats, ready to lower


@dataclass
class LayerCalibration:
    weight_mantissas: np.ndarray   # (n_in, n_out) int64
    weight_f: np.ndarray           # (n_in, n_out) int64, per element
    weight_i: np.ndarray           # (n_in, n_out) int64
    weight_width: np.ndarray       # (n_in, n_out) int64, >= 0
    weight_group_index: np.ndarray
    bias_mantissas: np.ndarray     # (n_out,) int64
    bias_f: np.ndarray
    bias_i: np.ndarray
    bias_width: np.ndarray
    act_signed: bool
    act_i: np.ndarray              # (n_out,) int64, per lane
    act_f: np.ndarray
    act_width: np.ndarray
    act_group_index: np.ndarray
    act_round_mode: str
    act_overflow_mode: str
    use_relu: bool


@dataclass
class CalibratedModel:
    input_format: FixedPointFormat
    layers: list[LayerCalibration]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].weight_mantissas.shape[0]] + [
            l.weight_mantissas.shape[1] for l in self.layers
        ]


def deploy_forward(cm: CalibratedModel, x: np.ndarray) -> np.ndarray:
    """Deployment-semantics forward pass of a calibrated model.

    Pure float64, but every intermediate is an exact dyadic rational (the
    calibration pass asserts accumulators stay under 2**52), so the output
    equals the integer interpreter on the lowered graph bit for bit.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = fxp.quantize_deploy(x, cm.input_format)
    for lc in cm.layers:
        wq = np.ldexp(lc.weight_mantissas.astype(np.float64), -lc.weight_f)
        bq = np.ldexp(lc.bias_mantissas.astype(np.float64), -lc.bias_f)
        acc = h @ wq + bq
        if lc.use_relu:
            acc = np.maximum(acc, 0.0)
        h = fxp.quantize_elementwise(
            acc, int(lc.act_signed), lc.act_i, lc.act_f,
            lc.act_round_mode, lc.act_overflow_mode,
        )
    return h
