"""Lower a calibrated model to an integer shift-add graph.

Every node computes an integer mantissa.  Constant multiplications become
CSD shift-add chains; products are aligned to the lane's accumulator grid
(f_acc = max over the lane's products of f_w + f_in) and combined by a fixed
left-to-right balanced tree; the bias and, when the output grid is coarser,
the round-to-nearest half-LSB offset are pre-fused into one constant added
before ReLU (fusing before ReLU is exact: the offset is under one output
LSB, so it cannot push a negative accumulator past zero's rounding cell).
Requantization is then a single arithmetic shift, and the overflow step a
wrap or clip.  Width planning is interval arithmetic over mantissa ranges:
every node's declared width covers its exact result, which the interpreters
check at run time.

Node ops: shift (left if positive, arithmetic right if negative), add, sub,
neg, clip (bounds optional: relu and saturation), wrap (two's complement),
round_const_add (add an integer constant; operand None makes a constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fxp import FixedPointFormat
from .layers import CalibratedModel
from .resource import csd_encode


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple            # node ids (int) or None
    attrs: tuple = ()


@dataclass(frozen=True)
class FxpValue:
    mantissa: int
    fmt: FixedPointFormat

    def __post_init__(self):
        if not (self.fmt.mantissa_lo <= self.mantissa <= self.fmt.mantissa_hi):
            raise ValueError(
                f"mantissa {self.mantissa} outside {self.fmt.token()} range"
            )

    @property
    def value(self) -> float:
        return float(np.ldexp(float(self.mantissa), -self.fmt.frac_bits))


def width_for_interval(lo: int, hi: int) -> tuple[bool, int]:
    """(signed, bits) of the narrowest two's-complement span covering [lo, hi]."""
    if lo < 0:
        bits = 1 + max(hi.bit_length() if hi > 0 else 0, (-lo - 1).bit_length())
        return True, bits
    return False, hi.bit_length()


class FxpGraph:
    """SSA-ish integer dataflow graph; ids are dense and creation-ordered."""

    def __init__(self):
        self.input_formats: list[FixedPointFormat] = []
        self.nodes: list[Node] = []          # node k has id = n_inputs + k
        self.outputs: list[tuple[int, FixedPointFormat]] = []
        self.intervals: dict[int, tuple[int, int]] = {}

    @property
    def n_inputs(self) -> int:
        return len(self.input_formats)

    def add_input(self, fmt: FixedPointFormat) -> int:
        nid = len(self.input_formats)
        if self.nodes:
            raise ValueError("inputs must be declared before nodes")
        self.input_formats.append(fmt)
        self.intervals[nid] = (fmt.mantissa_lo, fmt.mantissa_hi)
        return nid

    def add_node(self, op: str, args: tuple, attrs: tuple = ()) -> int:
        nid = self.n_inputs + len(self.nodes)
        for a in args:
            if a is not None and not (0 <= a < nid):
                raise ValueError(f"node arg {a} not yet defined")
        self.nodes.append(Node(op, args, attrs))
        self.intervals[nid] = self._propagate(op, args, attrs)
        return nid

    def mark_output(self, nid: int, fmt: FixedPointFormat):
        self.outputs.append((nid, fmt))

    def _iv(self, nid):
        return self.intervals[nid]

    def _propagate(self, op, args, attrs):
        if op == "shift":
            lo, hi = self._iv(args[0])
            k = attrs[0]
            if k >= 0:
                return lo << k, hi << k
            return lo >> -k, hi >> -k
        if op == "add":
            (a0, a1), (b0, b1) = self._iv(args[0]), self._iv(args[1])
            return a0 + b0, a1 + b1
        if op == "sub":
            (a0, a1), (b0, b1) = self._iv(args[0]), self._iv(args[1])
            return a0 - b1, a1 - b0
        if op == "neg":
            lo, hi = self._iv(args[0])
            return -hi, -lo
        if op == "clip":
            lo, hi = self._iv(args[0])
            clo, chi = attrs
            if clo is not None:
                lo, hi = max(lo, clo), max(hi, clo)
            if chi is not None:
                lo, hi = min(lo, chi), min(hi, chi)
            return lo, hi
        if op == "wrap":
            bits, signed = attrs
            lo, hi = self._iv(args[0])
            wlo = -(1 << bits) if signed else 0
            whi = (1 << bits) - 1
            if wlo <= lo and hi <= whi:
                return lo, hi  # statically in range
            return wlo, whi
        if op == "round_const_add":
            c = attrs[0]
            if args[0] is None:
                return c, c
            lo, hi = self._iv(args[0])
            return lo + c, hi + c
        raise ValueError(f"unknown op {op!r}")

    def node_width(self, nid: int) -> tuple[bool, int]:
        return width_for_interval(*self.intervals[nid])

    def max_bits(self) -> int:
        return max(
            (self.node_width(i)[1] for i in self.intervals), default=0
        )

    def __eq__(self, other):
        if not isinstance(other, FxpGraph):
            return NotImplemented
        return (
            self.input_formats == other.input_formats
            and self.nodes == other.nodes
            and self.outputs == other.outputs
        )


def _combine_balanced(g: FxpGraph, terms: list[tuple[int, int]]) -> tuple[int, int]:
    """Reduce [(node, sign)] with a left-to-right balanced add/sub tree."""
    while len(terms) > 1:
        nxt = []
        for k in range(0, len(terms) - 1, 2):
            (a, sa), (b, sb) = terms[k], terms[k + 1]
            if sa == sb:
                nxt.append((g.add_node("add", (a, b)), sa))
            elif sa > 0:
                nxt.append((g.add_node("sub", (a, b)), 1))
            else:
                nxt.append((g.add_node("sub", (b, a)), 1))
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


def lower(cm: CalibratedModel) -> FxpGraph:
    g = FxpGraph()
    lane_ids = [g.add_input(cm.input_format) for _ in range(cm.layer_sizes[0])]
    lane_f = [cm.input_format.frac_bits] * cm.layer_sizes[0]

    for lc in cm.layers:
        n_in, n_out = lc.weight_mantissas.shape
        f_acc = lc.bias_f  # bias grid == accumulator grid by construction
        next_ids, next_f = [], []
        for j in range(n_out):
            terms: list[tuple[int, int]] = []
            for i in range(n_in):
                k = int(lc.weight_mantissas[i, j])
                if k == 0:
                    continue
                align = int(f_acc[j]) - int(lc.weight_f[i, j]) - lane_f[i]
                assert align >= 0
                for pos, digit in enumerate(csd_encode(k)):
                    if digit == 0:
                        continue
                    shift = pos + align
                    src = (
                        lane_ids[i]
                        if shift == 0
                        else g.add_node("shift", (lane_ids[i],), (shift,))
                    )
                    terms.append((src, digit))
            d = int(f_acc[j]) - int(lc.act_f[j])
            const = int(lc.bias_mantissas[j])
            if lc.act_round_mode == "RND" and d > 0:
                const += 1 << (d - 1)
            if terms:
                acc, sign = _combine_balanced(g, terms)
                if sign < 0:
                    acc = g.add_node("neg", (acc,))
                if const != 0:
                    acc = g.add_node("round_const_add", (acc,), (const,))
            else:
                acc = g.add_node("round_const_add", (None,), (const,))
            if lc.use_relu:
                acc = g.add_node("clip", (acc,), (0, None))
            if d != 0:
                acc = g.add_node("shift", (acc,), (-d,))
            s, i, f = int(lc.act_signed), int(lc.act_i[j]), int(lc.act_f[j])
            if s + i + f <= 0:
                acc = g.add_node("clip", (acc,), (0, 0))  # width-0 lane
            elif lc.act_overflow_mode == "SAT":
                acc = g.add_node(
                    "clip", (acc,), (-s * (1 << (i + f)), (1 << (i + f)) - 1)
                )
            else:
                acc = g.add_node("wrap", (acc,), (i + f, bool(s)))
            next_ids.append(acc)
            next_f.append(f)
        lane_ids, lane_f = next_ids, next_f

    for j, nid in enumerate(lane_ids):
        lc = cm.layers[-1]
        g.mark_output(
            nid,
            FixedPointFormat(
                lc.act_signed, int(lc.act_i[j]), int(lc.act_f[j]),
                lc.act_round_mode, lc.act_overflow_mode,
            ),
        )
    return g


def _wrap_int(v: int, bits: int, signed: bool) -> int:
    span = 1 << (bits + int(signed))
    lo = -(1 << bits) if signed else 0
    return (v - lo) % span + lo


def interpret(g: FxpGraph, inputs: list[FxpValue]) -> list[FxpValue]:
    """Evaluate one sample with exact Python integers, checking every
    intermediate against its planned interval."""
    if len(inputs) != g.n_inputs:
        raise ValueError(f"expected {g.n_inputs} inputs, got {len(inputs)}")
    vals: dict[int, int] = {}
    for nid, (fv, fmt) in enumerate(zip(inputs, g.input_formats)):
        if fv.fmt.token() != fmt.token():
            raise ValueError(f"input {nid} format {fv.fmt.token()} != {fmt.token()}")
        vals[nid] = fv.mantissa
    for k, node in enumerate(g.nodes):
        nid = g.n_inputs + k
        a = node.args
        if node.op == "shift":
            s = node.attrs[0]
            v = vals[a[0]] << s if s >= 0 else vals[a[0]] >> -s
        elif node.op == "add":
            v = vals[a[0]] + vals[a[1]]
        elif node.op == "sub":
            v = vals[a[0]] - vals[a[1]]
        elif node.op == "neg":
            v = -vals[a[0]]
        elif node.op == "clip":
            lo, hi = node.attrs
            v = vals[a[0]]
            v = v if lo is None else max(v, lo)
            v = v if hi is None else min(v, hi)
        elif node.op == "wrap":
            v = _wrap_int(vals[a[0]], *node.attrs)
        elif node.op == "round_const_add":
            v = (0 if a[0] is None else vals[a[0]]) + node.attrs[0]
        else:
            raise ValueError(f"unknown op {node.op!r}")
        lo, hi = g.intervals[nid]
        if not (lo <= v <= hi):
            raise AssertionError(f"node %{nid} value {v} outside planned [{lo},{hi}]")
        vals[nid] = v
    return [FxpValue(vals[nid], fmt) for nid, fmt in g.outputs]


def interpret_batch(g: FxpGraph, X: np.ndarray, check: bool = True) -> np.ndarray:
    """Evaluate many samples at once on int64 mantissas.

    X is (batch, n_inputs) integer mantissas; returns (batch, n_outputs).
    Falls back on the planner to guarantee int64 cannot overflow; values are
    freed as soon as their last consumer ran to bound the working set.
    """
    if g.max_bits() > 62:
        raise ValueError("planned widths exceed int64; use interpret() per sample")
    X = np.asarray(X, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != g.n_inputs:
        raise ValueError(f"need (batch, {g.n_inputs}) mantissas")
    last_use = {}
    for k, node in enumerate(g.nodes):
        for a in node.args:
            if a is not None:
                last_use[a] = g.n_inputs + k
    for nid, _ in g.outputs:
        last_use[nid] = 1 << 62

    vals: dict[int, np.ndarray] = {}
    for nid in range(g.n_inputs):
        lo, hi = g.intervals[nid]
        col = X[:, nid]
        if check and ((col < lo).any() or (col > hi).any()):
            raise ValueError(f"input {nid} mantissa outside format range")
        vals[nid] = col
    for k, node in enumerate(g.nodes):
        nid = g.n_inputs + k
        a = node.args
        if node.op == "shift":
            s = node.attrs[0]
            v = vals[a[0]] << s if s >= 0 else vals[a[0]] >> -s
        elif node.op == "add":
            v = vals[a[0]] + vals[a[1]]
        elif node.op == "sub":
            v = vals[a[0]] - vals[a[1]]
        elif node.op == "neg":
            v = -vals[a[0]]
        elif node.op == "clip":
            lo_c, hi_c = node.attrs
            v = vals[a[0]]
            if lo_c is not None:
                v = np.maximum(v, lo_c)
            if hi_c is not None:
                v = np.minimum(v, hi_c)
        elif node.op == "wrap":
            bits, signed = node.attrs
            span = 1 << (bits + int(signed))
            lo_w = -(1 << bits) if signed else 0
            v = (vals[a[0]] - lo_w) % span + lo_w
        elif node.op == "round_const_add":
            base = 0 if a[0] is None else vals[a[0]]
            v = base + node.attrs[0]
            if a[0] is None:
                v = np.full(X.shape[0], v, dtype=np.int64)
        else:
            raise ValueError(f"unknown op {node.op!r}")
        if check:
            lo, hi = g.intervals[nid]
            if v.size and (int(v.min()) < lo or int(v.max()) > hi):
                raise AssertionError(f"node %{nid} outside planned [{lo},{hi}]")
        vals[nid] = v
        for arg in a:
            if arg is not None and last_use.get(arg) == nid:
                del vals[arg]
    return np.stack([vals[nid] for nid, _ in g.outputs], axis=1)


def adder_count(g: FxpGraph) -> int:
    """Two-input adders in the graph (add/sub nodes)."""
    return sum(1 for n in g.nodes if n.op in ("add", "sub"))
