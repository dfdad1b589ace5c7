"""Text serialization of lowered graphs.

Grammar (one item per line, ';' starts a comment, blank lines ignored):

    fxpir v1
    input %<id> : <format-token>
    %<id> = shift %<a>, <int>            : <width>
    %<id> = add %<a>, %<b>               : <width>
    %<id> = sub %<a>, %<b>               : <width>
    %<id> = neg %<a>                     : <width>
    %<id> = clip %<a>, <int|*>, <int|*>  : <width>
    %<id> = wrap %<a>, <bits>, <s|u>     : <width>
    %<id> = round_const_add <%a|none>, <int> : <width>
    output %<id> : <format-token>

<format-token> is the quantizer token, e.g. s3.4:RND:WRAP.  <width> is the
planned two's-complement width of the node, 's'- or 'u'-prefixed (e.g. s13);
the parser replans intervals and rejects a file whose annotations disagree.
Ids are dense and in definition order: inputs first, then nodes.
"""

from __future__ import annotations

import re

from .fxp import FixedPointFormat
from .lowering import FxpGraph

HEADER = "fxpir v1"

_INPUT_RE = re.compile(r"^input %(\d+) : (\S+)$")
_OUTPUT_RE = re.compile(r"^output %(\d+) : (\S+)$")
_NODE_RE = re.compile(r"^%(\d+) = (\w+) (.*?) : ([su])(\d+)$")


class IRError(ValueError):
    pass


def _width_token(g: FxpGraph, nid: int) -> str:
    signed, bits = g.node_width(nid)
    return f"{'s' if signed else 'u'}{bits}"


def emit_ir(g: FxpGraph) -> str:
    lines = [HEADER]
    for nid, fmt in enumerate(g.input_formats):
        lines.append(f"input %{nid} : {fmt.token()}")
    for k, node in enumerate(g.nodes):
        nid = g.n_inputs + k
        if node.op in ("add", "sub"):
            body = f"{node.op} %{node.args[0]}, %{node.args[1]}"
        elif node.op == "neg":
            body = f"neg %{node.args[0]}"
        elif node.op == "shift":
            body = f"shift %{node.args[0]}, {node.attrs[0]}"
        elif node.op == "clip":
            lo = "*" if node.attrs[0] is None else str(node.attrs[0])
            hi = "*" if node.attrs[1] is None else str(node.attrs[1])
            body = f"clip %{node.args[0]}, {lo}, {hi}"
        elif node.op == "wrap":
            bits, signed = node.attrs
            body = f"wrap %{node.args[0]}, {bits}, {'s' if signed else 'u'}"
        elif node.op == "round_const_add":
            src = "none" if node.args[0] is None else f"%{node.args[0]}"
            body = f"round_const_add {src}, {node.attrs[0]}"
        else:
            raise IRError(f"cannot emit op {node.op!r}")
        lines.append(f"%{nid} = {body} : {_width_token(g, nid)}")
    for nid, fmt in g.outputs:
        lines.append(f"output %{nid} : {fmt.token()}")
    return "\n".join(lines) + "\n"


def _ref(tok: str) -> int:
    if not tok.startswith("%"):
        raise IRError(f"expected %id, got {tok!r}")
    return int(tok[1:])


def parse_ir(text: str) -> FxpGraph:
    lines = []
    for raw in text.splitlines():
        line = raw.split(";", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines or lines[0] != HEADER:
        raise IRError(f"missing header {HEADER!r}")
    g = FxpGraph()
    phase = "input"
    for line in lines[1:]:
        m = _INPUT_RE.match(line)
        if m:
            if phase != "input":
                raise IRError("inputs must precede nodes")
            nid = g.add_input(FixedPointFormat.from_token(m.group(2)))
            if nid != int(m.group(1)):
                raise IRError(f"input id %{m.group(1)} out of order")
            continue
        m = _OUTPUT_RE.match(line)
        if m:
            phase = "output"
            nid = int(m.group(1))
            if not 0 <= nid < g.n_inputs + len(g.nodes):
                raise IRError(f"output references undefined %{nid}")
            g.mark_output(nid, FixedPointFormat.from_token(m.group(2)))
            continue
        m = _NODE_RE.match(line)
        if m is None:
            raise IRError(f"cannot parse line {line!r}")
        if phase == "output":
            raise IRError("node after outputs")
        phase = "node"
        stated_id, op, body, wsign, wbits = m.groups()
        parts = [p.strip() for p in body.split(",")]
        if op in ("add", "sub"):
            nid = g.add_node(op, (_ref(parts[0]), _ref(parts[1])))
        elif op == "neg":
            nid = g.add_node(op, (_ref(parts[0]),))
        elif op == "shift":
            nid = g.add_node(op, (_ref(parts[0]),), (int(parts[1]),))
        elif op == "clip":
            lo = None if parts[1] == "*" else int(parts[1])
            hi = None if parts[2] == "*" else int(parts[2])
            nid = g.add_node(op, (_ref(parts[0]),), (lo, hi))
        elif op == "wrap":
            if parts[2] not in ("s", "u"):
                raise IRError(f"bad wrap signedness {parts[2]!r}")
            nid = g.add_node(op, (_ref(parts[0]),), (int(parts[1]), parts[2] == "s"))
        elif op == "round_const_add":
            src = None if parts[0] == "none" else _ref(parts[0])
            nid = g.add_node(op, (src,), (int(parts[1]),))
        else:
            raise IRError(f"unknown op {op!r}")
        if nid != int(stated_id):
            raise IRError(f"node id %{stated_id} out of order (expected %{nid})")
        signed, bits = g.node_width(nid)
        if (wsign == "s") != signed or int(wbits) != bits:
            raise IRError(
                f"width annotation {wsign}{wbits} on %{nid} disagrees with "
                f"replanned {'s' if signed else 'u'}{bits}"
            )
    return g
