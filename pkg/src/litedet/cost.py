"""Exact parameter and multiply-accumulate accounting.

Convolutions are the only costed ops: params = c_out * (c_in / groups) * k_h * k_w
(+ c_out bias), MACs = weight params * n * H_out * W_out. Pooling, activations,
concat, split, add and upsample cost nothing. FLOPs are reported as 2 * MACs.
"""

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

from .blocks import block_kind
from .errors import GraphError, ShapeError
from .graph import shape_provider, trace_graph
from .trace import Tracer

FLOPS_CONVENTION = "GFLOPs = 2 * MACs / 1e9; elementwise ops excluded"


@dataclass(frozen=True)
class LayerCost:
    node: str
    kind: str
    params: int
    macs: int
    output_shape: Tuple


@dataclass(frozen=True)
class CostReport:
    layers: Tuple[LayerCost, ...]
    input_shape: Tuple[int, int, int, int]

    @property
    def total_params(self):
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self):
        return sum(l.macs for l in self.layers)

    @property
    def gflops(self):
        return 2 * self.total_macs / 1e9

    def layer(self, node):
        return next(l for l in self.layers if l.node == node)

    def to_dict(self):
        return {"input_shape": list(self.input_shape),
                "convention": FLOPS_CONVENTION,
                "layers": [dict(asdict(l), output_shape=_jsonable(l.output_shape)) for l in self.layers],
                "total_params": self.total_params,
                "total_macs": self.total_macs,
                "gflops": self.gflops}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        layers = tuple(LayerCost(l["node"], l["kind"], int(l["params"]), int(l["macs"]),
                                 _tuplify(l["output_shape"])) for l in d["layers"])
        return cls(layers, tuple(d["input_shape"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _jsonable(shape):
    if isinstance(shape, dict):
        return {k: list(v) for k, v in shape.items()}
    return list(shape)


def _tuplify(shape):
    if isinstance(shape, dict):
        return {k: tuple(v) for k, v in shape.items()}
    return tuple(shape)


def _sum_records(records):
    return sum(r.params for r in records), sum(r.macs for r in records)


def layer_cost(node, input_shape, attrs=None):
    """Cost of one graph node given its input shape (or list of shapes)."""
    cls = block_kind(node.kind)
    a = cls.normalize(node.attrs) if attrs is None else attrs
    shapes = [input_shape] if isinstance(input_shape[0], int) else list(input_shape)
    tracer = Tracer()
    tracer.node = node.id
    ins = [tracer.input(tuple(s)) for s in shapes]
    out = ins[0] if node.kind == "input" else cls.build(a, shape_provider(node.id)).forward(*ins)
    params, macs = _sum_records(tracer.convs)
    return LayerCost(node.id, node.kind, params, macs, _out_shape(cls, a, out))


def _out_shape(cls, a, out):
    if isinstance(out, list):
        flat = [t.shape for pair in out for t in pair]
        return dict(zip(cls.output_names(a), flat))
    return tuple(out.shape)


def graph_cost(g, input_shape=None):
    """Shape-propagate the graph and cost every node."""
    shape = tuple(input_shape or g.input_shape or ())
    if not g.nodes:
        return CostReport((), shape)
    tr = trace_graph(g, shape)
    by_node = {}
    for r in tr.tracer.convs:
        by_node.setdefault(r.node, []).append(r)
    layers = []
    for nid in g.order:
        n = g.node(nid)
        cls = block_kind(n.kind)
        params, macs = _sum_records(by_node.get(nid, []))
        if nid in tr.values:
            out = tuple(tr.values[nid].shape)
        else:
            out = {k.split("/", 1)[1]: tuple(v.shape) for k, v in tr.values.items()
                   if k.startswith(nid + "/")}
        layers.append(LayerCost(nid, n.kind, params, macs, out))
    return CostReport(tuple(layers), shape)


@dataclass(frozen=True)
class DeltaRow:
    node: str
    params_a: int
    params_b: int
    macs_a: int
    macs_b: int

    @property
    def d_params(self):
        return self.params_b - self.params_a

    @property
    def d_macs(self):
        return self.macs_b - self.macs_a

    @property
    def pct_params(self):
        return _pct(self.d_params, self.params_a)

    @property
    def pct_macs(self):
        return _pct(self.d_macs, self.macs_a)


def _pct(delta, base):
    if base == 0:
        return 0.0 if delta == 0 else None
    return 100.0 * delta / base


@dataclass(frozen=True)
class CostDelta:
    rows: Tuple[DeltaRow, ...]
    total: DeltaRow
    input_shape: Tuple[int, ...]

    def to_dict(self):
        def row(r):
            return {"node": r.node, "params_a": r.params_a, "params_b": r.params_b,
                    "d_params": r.d_params, "pct_params": _round2(r.pct_params),
                    "macs_a": r.macs_a, "macs_b": r.macs_b,
                    "d_macs": r.d_macs, "pct_macs": _round2(r.pct_macs)}
        return {"input_shape": list(self.input_shape), "rows": [row(r) for r in self.rows],
                "total": row(self.total)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _round2(v):
    return None if v is None else round(v, 2)


def compare_reports(a, b):
    """Per-node and total deltas (b - a), ordered by a's layers then b's extras."""
    if tuple(a.input_shape) != tuple(b.input_shape):
        raise ShapeError(f"reports computed at different input shapes {tuple(a.input_shape)} "
                         f"vs {tuple(b.input_shape)}", dim="input_shape",
                         expected=tuple(a.input_shape), actual=tuple(b.input_shape))
    la = {l.node: l for l in a.layers}
    lb = {l.node: l for l in b.layers}
    names = [l.node for l in a.layers] + [l.node for l in b.layers if l.node not in la]
    rows = []
    for name in names:
        x, y = la.get(name), lb.get(name)
        rows.append(DeltaRow(name, x.params if x else 0, y.params if y else 0,
                             x.macs if x else 0, y.macs if y else 0))
    total = DeltaRow("TOTAL", a.total_params, b.total_params, a.total_macs, b.total_macs)
    return CostDelta(tuple(rows), total, tuple(a.input_shape))


def _fmt_pct(v):
    return "n/a" if v is None else f"{v:+.2f}%"


def render_report(r):
    head = ("node", "kind", "params", "MACs", "output")
    rows = []
    for l in r.layers:
        out = l.output_shape
        if isinstance(out, dict):
            out = f"{len(out)} maps"
        else:
            out = "x".join(map(str, out))
        rows.append((l.node, l.kind, str(l.params), str(l.macs), out))
    rows.append(("TOTAL", "", str(r.total_params), str(r.total_macs), f"{r.gflops:.4f} GFLOPs"))
    return _table(head, rows, right=(2, 3))


def render_delta(d):
    head = ("node", "params_a", "params_b", "d_params", "%params", "macs_a", "macs_b", "d_macs", "%macs")
    rows = [(r.node, str(r.params_a), str(r.params_b), f"{r.d_params:+d}", _fmt_pct(r.pct_params),
             str(r.macs_a), str(r.macs_b), f"{r.d_macs:+d}", _fmt_pct(r.pct_macs))
            for r in d.rows + (d.total,)]
    return _table(head, rows, right=tuple(range(1, 9)))


def _table(head, rows, right=()):
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    lines = []
    for row in (head,) + tuple(rows):
        cells = [c.rjust(w) if i in right else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
