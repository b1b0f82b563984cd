"""Declarative model graphs, weight stores and the forward executor.

Graph file (UTF-8 JSON)::

    {"meta": {"input_shape": [n, c, h, w], "num_classes": k},
     "nodes": [{"id": "stem", "kind": "hgstem", "attrs": {...}, "inputs": ["in"]}, ...],
     "outputs": ["head"]}

Weight file: ``b"LDW0"``, u32 manifest length, JSON manifest, little-endian
float32 blob, u32 CRC-32 of the blob. Manifest entries map
``"nodeId.sub.weight"`` style keys to ``{"shape", "offset", "length"}`` with
offset and length counted in float32 elements.
"""

import hashlib
import heapq
import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .blocks import block_kind, uniform_weight
from .errors import ConfigError, CorruptionError, GraphError, ShapeError, WeightError
from .rng import SplitMix64
from .tensor import Tensor4
from .trace import Tracer, shape_only_params

_ID_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    attrs: dict
    inputs: Tuple[str, ...]


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """A validated DAG of block nodes.

    ``attrs`` on each node is kept exactly as written; ``normalized`` holds the
    explicit form every other module works with.
    """

    nodes: Tuple[Node, ...]
    outputs: Tuple[str, ...]
    meta: dict
    order: Tuple[str, ...] = field(default=())
    normalized: Mapping[str, dict] = field(default_factory=dict)
    channels: Mapping[str, Optional[int]] = field(default_factory=dict)

    def node(self, node_id):
        return self._by_id[node_id]

    @cached_property
    def _by_id(self):
        return {n.id: n for n in self.nodes}

    @property
    def input_shape(self):
        return tuple(self.meta.get("input_shape", ()))

    def conv_specs(self, node_id):
        """Declared convs of a node with full parameter names."""
        n = self.node(node_id)
        cls = block_kind(n.kind)
        return [(param_name(node_id, s.sub), s) for s in cls.conv_specs(self.normalized[node_id])]

    def param_keys(self):
        """Every weight-store key this graph declares, in init order."""
        keys = []
        for nid in self.order:
            for name, spec in self.conv_specs(nid):
                keys.append(f"{name}.weight")
                if spec.bias:
                    keys.append(f"{name}.bias")
        return keys

    def to_dict(self):
        return {"meta": self.meta,
                "nodes": [{"id": n.id, "kind": n.kind, "attrs": n.attrs, "inputs": list(n.inputs)}
                          for n in self.nodes],
                "outputs": list(self.outputs)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def param_name(node_id, sub):
    return f"{node_id}.{sub}" if sub else node_id


def load_graph(text):
    """Parse and validate a graph JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError(f"graph JSON parse error at line {e.lineno} col {e.colno}: {e.msg}") from None
    return graph_from_dict(doc)


def load_graph_file(path):
    return load_graph(Path(path).read_text(encoding="utf-8"))


def graph_from_dict(doc):
    if not isinstance(doc, dict):
        raise GraphError("graph document must be a JSON object")
    meta = dict(doc.get("meta", {}))
    raw_nodes = doc.get("nodes", [])
    if not isinstance(raw_nodes, list):
        raise GraphError("'nodes' must be a list")
    nodes, seen = [], set()
    for i, rn in enumerate(raw_nodes):
        if not isinstance(rn, dict) or "id" not in rn or "kind" not in rn:
            raise GraphError(f"node #{i} needs 'id' and 'kind'")
        nid = rn["id"]
        if not isinstance(nid, str) or not _ID_RE.match(nid):
            raise GraphError(f"node #{i}: id {nid!r} must match [A-Za-z0-9_-]+", [str(nid)])
        if nid in seen:
            raise GraphError(f"duplicate node id '{nid}'", [nid])
        seen.add(nid)
        inputs = rn.get("inputs", [])
        if not isinstance(inputs, list) or not all(isinstance(s, str) for s in inputs):
            raise GraphError(f"node '{nid}': inputs must be a list of node ids", [nid])
        nodes.append(Node(nid, rn["kind"], dict(rn.get("attrs", {})), tuple(inputs)))
    outputs = tuple(doc.get("outputs", []))
    g = ModelGraph(tuple(nodes), outputs, meta)
    return _validate(g)


def _topo_order(nodes):
    index = {n.id: i for i, n in enumerate(nodes)}
    for n in nodes:
        for src in n.inputs:
            if src not in index:
                raise GraphError(f"node '{n.id}' reads unknown node '{src}'", [n.id, src])
    indeg = {n.id: len(n.inputs) for n in nodes}
    users = {n.id: [] for n in nodes}
    for n in nodes:
        for src in n.inputs:
            users[src].append(n.id)
    ready = [index[n.id] for n in nodes if indeg[n.id] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = nodes[heapq.heappop(ready)].id
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, index[u])
    if len(order) < len(nodes):
        src, dst = _find_back_edge(nodes, set(order))
        raise GraphError(f"graph has a cycle: back edge '{src}' -> '{dst}'", [src, dst])
    return tuple(order)


def _find_back_edge(nodes, done):
    by_id = {n.id: n for n in nodes}
    color = {}

    def visit(nid):
        color[nid] = 1
        for src in by_id[nid].inputs:  # data flows src -> nid
            if src in done:
                continue
            if color.get(src) == 1:
                return src, nid
            if src not in color:
                hit = visit(src)
                if hit:
                    return hit
        color[nid] = 2
        return None

    for n in nodes:
        if n.id not in done and n.id not in color:
            hit = visit(n.id)
            if hit:
                # hit is (a, b) with b reading a and a already on the stack
                return hit
    raise AssertionError("cycle reported but not found")


def _validate(g):
    order = _topo_order(g.nodes)
    by_id = {n.id: n for n in g.nodes}
    shape = g.meta.get("input_shape")
    if shape is not None and (len(shape) != 4 or any(int(s) < 1 for s in shape)):
        raise GraphError(f"meta.input_shape must be 4 positive ints, got {shape}")
    normalized, channels = {}, {}
    for nid in order:
        n = by_id[nid]
        try:
            cls = block_kind(n.kind)
            a = cls.normalize(n.attrs)
        except ConfigError as e:
            raise GraphError(f"node '{nid}': {e}", [nid]) from None
        normalized[nid] = a
        if n.kind == "input":
            if n.inputs:
                raise GraphError(f"input node '{nid}' cannot have inputs", [nid])
            c = a.get("c", shape[1] if shape else None)
            if c is None:
                raise GraphError(f"input node '{nid}' needs attrs.c or meta.input_shape", [nid])
            if shape is not None and c != shape[1]:
                raise GraphError(f"input node '{nid}' declares {c} channels, meta.input_shape has "
                                 f"{shape[1]}", [nid])
            channels[nid] = int(c)
            continue
        want_n = cls.num_inputs(a)
        if want_n is not None and len(n.inputs) != want_n:
            raise GraphError(f"node '{nid}' ({n.kind}) takes {want_n} inputs, got {len(n.inputs)}", [nid])
        if not n.inputs:
            raise GraphError(f"node '{nid}' has no inputs", [nid])
        in_chs = []
        for src in n.inputs:
            if channels[src] is None:
                raise GraphError(f"node '{nid}' reads multi-output node '{src}'", [nid, src])
            in_chs.append(channels[src])
        declared = cls.in_channels(a)
        if declared is not None:
            for src, want, got in zip(n.inputs, declared, in_chs):
                if want != got:
                    raise GraphError(
                        f"channel mismatch: node '{nid}' expects {want} input channels but "
                        f"'{src}' produces {got}", [nid, src])
        if n.kind == "add" and in_chs[0] != in_chs[1]:
            raise GraphError(f"channel mismatch: add node '{nid}' sums '{n.inputs[0]}' ({in_chs[0]}) "
                             f"and '{n.inputs[1]}' ({in_chs[1]})", [nid, *n.inputs])
        nc = g.meta.get("num_classes")
        if "num_classes" in a and nc is not None and a["num_classes"] != nc:
            raise GraphError(f"node '{nid}' has num_classes={a['num_classes']}, meta says {nc}", [nid])
        channels[nid] = cls.out_channels(a, in_chs)
    for o in g.outputs:
        if o not in by_id:
            raise GraphError(f"output '{o}' is not a node", [o])
    if sum(1 for n in g.nodes if n.kind == "input") > 1:
        raise GraphError("graph has more than one input node")
    return ModelGraph(g.nodes, g.outputs, g.meta, order, normalized, channels)


# -- weight store -------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    shape: Tuple[int, ...]
    offset: int
    length: int


class WeightStore:
    """Named float32 parameters packed into one little-endian blob."""

    def __init__(self, entries, blob):
        self.entries: Dict[str, Entry] = dict(entries)
        blob = np.ascontiguousarray(blob, dtype="<f4")
        blob.setflags(write=False)
        self.blob = blob
        end = 0
        for key, e in self.entries.items():
            if e.offset != end or e.length != int(np.prod(e.shape, dtype=np.int64)):
                raise CorruptionError(f"entry '{key}' has inconsistent offset/length")
            end += e.length
        if end != blob.size:
            raise CorruptionError(f"entries cover {end} values, blob has {blob.size}")

    @classmethod
    def from_arrays(cls, arrays):
        entries, parts, off = {}, [], 0
        for key, arr in arrays.items():
            a = np.asarray(arr, dtype="<f4")
            entries[key] = Entry(tuple(int(s) for s in a.shape), off, a.size)
            parts.append(a.reshape(-1))
            off += a.size
        blob = np.concatenate(parts) if parts else np.zeros(0, dtype="<f4")
        return cls(entries, blob)

    def __contains__(self, key):
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return list(self.entries)

    def get(self, key):
        try:
            e = self.entries[key]
        except KeyError:
            raise WeightError(f"missing weight '{key}'", key) from None
        return self.blob[e.offset:e.offset + e.length].reshape(e.shape)

    def arrays(self):
        return {k: self.get(k) for k in self.entries}

    @property
    def checksum(self):
        return zlib.crc32(self.blob.tobytes()) & 0xFFFFFFFF

    def manifest(self):
        return {"format": "LDW0", "dtype": "float32-le",
                "entries": {k: {"shape": list(e.shape), "offset": e.offset, "length": e.length}
                            for k, e in self.entries.items()}}

    def to_bytes(self):
        man = json.dumps(self.manifest(), separators=(",", ":")).encode()
        payload = self.blob.tobytes()
        return (b"LDW0" + struct.pack("<I", len(man)) + man + payload
                + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < 12 or buf[:4] != b"LDW0":
            raise CorruptionError("not an LDW0 weight file")
        (mlen,) = struct.unpack_from("<I", buf, 4)
        if 8 + mlen + 4 > len(buf):
            raise CorruptionError("weight file truncated inside the manifest")
        try:
            man = json.loads(buf[8:8 + mlen].decode())
            entries = {k: Entry(tuple(v["shape"]), int(v["offset"]), int(v["length"]))
                       for k, v in man["entries"].items()}
        except (ValueError, KeyError, TypeError) as e:
            raise CorruptionError(f"weight manifest unreadable: {e}") from None
        payload = buf[8 + mlen:-4]
        (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
        expect = sum(e.length for e in entries.values()) * 4
        if len(payload) != expect:
            raise CorruptionError(f"weight blob has {len(payload)} bytes, manifest needs {expect}")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CorruptionError("weight blob CRC-32 mismatch")
        return cls(entries, np.frombuffer(payload, dtype="<f4").copy())


def save_weights(store, path):
    Path(path).write_bytes(store.to_bytes())


def load_weights(path):
    return WeightStore.from_bytes(Path(path).read_bytes())


def init_weights(g, seed):
    """Uniform(+-1/sqrt(fan_in)) weights from one SplitMix64 stream, zero biases.

    Nodes are visited in topological order, convs in declaration order.
    """
    rng = SplitMix64(seed)
    arrays = {}
    for nid in g.order:
        for name, spec in g.conv_specs(nid):
            arrays[f"{name}.weight"] = uniform_weight(rng, spec)
            if spec.bias:
                arrays[f"{name}.bias"] = np.zeros(spec.c_out, dtype=np.float32)
    return WeightStore.from_arrays(arrays)


def store_provider(store, node_id):
    def provide(spec):
        name = param_name(node_id, spec.sub)
        w = store.get(f"{name}.weight")
        if w.shape != spec.weight_shape:
            raise WeightError(f"weight '{name}.weight' has shape {w.shape}, graph declares "
                              f"{spec.weight_shape}", f"{name}.weight")
        b = store.get(f"{name}.bias") if spec.bias else None
        return spec.params(w, b, name=name)
    return provide


def shape_provider(node_id):
    def provide(spec):
        name = param_name(node_id, spec.sub)
        b = shape_only_params((spec.c_out,)) if spec.bias else None
        return spec.params(shape_only_params(spec.weight_shape), b, name=name)
    return provide


# -- execution ------------------------------------------------------------------

def _run(g, x, provider_for, on_node=None, values=None):
    values = {} if values is None else values
    results = {}
    for nid in g.order:
        n = g.node(nid)
        cls = block_kind(n.kind)
        a = g.normalized[nid]
        if on_node:
            on_node(nid)
        if n.kind == "input":
            if x.shape[1] != g.channels[nid]:
                raise ShapeError(f"graph input has {x.shape[1]} channels, node '{nid}' expects "
                                 f"{g.channels[nid]}", dim="c", expected=g.channels[nid], actual=x.shape[1])
            out = x
        else:
            block = cls.build(a, provider_for(nid))
            try:
                out = block.forward(*[values[s] for s in n.inputs])
            except ShapeError as e:
                raise ShapeError(f"node '{nid}': {e}", e.dim, e.expected, e.actual) from None
        if isinstance(out, list):
            names = cls.output_names(a)
            flat = [t for pair in out for t in pair]
            for name, t in zip(names, flat):
                results[f"{nid}/{name}"] = t
            values[nid] = None
        else:
            values[nid] = out
            results[nid] = out
    return results


def forward_graph(g, w, x):
    """Evaluate every node once in topological order; returns id -> Tensor4.

    Multi-output head nodes contribute ``"<id>/cls<p>"`` and ``"<id>/box<p>"``.
    """
    if not isinstance(x, Tensor4):
        x = Tensor4(x)
    return _run(g, x, lambda nid: store_provider(w, nid))


def output_tensors(g, results):
    """Graph outputs in declaration order, expanding multi-output nodes."""
    out = {}
    for o in g.outputs:
        if o in results:
            out[o] = results[o]
        else:
            out.update({k: v for k, v in results.items() if k.startswith(o + "/")})
    return out


@dataclass
class GraphTrace:
    tracer: Tracer
    values: Dict[str, object]
    node_inputs: Dict[str, List[Tuple[int, ...]]]
    input_ids: Tuple[int, ...]


def trace_graph(g, input_shape=None):
    """Run the graph symbolically; records every conv and channel coupling."""
    shape = tuple(input_shape or g.input_shape)
    if len(shape) != 4:
        raise GraphError("trace needs a 4-D input shape")
    tracer = Tracer()
    x = tracer.input(shape)
    node_inputs = {}

    def on_node(nid):
        tracer.node = nid
        node_inputs[nid] = [] if g.node(nid).kind == "input" else [
            values_seen[s].ids for s in g.node(nid).inputs]

    values_seen = {}

    def provider_for(nid):
        return shape_provider(nid)

    try:
        results = _run(g, x, provider_for, on_node, values_seen)
    except (ShapeError, ConfigError) as e:
        raise GraphError(str(e), [tracer.node]) from None
    return GraphTrace(tracer, results, node_inputs, x.ids)
