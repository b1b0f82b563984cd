"""LAMP-scored structured channel pruning over model graphs.

The graph is traced symbolically so every channel of every tensor carries an
id. Residual adds tie ids together (union-find) and depthwise convs reuse
their input ids, so each resulting *class* is a set of channels that must be
kept or dropped as one. A class is scored by summing, over every conv row it
owns, the layer-wide LAMP scores of that row's weights.

Classes are removed in ascending score order (ties: lowest channel id first),
skipping any class whose removal would empty a conv input/output, a split
slice or a node output. The resulting removal sequence does not depend on the
requested sparsity, so larger targets always prune a superset of channels.

Never pruned: the graph input, graph-output tensors, detection-head output
convs, user-protected nodes/convs, and both sides of grouped
(non-depthwise) convs.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .blocks import block_kind
from .errors import PruneError
from .graph import WeightStore, graph_from_dict, param_name, trace_graph


def lamp_scores(weights, return_flag=False, ties="index"):
    """Layer-adaptive magnitude scores of a flat weight array.

    score(u) = W[u]^2 / sum of W[v]^2 over v at or after u in the ascending
    order of squared magnitude (ties by index). With ``ties="mean"`` every
    element of a run of equal magnitudes gets the run's mean score instead,
    which makes the scores invariant to permuting the array. An all-zero
    array scores 0 everywhere; ``return_flag=True`` also returns whether
    that happened.
    """
    if ties not in ("index", "mean"):
        raise PruneError(f"ties must be 'index' or 'mean', got {ties!r}")
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise PruneError("lamp_scores needs a non-empty array")
    if not np.all(np.isfinite(w)):
        raise PruneError("lamp_scores needs finite weights")
    sq = w * w
    order = np.argsort(sq, kind="stable")
    s = sq[order]
    suffix = np.cumsum(s[::-1])[::-1]
    degenerate = bool(suffix[0] == 0)
    sorted_scores = np.divide(s, suffix, out=np.zeros_like(s), where=suffix > 0)
    if ties == "mean":
        starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
        run_mean = np.add.reduceat(sorted_scores, starts) / np.diff(np.r_[starts, s.size])
        sorted_scores = np.repeat(run_mean, np.diff(np.r_[starts, s.size]))
    scores = np.zeros_like(w)
    scores[order] = sorted_scores
    return (scores, degenerate) if return_flag else scores


@dataclass(frozen=True)
class ChannelScore:
    node: str
    channel: int
    importance: float


def channel_importance(name, weight):
    """Per-output-channel sum of the layer's LAMP scores.

    Equal-magnitude weights share their mean score, so two channels holding
    the same multiset of weights get the same importance.
    """
    w = np.asarray(weight, dtype=np.float64)
    per_row = lamp_scores(w, ties="mean").reshape(w.shape[0], -1).sum(axis=1)
    return [ChannelScore(name, j, float(v)) for j, v in enumerate(per_row)]


@dataclass(frozen=True)
class CouplingGroup:
    """Convs whose listed output positions must share one keep mask."""

    members: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def width(self):
        return len(self.members[0][1])


@dataclass
class PrunePlan:
    masks: Dict[str, Tuple[bool, ...]]
    achieved_sparsity: float
    achieved_mac_ratio: float
    graph_digest: str = ""
    weights_checksum: Optional[int] = None
    requested: Optional[dict] = None
    warning: Optional[str] = None

    @property
    def is_identity(self):
        return all(all(m) for m in self.masks.values())

    def kept(self, name):
        return sum(self.masks[name])

    def to_dict(self):
        return {"masks": {k: [int(b) for b in m] for k, m in self.masks.items()},
                "achieved_sparsity": self.achieved_sparsity,
                "achieved_mac_ratio": self.achieved_mac_ratio,
                "graph_digest": self.graph_digest,
                "weights_checksum": self.weights_checksum,
                "requested": self.requested,
                "warning": self.warning}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        try:
            masks = {k: tuple(bool(b) for b in m) for k, m in d["masks"].items()}
            return cls(masks, float(d["achieved_sparsity"]), float(d["achieved_mac_ratio"]),
                       d.get("graph_digest", ""), d.get("weights_checksum"), d.get("requested"),
                       d.get("warning"))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise PruneError(f"malformed prune plan: {e}") from None

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise PruneError(f"prune plan is not valid JSON: {e.msg}") from None


# -- structure ------------------------------------------------------------------------

class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class _Structure:
    """Channel classes, protected classes and the channel sets that need floors."""

    trace: object
    convs: list
    cls_of: np.ndarray                 # channel id -> class index
    n_classes: int
    protected: np.ndarray              # class index -> bool
    sets: List[np.ndarray]             # class index per position of each channel set
    class_sets: List[List[Tuple[int, int]]] = field(default_factory=list)

    def conv(self, name):
        return self._by_name[name]

    def __post_init__(self):
        self._by_name = {r.name: r for r in self.convs}
        self.class_sets = [[] for _ in range(self.n_classes)]
        for s, classes in enumerate(self.sets):
            uniq, counts = np.unique(classes, return_counts=True)
            for c, m in zip(uniq.tolist(), counts.tolist()):
                self.class_sets[c].append((s, m))


def _protected_names(g, protected):
    names = set()
    wanted = set(protected)
    for nid in g.order:
        specs = g.conv_specs(nid)
        subs = set(block_kind(g.node(nid).kind).protected_subs(g.normalized[nid]))
        for name, spec in specs:
            if spec.sub in subs or nid in wanted or name in wanted:
                names.add(name)
    known = set(g.order) | {name for nid in g.order for name, _ in g.conv_specs(nid)}
    unknown = wanted - known
    if unknown:
        raise PruneError(f"protected names not in graph: {sorted(unknown)}")
    return names


def analyze_structure(g, protected=()):
    tr = trace_graph(g)
    t = tr.tracer
    uf = _UnionFind(len(t.origins))
    for a, b in t.adds:
        for i, j in zip(a, b):
            uf.union(i, j)
    roots = np.array([uf.find(i) for i in range(len(t.origins))], dtype=np.int64)
    uniq = np.unique(roots)            # roots are class minima, so sorted = by min id
    cls_of = np.searchsorted(uniq, roots)

    prot = np.zeros(len(uniq), dtype=bool)
    pnames = _protected_names(g, protected)
    prot_ids = list(tr.input_ids)
    for o in g.outputs:
        v = tr.values.get(o)
        if v is not None:
            prot_ids += v.ids
    for r in t.convs:
        if r.grouped:
            prot_ids += r.in_ids + r.out_ids
        if r.name in pnames:
            prot_ids += r.out_ids
    prot[cls_of[np.asarray(prot_ids, dtype=np.int64)]] = True

    sets = []
    for r in t.convs:
        sets += [cls_of[list(r.in_ids)], cls_of[list(r.out_ids)]]
    sets += [cls_of[list(ids)] for ids in t.splits]
    sets += [cls_of[list(v.ids)] for v in tr.values.values()]
    return _Structure(tr, list(t.convs), cls_of, len(uniq), prot, sets)


def build_coupling_groups(g):
    """Convs tied together by residual adds or depthwise reuse.

    Each group lists, per member conv, the output positions that move together;
    position k of every member belongs to the same channel class. A conv whose
    rows are tied to each other (e.g. a residual over a ghost conv, whose two
    halves share ids) appears once per tied copy.
    """
    st = analyze_structure(g)
    rows = {}
    for r in st.convs:
        for j, i in enumerate(r.out_ids):
            rows.setdefault(int(st.cls_of[i]), []).append((r.name, j))
    grouped = {}
    for c, members in sorted(rows.items()):
        if len(members) < 2:
            continue
        seen, keyed = {}, []
        for n, j in members:
            k = seen.get(n, 0)
            seen[n] = k + 1
            keyed.append(((n, k), j))
        per = grouped.setdefault(tuple(m for m, _ in keyed), {})
        for m, j in keyed:
            per.setdefault(m, []).append(j)
    groups = []
    for per in grouped.values():
        if len({len(v) for v in per.values()}) != 1:
            raise PruneError(f"coupled convs {sorted(per)} have mismatched widths")
        groups.append(CouplingGroup(tuple((n, tuple(v)) for (n, _), v in per.items())))
    return groups


# -- cost bookkeeping -------------------------------------------------------------------

def _conv_cost(r, c_in, c_out):
    kk = r.kernel[0] * r.kernel[1]
    n, _, ho, wo = r.out_shape
    if r.depthwise:
        w = c_out * kk
    elif r.groups == 1:
        w = c_out * c_in * kk
    else:
        return r.params, r.macs
    return w + (c_out if r.bias else 0), w * n * ho * wo


class Pruner:
    """Precomputes the removal sequence for one graph and weight store."""

    def __init__(self, g, w, protected=()):
        self.g, self.w = g, w
        self.st = analyze_structure(g, protected)
        st = self.st
        imp = np.zeros(st.n_classes)
        for r in st.convs:
            weight = w.get(f"{r.name}.weight")
            for cs in channel_importance(r.name, weight):
                imp[st.cls_of[r.out_ids[cs.channel]]] += cs.importance
        self.importance = imp
        first_id = np.full(st.n_classes, np.iinfo(np.int64).max)
        np.minimum.at(first_id, st.cls_of, np.arange(len(st.cls_of)))
        candidates = [c for c in range(st.n_classes) if not st.protected[c]]
        candidates.sort(key=lambda c: (imp[c], first_id[c]))

        kept = np.array([len(s) for s in st.sets], dtype=np.int64)
        cost = [_conv_cost(r, r.c_in, r.c_out) for r in st.convs]
        self.base_params = sum(p for p, _ in cost)
        self.base_macs = sum(m for _, m in cost)
        params, macs = self.base_params, self.base_macs
        self.steps = []                 # (class, params after, macs after)
        for c in candidates:
            touches = st.class_sets[c]
            if any(kept[s] - m < 1 for s, m in touches):
                continue
            for s, m in touches:
                kept[s] -= m
            for ci in {s // 2 for s, _ in touches if s < 2 * len(st.convs)}:
                p, q = _conv_cost(st.convs[ci], kept[2 * ci], kept[2 * ci + 1])
                params += p - cost[ci][0]
                macs += q - cost[ci][1]
                cost[ci] = (p, q)
            self.steps.append((c, params, macs))

    def sparsity(self, m):
        return 0.0 if m == 0 else 1 - self.steps[m - 1][1] / self.base_params

    def mac_ratio(self, m):
        return 1.0 if m == 0 else self.base_macs / self.steps[m - 1][2]

    def steps_for_sparsity(self, s):
        for m in range(len(self.steps) + 1):
            if self.sparsity(m) >= s:
                return m
        return len(self.steps)

    def plan(self, m, requested=None, warning=None):
        st = self.st
        alive = np.ones(st.n_classes, dtype=bool)
        alive[[c for c, _, _ in self.steps[:m]]] = False
        masks = {r.name: tuple(bool(b) for b in alive[st.cls_of[list(r.out_ids)]])
                 for r in st.convs}
        return PrunePlan(masks, self.sparsity(m), self.mac_ratio(m), self.g.digest(),
                         self.w.checksum, requested, warning)


def select_channels(g, w, sparsity, protected=(), pruner=None):
    """Drop the lowest-scoring channel classes until at least ``sparsity`` of
    all parameters are removed (or no further class can go)."""
    if not 0 <= sparsity < 1:
        raise PruneError(f"sparsity must lie in [0, 1), got {sparsity}")
    pr = pruner or Pruner(g, w, protected)
    m = pr.steps_for_sparsity(sparsity)
    warning = None
    if pr.sparsity(m) < sparsity:
        warning = (f"requested sparsity {sparsity:.4f} unreachable; floors stop at "
                   f"{pr.sparsity(m):.4f}")
    return pr.plan(m, {"sparsity": sparsity}, warning)


def search_speedup(g, w, target, tol=0.02, protected=(), pruner=None, s_max=0.99):
    """Bisect the requested sparsity until baseline/pruned MACs is within
    ``tol * target`` of ``target``; otherwise return the closest plan found
    with a warning."""
    if not target >= 1:
        raise PruneError(f"target speed-up must be >= 1, got {target}")
    if not tol > 0:
        raise PruneError(f"tolerance must be > 0, got {tol}")
    pr = pruner or Pruner(g, w, protected)
    req = {"target_speedup": target, "tolerance": tol}
    if target == 1:
        return pr.plan(0, req)
    lo, hi = 0.0, s_max
    m_lo, m_hi = 0, pr.steps_for_sparsity(s_max)
    if pr.mac_ratio(m_hi) >= target:
        for _ in range(60):
            mid = (lo + hi) / 2
            m = pr.steps_for_sparsity(mid)
            if pr.mac_ratio(m) >= target:
                hi, m_hi = mid, m
            else:
                lo, m_lo = mid, m
            if m_hi - m_lo <= 1:
                break
    best = min((m_lo, m_hi), key=lambda m: (abs(pr.mac_ratio(m) - target), m))
    ratio = pr.mac_ratio(best)
    warning = None
    if abs(ratio - target) > tol * target:
        warning = (f"target speed-up {target:g} not reachable within {tol:g}; closest "
                   f"achievable is {ratio:.4f}")
    return pr.plan(best, req, warning)


# -- applying a plan ----------------------------------------------------------------------

class _Kept:
    """Answers 'how many channels survive' questions for one node's rebuild."""

    def __init__(self, nid, st, alive_id):
        self.nid, self.st, self.alive = nid, st, alive_id

    def _count(self, ids):
        return int(sum(self.alive(i) for i in ids))

    def out(self, sub):
        return self._count(self.st.conv(param_name(self.nid, sub)).out_ids)

    def out_prefix(self, sub, n):
        return self._count(self.st.conv(param_name(self.nid, sub)).out_ids[:n])

    def inp(self, i):
        return self._count(self.st.trace.node_inputs[self.nid][i])

    def inp_prefix(self, i, n):
        return self._count(self.st.trace.node_inputs[self.nid][i][:n])


def _class_alive(st, plan):
    missing = sorted(set(r.name for r in st.convs) - set(plan.masks))
    extra = sorted(set(plan.masks) - set(r.name for r in st.convs))
    if missing or extra:
        raise PruneError(f"stale plan: masks missing {missing[:5]} / unknown {extra[:5]}")
    alive = {}
    for r in st.convs:
        mask = plan.masks[r.name]
        if len(mask) != r.c_out:
            raise PruneError(f"stale plan: mask for '{r.name}' has {len(mask)} entries, "
                             f"conv has {r.c_out} outputs")
        for j, i in enumerate(r.out_ids):
            c = int(st.cls_of[i])
            if alive.setdefault(c, mask[j]) != mask[j]:
                raise PruneError(f"plan breaks coupling: '{r.name}' channel {j} disagrees with "
                                 f"a coupled channel")
    out = np.ones(st.n_classes, dtype=bool)
    for c, v in alive.items():
        out[c] = v
    if np.any(st.protected & ~out):
        raise PruneError("plan removes protected channels")
    for classes in st.sets:
        if not out[classes].any():
            raise PruneError("plan empties a tensor")
    return out


def apply_prune(g, w, plan):
    """Slice pruned rows/columns out of every conv and rewrite node widths."""
    if plan.graph_digest and plan.graph_digest != g.digest():
        raise PruneError("stale plan: built for a different graph")
    if plan.weights_checksum is not None and plan.weights_checksum != w.checksum:
        raise PruneError("stale plan: built for different weights")
    st = analyze_structure(g)
    alive = _class_alive(st, plan)
    if alive.all():
        return g, w

    def alive_id(i):
        return bool(alive[st.cls_of[i]])

    arrays = {}
    for key in w.keys():
        name, part = key.rsplit(".", 1)
        r = st.conv(name)
        keep_out = alive[st.cls_of[list(r.out_ids)]]
        a = w.get(key)
        if part == "bias":
            arrays[key] = a[keep_out]
        elif r.depthwise:
            arrays[key] = a[keep_out]
        elif r.groups == 1:
            keep_in = alive[st.cls_of[list(r.in_ids)]]
            arrays[key] = a[keep_out][:, keep_in]
        else:
            arrays[key] = a

    changed = set()
    for r in st.convs:
        if not alive[st.cls_of[list(r.in_ids + r.out_ids)]].all():
            changed.add(r.node)
    for nid, ins in st.trace.node_inputs.items():
        if any(not alive_id(i) for ids in ins for i in ids):
            changed.add(nid)

    doc = g.to_dict()
    for nd in doc["nodes"]:
        if nd["id"] in changed:
            cls = block_kind(nd["kind"])
            nd["attrs"] = cls.rebuild(g.normalized[nd["id"]], _Kept(nd["id"], st, alive_id))
    g2 = graph_from_dict(doc)
    for nid in g2.order:
        for name, spec in g2.conv_specs(nid):
            got = arrays[f"{name}.weight"].shape
            if got != spec.weight_shape:
                raise PruneError(f"internal: pruned '{name}' weight {got} != declared "
                                 f"{spec.weight_shape}")
    return g2, WeightStore.from_arrays(arrays)
