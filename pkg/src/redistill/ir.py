"""Typed computation-graph IR with shape inference.

A graph is an immutable DAG of operator nodes with a single Input and a
single Output. Skip/residual branches are explicit edges into Add/Concat
nodes; by convention ``inputs[0]`` of a merge node is the trunk (main path)
and the remaining inputs are branch edges. All functions here are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import (
    ArityMismatch,
    CycleDetected,
    DanglingInput,
    GraphError,
    IRFormatError,
    NonPositiveDim,
    ShapeMismatch,
)

IR_VERSION = 1

# Tag carried by Add nodes that represent an elementwise product. Shape and
# memory behaviour are identical to Add; only the executor distinguishes them.
TAG_EWISE_MUL = "elementwise-mul"

OP_KINDS = frozenset({
    "Input", "Output", "Conv2d", "MaxPool", "AvgPool", "GlobalAvgPool",
    "BatchNorm", "Activation", "Add", "Concat", "Upsample", "FullyConnected",
})

ACTIVATION_FNS = frozenset({"ReLU", "ReLU6", "Sigmoid", "SiLU"})

# Required parameter keys per node kind; anything else is rejected.
_PARAM_KEYS = {
    "Input": frozenset(),
    "Output": frozenset(),
    "Conv2d": frozenset({"kernel_h", "kernel_w", "stride", "padding",
                         "in_c", "out_c", "groups"}),
    "MaxPool": frozenset({"kernel", "stride", "padding"}),
    "AvgPool": frozenset({"kernel", "stride", "padding"}),
    "GlobalAvgPool": frozenset(),
    "BatchNorm": frozenset(),
    "Activation": frozenset({"fn"}),
    "Add": frozenset(),
    "Concat": frozenset(),
    "Upsample": frozenset({"factor", "mode"}),
    "FullyConnected": frozenset({"in_features", "out_features"}),
}


@dataclass(frozen=True)
class TensorShape:
    """Batch/channel/height/width descriptor; the unit of memory arithmetic."""

    n: int
    c: int
    h: int
    w: int
    dtype_bytes: int = 4

    def __post_init__(self):
        for name in ("n", "c", "h", "w", "dtype_bytes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ShapeMismatch(f"TensorShape.{name} must be an integer >= 1, got {v!r}")

    @property
    def byte_size(self) -> int:
        return self.n * self.c * self.h * self.w * self.dtype_bytes

    @property
    def elements(self) -> int:
        return self.n * self.c * self.h * self.w

    def to_dict(self) -> dict:
        return {"n": self.n, "c": self.c, "h": self.h, "w": self.w,
                "dtype_bytes": self.dtype_bytes}


@dataclass(frozen=True)
class OpNode:
    """A single typed operator with ordered predecessor edges."""

    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()
    tags: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "tags", frozenset(self.tags))
        if self.kind not in OP_KINDS:
            raise GraphError(f"node {self.id!r}: unknown kind {self.kind!r}")
        allowed = _PARAM_KEYS[self.kind]
        got = set(self.params)
        if got != allowed:
            raise GraphError(
                f"node {self.id!r} ({self.kind}): params {sorted(got)} != expected {sorted(allowed)}")
        if self.kind == "Activation" and self.params["fn"] not in ACTIVATION_FNS:
            raise GraphError(f"node {self.id!r}: unknown activation {self.params['fn']!r}")
        if self.kind == "Conv2d":
            p = self.params
            if p["groups"] < 1 or p["in_c"] % p["groups"] != 0:
                raise GraphError(
                    f"node {self.id!r}: in_c={p['in_c']} not divisible by groups={p['groups']}")
            if p["out_c"] % p["groups"] != 0:
                raise GraphError(
                    f"node {self.id!r}: out_c={p['out_c']} not divisible by groups={p['groups']}")
        if self.kind == "Upsample" and self.params.get("mode") != "nearest":
            raise GraphError(f"node {self.id!r}: only nearest upsampling is supported")

    def with_params(self, **updates) -> "OpNode":
        params = dict(self.params)
        params.update(updates)
        return replace(self, params=params)


def conv2d(id, in_c, out_c, kernel=3, stride=1, padding=0, groups=1,
           inputs=(), tags=()):
    if isinstance(kernel, int):
        kh = kw = kernel
    else:
        kh, kw = kernel
    return OpNode(id, "Conv2d",
                  {"kernel_h": kh, "kernel_w": kw, "stride": stride,
                   "padding": padding, "in_c": in_c, "out_c": out_c,
                   "groups": groups},
                  inputs=inputs, tags=tags)


def maxpool(id, kernel, stride, padding=0, inputs=(), tags=()):
    return OpNode(id, "MaxPool", {"kernel": kernel, "stride": stride,
                                  "padding": padding}, inputs=inputs, tags=tags)


def avgpool(id, kernel, stride, padding=0, inputs=(), tags=()):
    return OpNode(id, "AvgPool", {"kernel": kernel, "stride": stride,
                                  "padding": padding}, inputs=inputs, tags=tags)


def activation(id, fn, inputs=(), tags=()):
    return OpNode(id, "Activation", {"fn": fn}, inputs=inputs, tags=tags)


def batchnorm(id, inputs=(), tags=()):
    return OpNode(id, "BatchNorm", {}, inputs=inputs, tags=tags)


def upsample(id, factor, inputs=(), tags=()):
    return OpNode(id, "Upsample", {"factor": factor, "mode": "nearest"},
                  inputs=inputs, tags=tags)


def fully_connected(id, in_features, out_features, inputs=(), tags=()):
    return OpNode(id, "FullyConnected",
                  {"in_features": in_features, "out_features": out_features},
                  inputs=inputs, tags=tags)


@dataclass(frozen=True)
class NetworkGraph:
    """Validated DAG with a fixed execution order."""

    nodes: dict                 # id -> OpNode
    topo_order: tuple           # node ids in execution order
    input_shape: TensorShape

    @property
    def input_id(self) -> str:
        return next(i for i in self.topo_order if self.nodes[i].kind == "Input")

    @property
    def output_id(self) -> str:
        return next(i for i in self.topo_order if self.nodes[i].kind == "Output")

    def consumers(self) -> dict:
        """Map node id -> list of (consumer id, input slot)."""
        out = {i: [] for i in self.nodes}
        for nid in self.topo_order:
            for slot, src in enumerate(self.nodes[nid].inputs):
                out[src].append((nid, slot))
        return out

    def node(self, nid: str) -> OpNode:
        return self.nodes[nid]


def build_graph(nodes, input_shape: TensorShape) -> NetworkGraph:
    """Validate a node list and compute a deterministic topological order.

    Raises CycleDetected, DanglingInput or ArityMismatch on structural
    problems. Node list order is irrelevant except as a tie-break for the
    topological sort.
    """
    if not nodes:
        raise GraphError("empty node list")
    by_id = {}
    for node in nodes:
        if node.id in by_id:
            raise GraphError(f"duplicate node id {node.id!r}")
        by_id[node.id] = node

    inputs = [n for n in nodes if n.kind == "Input"]
    outputs = [n for n in nodes if n.kind == "Output"]
    if len(inputs) != 1 or len(outputs) != 1:
        raise GraphError(
            f"graph needs exactly one Input and one Output, got {len(inputs)}/{len(outputs)}")

    for node in nodes:
        for src in node.inputs:
            if src not in by_id:
                raise DanglingInput(f"node {node.id!r} references missing id {src!r}")
        n_in = len(node.inputs)
        if node.kind == "Input":
            ok = n_in == 0
        elif node.kind == "Add":
            ok = n_in == 2
        elif node.kind == "Concat":
            ok = n_in >= 2
        else:
            ok = n_in == 1
        if not ok:
            raise ArityMismatch(f"node {node.id!r} ({node.kind}) has {n_in} inputs")

    # Kahn's algorithm, stable in node-list order.
    order_hint = {n.id: i for i, n in enumerate(nodes)}
    indeg = {n.id: len(n.inputs) for n in nodes}
    ready = sorted([i for i, d in indeg.items() if d == 0], key=order_hint.get)
    consumers = {n.id: [] for n in nodes}
    for node in nodes:
        for src in node.inputs:
            consumers[src].append(node.id)
    topo = []
    while ready:
        nid = ready.pop(0)
        topo.append(nid)
        released = []
        for c in consumers[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                released.append(c)
        if released:
            ready.extend(released)
            ready.sort(key=order_hint.get)
    if len(topo) != len(nodes):
        raise CycleDetected("graph contains a cycle")

    # Every node must be reachable from Input.
    reach = {inputs[0].id}
    for nid in topo:
        node = by_id[nid]
        if node.inputs and any(s in reach for s in node.inputs):
            if all(s in reach for s in node.inputs):
                reach.add(nid)
    if len(reach) != len(nodes):
        missing = sorted(set(by_id) - reach)
        raise DanglingInput(f"nodes not reachable from Input: {missing}")

    return NetworkGraph(nodes=by_id, topo_order=tuple(topo), input_shape=input_shape)


# --- shape inference --------------------------------------------------------

def _window_out(size, kernel, stride, padding, nid):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise NonPositiveDim(
            f"node {nid!r}: window k={kernel} s={stride} p={padding} on extent {size} "
            f"gives non-positive output")
    return out


def infer_shapes(graph: NetworkGraph) -> dict:
    """Compute the output TensorShape of every node (a ShapeTable)."""
    shapes: dict = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        ins = [shapes[s] for s in node.inputs]
        k = node.kind
        if k == "Input":
            shapes[nid] = graph.input_shape
        elif k in ("Output", "BatchNorm", "Activation"):
            shapes[nid] = ins[0]
        elif k == "Conv2d":
            p = node.params
            x = ins[0]
            if x.c != p["in_c"]:
                raise ShapeMismatch(
                    f"node {nid!r}: expects {p['in_c']} input channels, got {x.c}")
            h = _window_out(x.h, p["kernel_h"], p["stride"], p["padding"], nid)
            w = _window_out(x.w, p["kernel_w"], p["stride"], p["padding"], nid)
            shapes[nid] = TensorShape(x.n, p["out_c"], h, w, x.dtype_bytes)
        elif k in ("MaxPool", "AvgPool"):
            p = node.params
            x = ins[0]
            h = _window_out(x.h, p["kernel"], p["stride"], p["padding"], nid)
            w = _window_out(x.w, p["kernel"], p["stride"], p["padding"], nid)
            shapes[nid] = TensorShape(x.n, x.c, h, w, x.dtype_bytes)
        elif k == "GlobalAvgPool":
            x = ins[0]
            shapes[nid] = TensorShape(x.n, x.c, 1, 1, x.dtype_bytes)
        elif k == "Add":
            a, b = ins
            if a != b:
                raise ShapeMismatch(f"node {nid!r}: Add of unequal shapes {a} vs {b}")
            shapes[nid] = a
        elif k == "Concat":
            first = ins[0]
            for other in ins[1:]:
                if (other.n, other.h, other.w) != (first.n, first.h, first.w):
                    raise ShapeMismatch(
                        f"node {nid!r}: Concat inputs disagree on n/h/w: {first} vs {other}")
            shapes[nid] = TensorShape(first.n, sum(s.c for s in ins),
                                      first.h, first.w, first.dtype_bytes)
        elif k == "Upsample":
            x = ins[0]
            f = node.params["factor"]
            shapes[nid] = TensorShape(x.n, x.c, x.h * f, x.w * f, x.dtype_bytes)
        elif k == "FullyConnected":
            x = ins[0]
            p = node.params
            if x.h != 1 or x.w != 1 or x.c != p["in_features"]:
                raise ShapeMismatch(
                    f"node {nid!r}: FullyConnected expects n x {p['in_features']} x 1 x 1, "
                    f"got {x}")
            shapes[nid] = TensorShape(x.n, p["out_features"], 1, 1, x.dtype_bytes)
        else:  # pragma: no cover - kinds are validated at construction
            raise GraphError(f"node {nid!r}: unhandled kind {k}")
    return shapes


# --- main-path helpers -------------------------------------------------------

def main_path(graph: NetworkGraph) -> list:
    """Trunk node ids from Input to Output, following inputs[0] backwards.

    Merge nodes (Add/Concat) are wired with the trunk as their first input,
    so this walk excludes skip and shortcut branches.
    """
    path = []
    cur = graph.output_id
    while True:
        path.append(cur)
        node = graph.nodes[cur]
        if not node.inputs:
            break
        cur = node.inputs[0]
    path.reverse()
    if path[0] != graph.input_id:
        raise GraphError("trunk walk did not reach the Input node")
    return path


_WINDOW_KINDS = ("Conv2d", "MaxPool", "AvgPool")


def downsampling_layers(graph: NetworkGraph, shapes: dict) -> list:
    """Main-path conv/pool node ids whose output spatial extent shrinks.

    Returned in topo order; skip and shortcut branches are excluded, as is
    global pooling.
    """
    result = []
    for nid in main_path(graph):
        node = graph.nodes[nid]
        if node.kind not in _WINDOW_KINDS:
            continue
        before = shapes[node.inputs[0]]
        after = shapes[nid]
        if after.h * after.w < before.h * before.w:
            result.append(nid)
    return result


def upsampling_layers(graph: NetworkGraph) -> list:
    """Main-path Upsample node ids in topo order (any factor)."""
    return [nid for nid in main_path(graph) if graph.nodes[nid].kind == "Upsample"]


# --- serialization -----------------------------------------------------------

def graph_to_dict(graph: NetworkGraph) -> dict:
    return {
        "ir_version": IR_VERSION,
        "input_shape": graph.input_shape.to_dict(),
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "params": dict(n.params),
                "inputs": list(n.inputs),
                "tags": sorted(n.tags),
            }
            for n in (graph.nodes[i] for i in graph.topo_order)
        ],
    }


def graph_to_json(graph: NetworkGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2)


_TOP_KEYS = {"ir_version", "input_shape", "nodes"}
_NODE_KEYS = {"id", "kind", "params", "inputs", "tags"}
_SHAPE_KEYS = {"n", "c", "h", "w", "dtype_bytes"}


def graph_from_dict(doc: dict) -> NetworkGraph:
    if not isinstance(doc, dict):
        raise IRFormatError("IR document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise IRFormatError(f"unknown top-level fields: {sorted(unknown)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise IRFormatError(f"missing top-level fields: {sorted(missing)}")
    if doc["ir_version"] != IR_VERSION:
        raise IRFormatError(f"unsupported ir_version {doc['ir_version']!r}")

    shape_doc = doc["input_shape"]
    if not isinstance(shape_doc, dict) or set(shape_doc) - _SHAPE_KEYS:
        raise IRFormatError(f"bad input_shape: {shape_doc!r}")
    try:
        input_shape = TensorShape(**shape_doc)
    except (TypeError, ShapeMismatch) as e:
        raise IRFormatError(f"bad input_shape: {e}") from e

    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        if not isinstance(nd, dict):
            raise IRFormatError(f"nodes[{i}] is not an object")
        unknown = set(nd) - _NODE_KEYS
        if unknown:
            raise IRFormatError(f"nodes[{i}]: unknown fields {sorted(unknown)}")
        missing = _NODE_KEYS - set(nd)
        if missing:
            raise IRFormatError(f"nodes[{i}]: missing fields {sorted(missing)}")
        try:
            nodes.append(OpNode(id=nd["id"], kind=nd["kind"], params=nd["params"],
                                inputs=tuple(nd["inputs"]), tags=frozenset(nd["tags"])))
        except GraphError as e:
            raise IRFormatError(f"nodes[{i}] (id={nd.get('id')!r}): {e}") from e
    return build_graph(nodes, input_shape)


def graph_from_json(text: str) -> NetworkGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise IRFormatError(f"invalid JSON: {e}") from e
    return graph_from_dict(doc)
