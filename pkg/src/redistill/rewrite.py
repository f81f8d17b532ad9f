"""Aggressive-pooling graph rewriting.

Derives a low-peak-memory student from a teacher by multiplying the stride
of the first downsampling layer and neutralizing later downsampling strides
so the trunk's total stride (and hence the final spatial resolution) is
unchanged. U-shaped graphs get the mirrored treatment on their upsampling
factors. Weight tensor shapes are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import GraphError, NonUniformStride, TooFewDownsamples
from .ir import (
    NetworkGraph,
    build_graph,
    downsampling_layers,
    infer_shapes,
    main_path,
    upsampling_layers,
)

BASE_STRIDE = 2


@dataclass(frozen=True)
class RewriteConfig:
    multiplier: int
    compensation_policy: str = "last_first"

    def __post_init__(self):
        m = self.multiplier
        if not isinstance(m, int) or m < 1 or (m & (m - 1)) != 0:
            raise ValueError(f"multiplier must be a power of {BASE_STRIDE}, got {m!r}")
        if self.compensation_policy != "last_first":
            raise ValueError(f"unknown compensation policy {self.compensation_policy!r}")


@dataclass
class RewriteLog:
    """(node_id, old, new) stride or upsample-factor changes, in application order."""

    entries: list = field(default_factory=list)

    def record(self, node_id, old, new):
        self.entries.append((node_id, old, new))


def _walk_chain(graph: NetworkGraph, start: str) -> list:
    """Follow single-input ancestry from start until a source or merge node."""
    seq = []
    cur = start
    while True:
        seq.append(cur)
        node = graph.nodes[cur]
        if len(node.inputs) != 1:
            return seq
        cur = node.inputs[0]


def _parallel_shortcut_convs(graph: NetworkGraph, node_id: str) -> list:
    """Conv ids with stride > 1 on the branch opposite node_id's enclosing Add."""
    for add_id, node in graph.nodes.items():
        if node.kind != "Add":
            continue
        chain_a = _walk_chain(graph, node.inputs[0])
        chain_b = _walk_chain(graph, node.inputs[1])
        in_b = set(chain_b)
        fork = next((x for x in chain_a if x in in_b), None)
        if fork is None:
            continue
        branch_a = chain_a[:chain_a.index(fork)]
        branch_b = chain_b[:chain_b.index(fork)]
        for ours, theirs in ((branch_a, branch_b), (branch_b, branch_a)):
            if node_id in ours:
                return [nid for nid in theirs
                        if graph.nodes[nid].kind == "Conv2d"
                        and graph.nodes[nid].params["stride"] > 1]
    return []


def _stride_of(node):
    if node.kind == "Conv2d":
        return node.params["stride"]
    if node.kind in ("MaxPool", "AvgPool"):
        return node.params["stride"]
    if node.kind == "Upsample":
        return node.params["factor"]
    raise GraphError(f"node {node.id!r} ({node.kind}) has no stride")


def _with_stride(node, value):
    key = "factor" if node.kind == "Upsample" else "stride"
    return node.with_params(**{key: value})


def _compensation_targets(ordered, j):
    """Indices to neutralize after the head node takes the full multiplier.

    One compensation comes from the tail; further ones consume the node
    immediately after the head first, then continue tail-first.
    """
    n = len(ordered)
    if j == 0:
        return []
    if j == 1:
        if n < 2:
            raise TooFewDownsamples("need at least 2 downsampling layers to compensate")
        return [n - 1]
    if n < j + 1:
        raise TooFewDownsamples(
            f"multiplier needs {j} compensations but only {n - 1} layers follow the first")
    return [1] + list(range(n - 1, n - j, -1))


def rewrite_aggressive(teacher: NetworkGraph, config: RewriteConfig):
    """Return (student, log) for the given stride multiplier."""
    m = config.multiplier
    log = RewriteLog()
    if m == 1:
        return teacher, log

    shapes = infer_shapes(teacher)
    downs = downsampling_layers(teacher, shapes)
    if not downs:
        raise TooFewDownsamples("graph has no downsampling layers")
    j = m.bit_length() - 1

    updates = {}

    def apply(nid, new_value):
        node = teacher.nodes[nid]
        old = _stride_of(node)
        updates[nid] = new_value
        log.record(nid, old, new_value)

    first = teacher.nodes[downs[0]]
    apply(downs[0], _stride_of(first) * m)
    for proj in _parallel_shortcut_convs(teacher, downs[0]):
        apply(proj, teacher.nodes[proj].params["stride"] * m)

    for idx in _compensation_targets(downs, j):
        nid = downs[idx]
        node = teacher.nodes[nid]
        if _stride_of(node) != BASE_STRIDE:
            raise NonUniformStride(
                f"node {nid!r} has stride {_stride_of(node)}, expected {BASE_STRIDE}")
        apply(nid, 1)
        for proj in _parallel_shortcut_convs(teacher, nid):
            if teacher.nodes[proj].params["stride"] != BASE_STRIDE:
                raise NonUniformStride(
                    f"projection {proj!r} has stride {teacher.nodes[proj].params['stride']}")
            apply(proj, 1)

    ups = upsampling_layers(teacher)
    if ups:
        rev = ups[::-1]
        last = teacher.nodes[rev[0]]
        apply(rev[0], _stride_of(last) * m)
        for idx in _compensation_targets(rev, j):
            nid = rev[idx]
            node = teacher.nodes[nid]
            if _stride_of(node) != BASE_STRIDE:
                raise NonUniformStride(
                    f"upsample {nid!r} has factor {_stride_of(node)}, expected {BASE_STRIDE}")
            apply(nid, 1)

    new_nodes = []
    for nid in teacher.topo_order:
        node = teacher.nodes[nid]
        new_nodes.append(_with_stride(node, updates[nid]) if nid in updates else node)
    student = build_graph(new_nodes, teacher.input_shape)
    infer_shapes(student)  # revalidate

    if _trunk_stride_product(teacher) != _trunk_stride_product(student):
        raise GraphError("rewrite failed to conserve the trunk stride product")
    if not verify_resolution(teacher, student):
        raise GraphError("rewrite changed the final spatial resolution")
    return student, log


def _trunk_stride_product(graph: NetworkGraph) -> float:
    product = 1.0
    for nid in main_path(graph):
        node = graph.nodes[nid]
        if node.kind in ("Conv2d", "MaxPool", "AvgPool"):
            product *= node.params["stride"]
        elif node.kind == "Upsample":
            product /= node.params["factor"]
    return product


def _reference_spatial(graph: NetworkGraph, shapes: dict):
    """Spatial dims feeding the classifier head, or the Output for U-nets."""
    for nid in main_path(graph):
        if graph.nodes[nid].kind == "GlobalAvgPool":
            ref = shapes[graph.nodes[nid].inputs[0]]
            return ref.h, ref.w
    ref = shapes[graph.nodes[graph.output_id].inputs[0]]
    return ref.h, ref.w


def verify_resolution(teacher: NetworkGraph, student: NetworkGraph) -> bool:
    """True iff both graphs aggregate features at the same final spatial dims."""
    if teacher.input_shape != student.input_shape:
        return False
    try:
        t_ref = _reference_spatial(teacher, infer_shapes(teacher))
        s_ref = _reference_spatial(student, infer_shapes(student))
    except GraphError:
        return False
    return t_ref == s_ref


def weight_shape_multiset(graph: NetworkGraph) -> dict:
    """Multiset of conv/fc weight-tensor shapes, for parameter-preservation checks.

    BatchNorm parameter shapes follow conv output channels, so they are
    covered transitively.
    """
    counts = {}
    for node in graph.nodes.values():
        if node.kind == "Conv2d":
            p = node.params
            key = ("conv", p["out_c"], p["in_c"] // p["groups"], p["kernel_h"], p["kernel_w"])
        elif node.kind == "FullyConnected":
            key = ("fc", node.params["out_features"], node.params["in_features"])
        else:
            continue
        counts[key] = counts.get(key, 0) + 1
    return counts
