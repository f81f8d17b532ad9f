"""Theoretical peak activation memory of a graph.

Accounting rules:

* every executed op holds its inputs plus its freshly allocated output
  (Add/Concat count all inputs);
* grouped convolutions add a buffer of one within-group kernel;
* a skip/residual tensor stays live, and is charged to every op executed
  between its producer and its last consumer;
* weights never count, batch defaults to 1, MB means MiB.

By default BatchNorm and Activation nodes are folded into their producer
(they run in place in deployment and the published per-model figures require
it); pass fuse_bn_act=False to charge them as separate input+output ops.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace

from .errors import MissingShape, UnsupportedFormat
from .ir import NetworkGraph, TensorShape, build_graph, infer_shapes

_FOLDABLE = ("BatchNorm", "Activation")


@dataclass(frozen=True)
class MemoryRecord:
    node_id: str
    kind: str
    input_bytes: int
    output_bytes: int
    buffer_bytes: int
    live_residual_bytes: int

    @property
    def total_bytes(self) -> int:
        return (self.input_bytes + self.output_bytes + self.buffer_bytes
                + self.live_residual_bytes)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "kind": self.kind,
            "input_bytes": self.input_bytes,
            "output_bytes": self.output_bytes,
            "buffer_bytes": self.buffer_bytes,
            "live_residual_bytes": self.live_residual_bytes,
            "total_bytes": self.total_bytes,
        }


@dataclass(frozen=True)
class MemoryTrace:
    records: tuple
    peak_bytes: int
    peak_node_id: str

    @property
    def peak_mib(self) -> float:
        return self.peak_bytes / 2 ** 20


@dataclass(frozen=True)
class PeakReport:
    peak_bytes: int
    peak_mb: float          # MiB rounded to 2 decimals
    model: str
    input_shape: TensorShape
    dtype_bytes: int

    def format_peak(self) -> str:
        return f"{self.peak_bytes / 2 ** 20:.2f} MB"


def op_memory(node, shapes: dict):
    """(input_bytes, output_bytes, buffer_bytes) of one executed op."""
    for src in node.inputs:
        if src not in shapes:
            raise MissingShape(f"node {node.id!r}: no shape for input {src!r}")
    if node.id not in shapes:
        raise MissingShape(f"node {node.id!r}: no output shape")
    in_bytes = sum(shapes[src].byte_size for src in node.inputs)
    out_bytes = shapes[node.id].byte_size
    if node.kind == "Input":
        return 0, out_bytes, 0
    if node.kind == "Output":
        return in_bytes, 0, 0
    buf = 0
    if node.kind == "Conv2d" and node.params["groups"] > 1:
        p = node.params
        dtype_bytes = shapes[node.id].dtype_bytes
        buf = p["kernel_h"] * p["kernel_w"] * (p["in_c"] // p["groups"]) * dtype_bytes
    return in_bytes, out_bytes, buf


def fuse_bn_act(graph: NetworkGraph) -> NetworkGraph:
    """Fold BatchNorm/Activation nodes into their single-consumer producer."""
    edge_counts = {nid: 0 for nid in graph.nodes}
    for node in graph.nodes.values():
        for src in node.inputs:
            edge_counts[src] += 1

    alias = {}

    def resolve(nid):
        while nid in alias:
            nid = alias[nid]
        return nid

    for nid in graph.topo_order:
        node = graph.nodes[nid]
        if node.kind not in _FOLDABLE:
            continue
        producer = resolve(node.inputs[0])
        if graph.nodes[producer].kind in ("Input", "Output"):
            continue
        if edge_counts[node.inputs[0]] == 1:
            alias[nid] = producer

    if not alias:
        return graph
    kept = []
    for nid in graph.topo_order:
        if nid in alias:
            continue
        node = graph.nodes[nid]
        new_inputs = tuple(resolve(s) for s in node.inputs)
        kept.append(replace(node, inputs=new_inputs) if new_inputs != node.inputs else node)
    return build_graph(kept, graph.input_shape)


def trace(graph: NetworkGraph, fuse: bool = True) -> MemoryTrace:
    """Execute the graph on paper and record per-op memory with liveness.

    A produced tensor stays in the live set until its last consumer has
    executed; while live it is charged to every op it is not an input of.
    """
    if fuse:
        graph = fuse_bn_act(graph)
    shapes = infer_shapes(graph)
    edge_counts = {nid: 0 for nid in graph.nodes}
    for node in graph.nodes.values():
        for src in node.inputs:
            edge_counts[src] += 1

    live = {}  # producer id -> [bytes, remaining consumer edges]
    records = []
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        in_b, out_b, buf = op_memory(node, shapes)
        own_inputs = set(node.inputs)
        residual = sum(b for pid, (b, _) in live.items() if pid not in own_inputs)
        records.append(MemoryRecord(nid, node.kind, in_b, out_b, buf, residual))
        for src in node.inputs:
            entry = live[src]
            entry[1] -= 1
            if entry[1] == 0:
                del live[src]
        if node.kind != "Output" and edge_counts[nid] > 0:
            live[nid] = [shapes[nid].byte_size, edge_counts[nid]]

    peak = max(r.total_bytes for r in records)
    peak_node = next(r.node_id for r in records if r.total_bytes == peak)
    return MemoryTrace(records=tuple(records), peak_bytes=peak, peak_node_id=peak_node)


def peak_report(tr: MemoryTrace, model: str, input_shape: TensorShape) -> PeakReport:
    mib = tr.peak_bytes / 2 ** 20
    return PeakReport(peak_bytes=tr.peak_bytes, peak_mb=float(f"{mib:.2f}"),
                      model=model, input_shape=input_shape,
                      dtype_bytes=input_shape.dtype_bytes)


_COLUMNS = ["node_id", "kind", "input_bytes", "output_bytes", "buffer_bytes",
            "live_residual_bytes", "total_bytes"]


def export_report(tr: MemoryTrace, format: str) -> str:
    """Per-op footprint table as a CSV or JSON document."""
    if format == "csv":
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(_COLUMNS)
        for r in tr.records:
            d = r.to_dict()
            writer.writerow([d[c] for c in _COLUMNS])
        return out.getvalue()
    if format == "json":
        return json.dumps([r.to_dict() for r in tr.records], indent=2)
    raise UnsupportedFormat(f"unsupported report format {format!r}")
