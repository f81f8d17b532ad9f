"""Teacher/student feature-pair planning for adapter-block insertion.

Pooling-aligned matching pairs each student downsampling output with the
teacher downsampling output of equal spatial dims, asynchronously across
stages. Stage-aligned matching (the conventional baseline) pairs by stage
index and records the resolution mismatch so a trainer can resample.
U-shaped graphs additionally pair upsample inputs on the decoder side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import NoMatch, NotUNet
from .ir import NetworkGraph, downsampling_layers, infer_shapes, upsampling_layers
from .rewrite import verify_resolution

AFTER_DOWNSAMPLE = "after_downsample"
BEFORE_UPSAMPLE = "before_upsample"


@dataclass(frozen=True)
class AlignmentPair:
    """One matched feature pair.

    student_node_id / teacher_node_id name the nodes whose *outputs* are the
    matched features: the downsampling node itself for encoder pairs, the
    producer feeding the upsample for decoder pairs.
    """

    student_node_id: str
    teacher_node_id: str
    height: int
    width: int
    student_channels: int
    teacher_channels: int
    position: str
    resolution_mismatch: bool = False
    resample_factor: float = 1.0

    def to_dict(self) -> dict:
        return {
            "student_node_id": self.student_node_id,
            "teacher_node_id": self.teacher_node_id,
            "height": self.height,
            "width": self.width,
            "student_channels": self.student_channels,
            "teacher_channels": self.teacher_channels,
            "position": self.position,
            "resolution_mismatch": self.resolution_mismatch,
            "resample_factor": self.resample_factor,
        }


@dataclass(frozen=True)
class AlignmentPlan:
    pairs: tuple
    mode: str = "pooling_align"

    @property
    def count(self) -> int:
        return len(self.pairs)

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode,
                           "pairs": [p.to_dict() for p in self.pairs]}, indent=2)


def _strided(graph, shapes, ids):
    """Keep only nodes that actually change resolution (stride/factor > 1)."""
    out = []
    for nid in ids:
        node = graph.nodes[nid]
        key = "factor" if node.kind == "Upsample" else "stride"
        if node.params[key] > 1:
            out.append(nid)
    return out


def plan(teacher: NetworkGraph, student: NetworkGraph,
         mode: str = "pooling_align") -> AlignmentPlan:
    """Match student downsampling outputs to teacher downsampling outputs."""
    if teacher.input_shape != student.input_shape:
        raise ValueError("teacher and student must share the input shape")
    if mode not in ("pooling_align", "stage_align"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    if mode == "pooling_align" and not verify_resolution(teacher, student):
        raise ValueError("student final resolution differs from teacher; rewrite first")

    t_shapes = infer_shapes(teacher)
    s_shapes = infer_shapes(student)
    t_downs = downsampling_layers(teacher, t_shapes)
    s_downs = _strided(student, s_shapes, downsampling_layers(student, s_shapes))

    pairs = []
    if mode == "stage_align":
        for i, s_id in enumerate(s_downs):
            if i >= len(t_downs):
                raise NoMatch(f"student downsample {s_id!r} has no stage-{i} teacher layer")
            t_id = t_downs[i]
            ss, ts = s_shapes[s_id], t_shapes[t_id]
            pairs.append(AlignmentPair(
                s_id, t_id, ss.h, ss.w, ss.c, ts.c, AFTER_DOWNSAMPLE,
                resolution_mismatch=(ss.h, ss.w) != (ts.h, ts.w),
                resample_factor=ts.h / ss.h))
        return AlignmentPlan(tuple(pairs), mode)

    for s_id in s_downs:
        ss = s_shapes[s_id]
        candidates = [t_id for t_id in t_downs
                      if (t_shapes[t_id].h, t_shapes[t_id].w) == (ss.h, ss.w)]
        if not candidates:
            raise NoMatch(
                f"student downsample {s_id!r} at {ss.h}x{ss.w} has no "
                f"equal-resolution teacher downsampling output")
        t_id = candidates[-1]  # most processed features at that resolution
        pairs.append(AlignmentPair(s_id, t_id, ss.h, ss.w, ss.c,
                                   t_shapes[t_id].c, AFTER_DOWNSAMPLE))
    return AlignmentPlan(tuple(pairs), mode)


def plan_unet(teacher: NetworkGraph, student: NetworkGraph) -> AlignmentPlan:
    """Encoder pairs after downsampling plus decoder pairs before upsampling."""
    t_shapes = infer_shapes(teacher)
    s_shapes = infer_shapes(student)
    for graph, shapes, label in ((teacher, t_shapes, "teacher"),
                                 (student, s_shapes, "student")):
        n_down = len(downsampling_layers(graph, shapes))
        n_up = len(_strided(graph, shapes, upsampling_layers(graph)))
        if n_up < 1 or n_down != n_up:
            raise NotUNet(
                f"{label} is not U-shaped: {n_down} downsampling vs {n_up} upsampling layers")

    encoder = plan(teacher, student).pairs

    t_ups = upsampling_layers(teacher)
    s_ups = _strided(student, s_shapes, upsampling_layers(student))
    decoder = []
    for u_id in s_ups:
        feed = student.nodes[u_id].inputs[0]
        ss = s_shapes[feed]
        candidates = [t_u for t_u in t_ups
                      if (t_shapes[teacher.nodes[t_u].inputs[0]].h,
                          t_shapes[teacher.nodes[t_u].inputs[0]].w) == (ss.h, ss.w)]
        if not candidates:
            raise NoMatch(
                f"student upsample {u_id!r} input at {ss.h}x{ss.w} has no "
                f"equal-resolution teacher upsample input")
        t_feed = teacher.nodes[candidates[0]].inputs[0]  # teacher's earliest upsample
        decoder.append(AlignmentPair(feed, t_feed, ss.h, ss.w, ss.c,
                                     t_shapes[t_feed].c, BEFORE_UPSAMPLE))
    return AlignmentPlan(tuple(encoder) + tuple(decoder), "pooling_align")


def plan_from_dict(doc: dict) -> AlignmentPlan:
    pairs = tuple(AlignmentPair(**p) for p in doc["pairs"])
    return AlignmentPlan(pairs, doc.get("mode", "pooling_align"))
