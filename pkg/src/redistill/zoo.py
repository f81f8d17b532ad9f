"""Builders for the standard topologies the analyzer and rewriter operate on.

Every builder returns a validated NetworkGraph whose merge nodes follow the
trunk-first convention (inputs[0] = main path). Downsampling nodes carry a
"downsample" tag; shortcut projection convs carry "projection".
"""

from __future__ import annotations

from .errors import IncompatibleResolution, UnknownModel
from .ir import (
    NetworkGraph,
    OpNode,
    TensorShape,
    activation,
    batchnorm,
    build_graph,
    conv2d,
    fully_connected,
    maxpool,
    upsample,
)


class _Builder:
    """Accumulates nodes along a trunk; returns ids for branch wiring."""

    def __init__(self):
        self.nodes = []
        self.head = None  # id of the current trunk tail

    def add(self, node: OpNode) -> str:
        self.nodes.append(node)
        self.head = node.id
        return node.id

    def conv(self, id, in_c, out_c, kernel=3, stride=1, padding=1, groups=1,
             tags=(), src=None):
        return self.add(conv2d(id, in_c, out_c, kernel, stride, padding, groups,
                               inputs=(src or self.head,), tags=tags))

    def bn_act(self, prefix, fn="ReLU", tags=()):
        self.add(batchnorm(f"{prefix}.bn", inputs=(self.head,), tags=tags))
        self.add(activation(f"{prefix}.act", fn, inputs=(self.head,), tags=tags))
        return self.head


# --- residual classifiers ----------------------------------------------------

def _basic_block(b: _Builder, name, in_c, out_c, stride, groups=1, stage_tag=()):
    block_in = b.head
    tags = set(stage_tag)
    entry_tags = tags | ({"downsample"} if stride > 1 else set())
    b.conv(f"{name}.conv1", in_c, out_c, 3, stride, 1, groups, tags=entry_tags)
    b.add(batchnorm(f"{name}.bn1", inputs=(b.head,), tags=tags))
    b.add(activation(f"{name}.relu1", "ReLU", inputs=(b.head,), tags=tags))
    b.conv(f"{name}.conv2", out_c, out_c, 3, 1, 1, groups, tags=tags)
    main = b.add(batchnorm(f"{name}.bn2", inputs=(b.head,), tags=tags))
    if stride > 1 or in_c != out_c:
        proj = conv2d(f"{name}.proj", in_c, out_c, 1, stride, 0,
                      inputs=(block_in,), tags=tags | {"projection"})
        b.nodes.append(proj)
        proj_bn = batchnorm(f"{name}.proj_bn", inputs=(proj.id,),
                            tags=tags | {"projection"})
        b.nodes.append(proj_bn)
        shortcut = proj_bn.id
    else:
        shortcut = block_in
    b.add(OpNode(f"{name}.add", "Add", inputs=(main, shortcut), tags=tags))
    b.add(activation(f"{name}.relu2", "ReLU", inputs=(b.head,), tags=tags))


def _bottleneck_block(b: _Builder, name, in_c, mid_c, out_c, stride, stage_tag=()):
    block_in = b.head
    tags = set(stage_tag)
    b.conv(f"{name}.conv1", in_c, mid_c, 1, 1, 0, tags=tags)
    b.bn_act(f"{name}.s1", tags=tags)
    entry_tags = tags | ({"downsample"} if stride > 1 else set())
    b.conv(f"{name}.conv2", mid_c, mid_c, 3, stride, 1, tags=entry_tags)
    b.bn_act(f"{name}.s2", tags=tags)
    b.conv(f"{name}.conv3", mid_c, out_c, 1, 1, 0, tags=tags)
    main = b.add(batchnorm(f"{name}.bn3", inputs=(b.head,), tags=tags))
    if stride > 1 or in_c != out_c:
        proj = conv2d(f"{name}.proj", in_c, out_c, 1, stride, 0,
                      inputs=(block_in,), tags=tags | {"projection"})
        b.nodes.append(proj)
        proj_bn = batchnorm(f"{name}.proj_bn", inputs=(proj.id,),
                            tags=tags | {"projection"})
        b.nodes.append(proj_bn)
        shortcut = proj_bn.id
    else:
        shortcut = block_in
    b.add(OpNode(f"{name}.add", "Add", inputs=(main, shortcut), tags=tags))
    b.add(activation(f"{name}.relu3", "ReLU", inputs=(b.head,), tags=tags))


def _resnet_stem(b: _Builder, in_c=3):
    b.conv("conv1", in_c, 64, 7, 2, 3, tags={"downsample", "stem"})
    b.bn_act("stem")
    b.add(maxpool("maxpool", 3, 2, 1, inputs=(b.head,), tags={"downsample"}))


def resnet18(res=224, num_classes=1000, groups=1):
    if res % 32 != 0:
        raise IncompatibleResolution(f"resnet18 needs resolution divisible by 32, got {res}")
    b = _Builder()
    b.add(OpNode("input", "Input"))
    _resnet_stem(b)
    channels = [64, 128, 256, 512]
    in_c = 64
    for stage, out_c in enumerate(channels, start=1):
        stride = 1 if stage == 1 else 2
        tag = {f"stage:{stage}"}
        _basic_block(b, f"layer{stage}.0", in_c, out_c, stride, groups, tag)
        _basic_block(b, f"layer{stage}.1", out_c, out_c, 1, groups, tag)
        in_c = out_c
    b.add(OpNode("gap", "GlobalAvgPool", inputs=(b.head,)))
    b.add(fully_connected("fc", 512, num_classes, inputs=(b.head,)))
    b.add(OpNode("output", "Output", inputs=(b.head,)))
    return build_graph(b.nodes, TensorShape(1, 3, res, res))


def resnext18(res=224, num_classes=1000, groups=32):
    # 18-layer skeleton with grouped 3x3 convs in the blocks; cardinality 32,
    # per-group width 2 at stage 1. The stem stays ungrouped.
    return resnet18(res, num_classes, groups=groups)


def resnet50(res=224, num_classes=1000):
    if res % 32 != 0:
        raise IncompatibleResolution(f"resnet50 needs resolution divisible by 32, got {res}")
    b = _Builder()
    b.add(OpNode("input", "Input"))
    _resnet_stem(b)
    spec = [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)]
    in_c = 64
    for stage, (mid_c, out_c, blocks) in enumerate(spec, start=1):
        tag = {f"stage:{stage}"}
        for i in range(blocks):
            stride = 2 if (stage > 1 and i == 0) else 1
            _bottleneck_block(b, f"layer{stage}.{i}", in_c, mid_c, out_c, stride, tag)
            in_c = out_c
    b.add(OpNode("gap", "GlobalAvgPool", inputs=(b.head,)))
    b.add(fully_connected("fc", 2048, num_classes, inputs=(b.head,)))
    b.add(OpNode("output", "Output", inputs=(b.head,)))
    return build_graph(b.nodes, TensorShape(1, 3, res, res))


# --- mobilenets ----------------------------------------------------------------

def _inverted_residual(b: _Builder, name, in_c, out_c, stride, expand,
                       kernel=3, act="ReLU6"):
    """Expansion / depthwise / projection primitives of one block."""
    block_in = b.head
    hidden = in_c * expand
    if expand != 1:
        b.conv(f"{name}.expand", in_c, hidden, 1, 1, 0)
        b.bn_act(f"{name}.e", act)
    dw_tags = {"downsample"} if stride > 1 else set()
    b.conv(f"{name}.dw", hidden, hidden, kernel, stride, kernel // 2,
           groups=hidden, tags=dw_tags)
    b.bn_act(f"{name}.d", act)
    b.conv(f"{name}.project", hidden, out_c, 1, 1, 0)
    main = b.add(batchnorm(f"{name}.p.bn", inputs=(b.head,)))
    if stride == 1 and in_c == out_c:
        b.add(OpNode(f"{name}.add", "Add", inputs=(main, block_in)))


def mobilenet_v2(res=224, num_classes=1000):
    if res % 32 != 0:
        raise IncompatibleResolution(f"mobilenet_v2 needs resolution divisible by 32, got {res}")
    b = _Builder()
    b.add(OpNode("input", "Input"))
    b.conv("conv1", 3, 32, 3, 2, 1, tags={"downsample", "stem"})
    b.bn_act("stem", "ReLU6")
    settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    in_c = 32
    idx = 0
    for t, c, n, s in settings:
        for i in range(n):
            stride = s if i == 0 else 1
            _inverted_residual(b, f"block{idx}", in_c, c, stride, t)
            in_c = c
            idx += 1
    b.conv("head_conv", in_c, 1280, 1, 1, 0)
    b.bn_act("head", "ReLU6")
    b.add(OpNode("gap", "GlobalAvgPool", inputs=(b.head,)))
    b.add(fully_connected("fc", 1280, num_classes, inputs=(b.head,)))
    b.add(OpNode("output", "Output", inputs=(b.head,)))
    return build_graph(b.nodes, TensorShape(1, 3, res, res))


def mobilenet_v3_small(res=224, num_classes=1000):
    """MobileNetV3-Small body without squeeze-excite gates.

    The IR has no broadcast multiply, so SE branches are omitted; their
    activations are orders of magnitude below the stem peak. Hard-swish is
    represented by the SiLU activation label.
    """
    if res % 32 != 0:
        raise IncompatibleResolution(
            f"mobilenet_v3_small needs resolution divisible by 32, got {res}")
    b = _Builder()
    b.add(OpNode("input", "Input"))
    b.conv("conv1", 3, 16, 3, 2, 1, tags={"downsample", "stem"})
    b.bn_act("stem", "SiLU")
    rows = [(3, 16, 16, "ReLU", 2), (3, 72, 24, "ReLU", 2), (3, 88, 24, "ReLU", 1),
            (5, 96, 40, "SiLU", 2), (5, 240, 40, "SiLU", 1), (5, 240, 40, "SiLU", 1),
            (5, 120, 48, "SiLU", 1), (5, 144, 48, "SiLU", 1), (5, 288, 96, "SiLU", 2),
            (5, 576, 96, "SiLU", 1), (5, 576, 96, "SiLU", 1)]
    in_c = 16
    for idx, (k, exp, out_c, act, s) in enumerate(rows):
        block_in = b.head
        name = f"bneck{idx}"
        if exp != in_c:
            b.conv(f"{name}.expand", in_c, exp, 1, 1, 0)
            b.bn_act(f"{name}.e", act)
        dw_tags = {"downsample"} if s > 1 else set()
        b.conv(f"{name}.dw", exp, exp, k, s, k // 2, groups=exp, tags=dw_tags)
        b.bn_act(f"{name}.d", act)
        b.conv(f"{name}.project", exp, out_c, 1, 1, 0)
        main = b.add(batchnorm(f"{name}.p.bn", inputs=(b.head,)))
        if s == 1 and in_c == out_c:
            b.add(OpNode(f"{name}.add", "Add", inputs=(main, block_in)))
        in_c = out_c
    b.conv("head_conv", in_c, 576, 1, 1, 0)
    b.bn_act("head", "SiLU")
    b.add(OpNode("gap", "GlobalAvgPool", inputs=(b.head,)))
    b.add(fully_connected("fc1", 576, 1024, inputs=(b.head,)))
    b.add(activation("head_act", "SiLU", inputs=(b.head,)))
    b.add(fully_connected("fc2", 1024, num_classes, inputs=(b.head,)))
    b.add(OpNode("output", "Output", inputs=(b.head,)))
    return build_graph(b.nodes, TensorShape(1, 3, res, res))


# --- denoising U-Net -----------------------------------------------------------

def unet_ddpm(res=32, levels=2, base_channels=8, in_channels=1, out_channels=1):
    """Symmetric encoder/decoder with one skip Concat per level."""
    if levels < 1:
        raise IncompatibleResolution("unet_ddpm needs at least one level")
    if res % (2 ** levels) != 0:
        raise IncompatibleResolution(
            f"unet_ddpm with {levels} levels needs resolution divisible by {2 ** levels}")
    b = _Builder()
    b.add(OpNode("input", "Input"))
    skips = []
    in_c = in_channels
    for i in range(levels):
        c = base_channels * (2 ** i)
        b.conv(f"enc{i}.conv", in_c, c, 3, 1, 1)
        b.bn_act(f"enc{i}")
        skips.append((b.head, c))
        b.conv(f"down{i + 1}", c, 2 * c, 3, 2, 1, tags={"downsample"})
        b.bn_act(f"down{i + 1}")
        in_c = 2 * c
    b.conv("bottleneck.conv", in_c, in_c, 3, 1, 1)
    b.bn_act("bottleneck")
    cur_c = in_c
    for i in reversed(range(levels)):
        skip_id, skip_c = skips[i]
        b.add(upsample(f"up{levels - i}", 2, inputs=(b.head,)))
        b.add(OpNode(f"cat{i}", "Concat", inputs=(b.head, skip_id),
                     tags={"unet-skip-target"}))
        b.conv(f"dec{i}.conv", cur_c + skip_c, skip_c, 3, 1, 1)
        b.bn_act(f"dec{i}")
        cur_c = skip_c
    b.conv("head", cur_c, out_channels, 3, 1, 1)
    b.add(OpNode("output", "Output", inputs=(b.head,)))
    return build_graph(b.nodes, TensorShape(1, in_channels, res, res))


_ZOO = {
    "resnet18": resnet18,
    "resnet50": resnet50,
    "resnext18": resnext18,
    "mobilenet_v2": mobilenet_v2,
    "mobilenet_v3_small": mobilenet_v3_small,
    "unet_ddpm": unet_ddpm,
}

DEFAULT_RES = {
    "resnet18": 224, "resnet50": 224, "resnext18": 224,
    "mobilenet_v2": 224, "mobilenet_v3_small": 224, "unet_ddpm": 32,
}


def model_zoo(name: str, res: int | None = None, **config) -> NetworkGraph:
    if name not in _ZOO:
        raise UnknownModel(f"unknown model {name!r}; choose from {sorted(_ZOO)}")
    if res is None:
        res = DEFAULT_RES[name]
    return _ZOO[name](res=res, **config)
