"""Architecture builders for the supported CNN families.

Topologies follow the standard published reference layouts (VGG-16 config D,
GoogLeNet without auxiliary heads, ResNet-18, MobileNetV2, EfficientNet-B0)
so that trainable parameter counts match the usual reference numbers exactly.
Weights are He-uniform from an explicit seed; biases and BatchNorm shifts
start at zero.
"""

from __future__ import annotations

import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError
from .graph import Graph, Node
from .tensor import Tensor

FAMILIES = ("vgg16", "googlenet", "resnet18", "mobilenet_v2", "efficientnet_b0", "tiny_cnn")

DEFAULT_INPUT = {
    "vgg16": (224, 224),
    "googlenet": (224, 224),
    "resnet18": (224, 224),
    "mobilenet_v2": (224, 224),
    "efficientnet_b0": (224, 224),
    "tiny_cnn": (32, 32),
}


class GraphBuilder:
    """Incremental graph construction with channel tracking and seeded init."""

    def __init__(self, input_shape: Tuple[int, int, int], seed: int = 0, materialize: bool = True):
        self.rng = np.random.default_rng(seed)
        self.materialize = materialize
        self.nodes = [Node("input", "input")]
        self.channels: Dict[str, int] = {"input": input_shape[2]}
        self.input_shape = input_shape
        self._counts: Dict[str, int] = {}

    def _id(self, prefix: str, name: Optional[str]) -> str:
        if name:
            return name
        k = self._counts.get(prefix, 0)
        self._counts[prefix] = k + 1
        return f"{prefix}{k}"

    def _add(self, node: Node, channels: int) -> str:
        self.nodes.append(node)
        self.channels[node.id] = channels
        return node.id

    def he_uniform(self, shape, fan_in: int) -> Tensor:
        if not self.materialize:
            return Tensor(np.zeros(shape, dtype=np.float32))
        bound = np.float32(math.sqrt(6.0 / fan_in))
        w = self.rng.random(shape, dtype=np.float32)
        w *= 2 * bound
        w -= bound
        return Tensor(w)

    @staticmethod
    def zeros(n: int) -> Tensor:
        return Tensor(np.zeros(n, dtype=np.float32))

    @staticmethod
    def ones(n: int) -> Tensor:
        return Tensor(np.ones(n, dtype=np.float32))

    def conv(self, x, cout, k, stride=1, pad=0, groups=1, bias=True, name=None) -> str:
        cin = self.channels[x]
        kh, kw = (k, k) if isinstance(k, int) else k
        if cin % groups or cout % groups:
            raise InvalidArgumentError(f"groups={groups} does not divide {cin}->{cout}")
        w = {"kernel": self.he_uniform((kh, kw, cin // groups, cout), kh * kw * cin // groups)}
        if bias:
            w["bias"] = self.zeros(cout)
        attrs = dict(kh=kh, kw=kw, stride=stride, pad=pad, groups=groups, has_bias=bias, cin=cin, cout=cout)
        return self._add(Node(self._id("conv", name), "conv2d", [x], attrs, w), cout)

    def depthwise(self, x, k, stride=1, pad=0, bias=False, name=None) -> str:
        c = self.channels[x]
        w = {"kernel": self.he_uniform((k, k, 1, c), k * k)}
        if bias:
            w["bias"] = self.zeros(c)
        attrs = dict(kh=k, kw=k, stride=stride, pad=pad, has_bias=bias, channels=c)
        return self._add(Node(self._id("dwconv", name), "depthwise_conv2d", [x], attrs, w), c)

    def bn(self, x, eps=1e-5, name=None) -> str:
        c = self.channels[x]
        w = {"gamma": self.ones(c), "beta": self.zeros(c), "mean": self.zeros(c), "var": self.ones(c)}
        return self._add(Node(self._id("bn", name), "batchnorm", [x], dict(eps=eps, channels=c), w), c)

    def act(self, x, op="relu", name=None) -> str:
        return self._add(Node(self._id(op, name), op, [x]), self.channels[x])

    def conv_bn_act(self, x, cout, k, stride=1, pad=None, groups=1, act="relu", eps=1e-5) -> str:
        pad = (k // 2) if pad is None else pad
        y = self.bn(self.conv(x, cout, k, stride, pad, groups, bias=False), eps=eps)
        return self.act(y, act) if act else y

    def dw_bn_act(self, x, k, stride, act) -> str:
        y = self.bn(self.depthwise(x, k, stride, pad=k // 2))
        return self.act(y, act) if act else y

    def maxpool(self, x, k, stride, pad=0, ceil=False, name=None) -> str:
        attrs = dict(k=k, stride=stride, pad=pad, ceil=ceil)
        return self._add(Node(self._id("maxpool", name), "maxpool", [x], attrs), self.channels[x])

    def avgpool(self, x, k, stride, name=None) -> str:
        return self._add(Node(self._id("avgpool", name), "avgpool", [x], dict(k=k, stride=stride)), self.channels[x])

    def gap(self, x, name=None) -> str:
        return self._add(Node(self._id("gap", name), "global_avgpool", [x]), self.channels[x])

    def fc(self, x, out_features, in_features=None, name=None) -> str:
        fin = in_features or self.channels[x]
        w = {"kernel": self.he_uniform((fin, out_features), fin), "bias": self.zeros(out_features)}
        attrs = dict(in_features=fin, out_features=out_features)
        return self._add(Node(self._id("fc", name), "fc", [x], attrs, w), out_features)

    def add(self, a, b, name=None) -> str:
        return self._add(Node(self._id("add", name), "add", [a, b]), self.channels[a])

    def concat(self, xs: Sequence[str], name=None) -> str:
        c = sum(self.channels[x] for x in xs)
        return self._add(Node(self._id("concat", name), "concat", list(xs), dict(axis=3)), c)

    def squeeze_excite(self, x, squeeze: int, name=None) -> str:
        c = self.channels[x]
        w = {
            "w1": self.he_uniform((c, squeeze), c),
            "b1": self.zeros(squeeze),
            "w2": self.he_uniform((squeeze, c), squeeze),
            "b2": self.zeros(c),
        }
        attrs = dict(channels=c, squeeze=squeeze, ratio=squeeze / c)
        return self._add(Node(self._id("se", name), "squeeze_excite", [x], attrs, w), c)

    def softmax(self, x) -> str:
        return self._add(Node("softmax", "softmax", [x]), self.channels[x])

    def finish(self, out: str, family: str, num_classes: int, **meta) -> Graph:
        md = {"family": family, "num_classes": num_classes, "quantization": "none", **meta}
        return Graph(self.nodes, self.input_shape, [out], md).validate()


# --- families ----------------------------------------------------------------

_VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def _vgg16(b: GraphBuilder, num_classes: int) -> str:
    h, w, _ = b.input_shape
    if h % 32 or w % 32:
        raise InvalidArgumentError("vgg16 input size must be a multiple of 32")
    x = "input"
    for v in _VGG16_CFG:
        x = b.maxpool(x, 2, 2) if v == "M" else b.act(b.conv(x, v, 3, 1, 1, bias=True))
    x = b.act(b.fc(x, 4096, in_features=(h // 32) * (w // 32) * 512))
    x = b.act(b.fc(x, 4096))
    return b.fc(x, num_classes, name="head")


def _inception(b: GraphBuilder, x, c1, c3r, c3, c5r, c5, pp) -> str:
    eps = 1e-3
    b1 = b.conv_bn_act(x, c1, 1, eps=eps)
    b2 = b.conv_bn_act(b.conv_bn_act(x, c3r, 1, eps=eps), c3, 3, eps=eps)
    # the widely used reference implementation uses 3x3 here, not 5x5
    b3 = b.conv_bn_act(b.conv_bn_act(x, c5r, 1, eps=eps), c5, 3, eps=eps)
    b4 = b.conv_bn_act(b.maxpool(x, 3, 1, 1, ceil=True), pp, 1, eps=eps)
    return b.concat([b1, b2, b3, b4])


def _googlenet(b: GraphBuilder, num_classes: int) -> str:
    eps = 1e-3
    x = b.conv_bn_act("input", 64, 7, 2, 3, eps=eps)
    x = b.maxpool(x, 3, 2, ceil=True)
    x = b.conv_bn_act(x, 64, 1, eps=eps)
    x = b.conv_bn_act(x, 192, 3, eps=eps)
    x = b.maxpool(x, 3, 2, ceil=True)
    x = _inception(b, x, 64, 96, 128, 16, 32, 32)
    x = _inception(b, x, 128, 128, 192, 32, 96, 64)
    x = b.maxpool(x, 3, 2, ceil=True)
    x = _inception(b, x, 192, 96, 208, 16, 48, 64)
    x = _inception(b, x, 160, 112, 224, 24, 64, 64)
    x = _inception(b, x, 128, 128, 256, 24, 64, 64)
    x = _inception(b, x, 112, 144, 288, 32, 64, 64)
    x = _inception(b, x, 256, 160, 320, 32, 128, 128)
    x = b.maxpool(x, 2, 2, ceil=True)
    x = _inception(b, x, 256, 160, 320, 32, 128, 128)
    x = _inception(b, x, 384, 192, 384, 48, 128, 128)
    return b.fc(b.gap(x), num_classes, name="head")


def _resnet18(b: GraphBuilder, num_classes: int) -> str:
    x = b.conv_bn_act("input", 64, 7, 2, 3)
    x = b.maxpool(x, 3, 2, 1)
    for i, c in enumerate((64, 128, 256, 512)):
        for j in range(2):
            stride = 2 if (i > 0 and j == 0) else 1
            shortcut = x
            y = b.conv_bn_act(x, c, 3, stride)
            y = b.conv_bn_act(y, c, 3, 1, act=None)
            if stride != 1 or b.channels[x] != c:
                shortcut = b.conv_bn_act(x, c, 1, stride, 0, act=None)
            x = b.act(b.add(y, shortcut))
    return b.fc(b.gap(x), num_classes, name="head")


_MBV2_CFG = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def _mobilenet_v2(b: GraphBuilder, num_classes: int) -> str:
    x = b.conv_bn_act("input", 32, 3, 2, act="relu6")
    for t, c, n, s in _MBV2_CFG:
        for i in range(n):
            stride = s if i == 0 else 1
            cin = b.channels[x]
            y = x
            if t != 1:
                y = b.conv_bn_act(y, cin * t, 1, act="relu6")
            y = b.dw_bn_act(y, 3, stride, "relu6")
            y = b.conv_bn_act(y, c, 1, act=None)
            x = b.add(x, y) if (stride == 1 and cin == c) else y
    x = b.conv_bn_act(x, 1280, 1, act="relu6")
    return b.fc(b.gap(x), num_classes, name="head")


# (expand ratio, kernel, stride, out channels, repeats)
_EFFB0_CFG = [(1, 3, 1, 16, 1), (6, 3, 2, 24, 2), (6, 5, 2, 40, 2), (6, 3, 2, 80, 3), (6, 5, 1, 112, 3), (6, 5, 2, 192, 4), (6, 3, 1, 320, 1)]


def _efficientnet_b0(b: GraphBuilder, num_classes: int) -> str:
    eps = 1e-3
    x = b.conv_bn_act("input", 32, 3, 2, act="silu", eps=eps)
    for t, k, s, c, n in _EFFB0_CFG:
        for i in range(n):
            stride = s if i == 0 else 1
            cin = b.channels[x]
            y = x
            if t != 1:
                y = b.conv_bn_act(y, cin * t, 1, act="silu", eps=eps)
            y = b.bn(b.depthwise(y, k, stride, pad=k // 2), eps=eps)
            y = b.act(y, "silu")
            y = b.squeeze_excite(y, max(1, cin // 4))
            y = b.conv_bn_act(y, c, 1, act=None, eps=eps)
            x = b.add(x, y) if (stride == 1 and cin == c) else y
    x = b.conv_bn_act(x, 1280, 1, act="silu", eps=eps)
    return b.fc(b.gap(x), num_classes, name="head")


TINY_DEFAULTS = {"width": 8, "depth": 2, "batchnorm": True}


def _tiny_cnn(b: GraphBuilder, num_classes: int, width: int = 8, depth: int = 2, batchnorm: bool = True) -> str:
    if width < 1 or depth < 1:
        raise InvalidArgumentError("tiny_cnn width and depth must be positive")
    x = "input"
    for i in range(depth):
        c = width * 2**i
        if batchnorm:
            x = b.conv_bn_act(x, c, 3, 1, 1)
        else:
            x = b.act(b.conv(x, c, 3, 1, 1, bias=True))
        if i < depth - 1:
            x = b.maxpool(x, 2, 2)
    return b.fc(b.gap(x), num_classes, name="head")


_BUILDERS = {
    "vgg16": _vgg16,
    "googlenet": _googlenet,
    "resnet18": _resnet18,
    "mobilenet_v2": _mobilenet_v2,
    "efficientnet_b0": _efficientnet_b0,
    "tiny_cnn": _tiny_cnn,
}


def build_architecture(
    family: str,
    num_classes: int,
    input_size: Optional[Tuple[int, int]] = None,
    init_seed: int = 0,
    materialize: bool = True,
    **config,
) -> Graph:
    """Build a classifier graph ending in a softmax over ``num_classes``.

    ``config`` is forwarded to the family builder; only ``tiny_cnn`` takes any
    (``width``, ``depth``, ``batchnorm``). With ``materialize=False`` all
    weights are zero-filled, which is enough for counting and sizing.
    """
    if family not in _BUILDERS:
        raise InvalidArgumentError(f"unknown family '{family}' (expected one of {', '.join(FAMILIES)})")
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    if config and family != "tiny_cnn":
        raise InvalidArgumentError(f"{family} takes no extra config ({sorted(config)})")
    h, w = input_size or DEFAULT_INPUT[family]
    min_size = 8 if family == "tiny_cnn" else 32
    if h < min_size or w < min_size:
        raise InvalidArgumentError(f"{family} needs input of at least {min_size}x{min_size}")
    b = GraphBuilder((h, w, 3), init_seed, materialize)
    head = _BUILDERS[family](b, num_classes, **config)
    meta = {"tiny_config": {**TINY_DEFAULTS, **config}} if family == "tiny_cnn" else {}
    return b.finish(b.softmax(head), family, num_classes, **meta)
