"""Layer-graph model representation and graph-level transforms.

Layout is NHWC. Weight layouts:

* ``conv2d``            kernel ``(kh, kw, cin // groups, cout)``, bias ``(cout,)``
* ``depthwise_conv2d``  kernel ``(kh, kw, 1, channels)``, bias ``(channels,)``
* ``fc``                kernel ``(in_features, out_features)``, bias ``(out,)``
* ``batchnorm``         gamma, beta, mean, var, each ``(channels,)``
* ``squeeze_excite``    w1 ``(C, S)``, b1 ``(S,)``, w2 ``(S, C)``, b2 ``(C,)``

The output channel is always the last weight axis.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import InvalidArgumentError, UnsupportedPatternError
from .tensor import DType, QuantParams, Tensor

OPS = {
    "input",
    "conv2d",
    "depthwise_conv2d",
    "fc",
    "batchnorm",
    "relu",
    "relu6",
    "silu",
    "maxpool",
    "avgpool",
    "global_avgpool",
    "add",
    "concat",
    "softmax",
    "quantize",
    "dequantize",
    "squeeze_excite",
}

MATMUL_OPS = ("conv2d", "depthwise_conv2d", "fc")

QUANT_MODES = ("none", "fp16", "dynamic", "full-int")

# weight names that count towards the trainable parameter total
TRAINABLE = ("kernel", "bias", "gamma", "beta", "w1", "b1", "w2", "b2")


@dataclass
class Node:
    id: str
    op: str
    inputs: List[str] = field(default_factory=list)
    attrs: Dict = field(default_factory=dict)
    weights: Dict[str, Tensor] = field(default_factory=dict)
    out_qparams: Optional[QuantParams] = None

    def __post_init__(self):
        if self.op not in OPS:
            raise InvalidArgumentError(f"unknown op '{self.op}' for node '{self.id}'")

    def clone(self) -> "Node":
        return Node(
            self.id,
            self.op,
            list(self.inputs),
            copy.deepcopy(self.attrs),
            dict(self.weights),
            self.out_qparams,
        )


@dataclass
class Graph:
    """Topologically ordered nodes, the first of which is the input placeholder.

    ``metadata`` always carries ``family``, ``num_classes`` and ``quantization``
    (one of ``QUANT_MODES``); trainers add ``class_names``.
    """

    nodes: List[Node]
    input_shape: tuple  # (H, W, C); batch dimension is free
    outputs: List[str]
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.metadata.setdefault("quantization", "none")

    @property
    def input_spec(self) -> dict:
        return {"shape": [None, *self.input_shape], "dtype": DType.F32.value}

    @property
    def quantization(self) -> str:
        return self.metadata["quantization"]

    @property
    def input_id(self) -> str:
        return self.nodes[0].id

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def index(self) -> Dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out

    def copy(self) -> "Graph":
        return Graph(
            [n.clone() for n in self.nodes],
            self.input_shape,
            list(self.outputs),
            copy.deepcopy(self.metadata),
        )

    def tensors(self) -> Iterable:
        """(qualified name, tensor) pairs in node order."""
        for n in self.nodes:
            for name, t in n.weights.items():
                yield f"{n.id}.{name}", t

    def validate(self) -> "Graph":
        if not self.nodes or self.nodes[0].op != "input":
            raise InvalidArgumentError("graph must start with its input placeholder")
        seen = set()
        for n in self.nodes:
            if n.id in seen:
                raise InvalidArgumentError(f"duplicate node id '{n.id}'")
            if n.op == "input" and n is not self.nodes[0]:
                raise InvalidArgumentError("graph has more than one input placeholder")
            for i in n.inputs:
                if i not in seen:
                    raise InvalidArgumentError(
                        f"node '{n.id}' reads '{i}' which is not an earlier node"
                    )
            seen.add(n.id)
        for o in self.outputs:
            if o not in seen:
                raise InvalidArgumentError(f"output '{o}' is not a node")
        reach = {self.nodes[0].id}
        for n in self.nodes[1:]:
            if n.inputs and all(i in reach for i in n.inputs):
                reach.add(n.id)
            else:
                raise InvalidArgumentError(f"node '{n.id}' is not reachable from the input")
        if self.metadata.get("quantization") not in QUANT_MODES:
            raise InvalidArgumentError(f"bad quantization tag {self.metadata.get('quantization')}")
        return self


def param_count(g: Graph) -> int:
    """Trainable parameter count.

    BatchNorm running statistics are excluded (they are stored, not trained);
    requantization constants added by the full-integer pass are excluded too.
    """
    total = 0
    for n in g.nodes:
        for name, t in n.weights.items():
            if name in TRAINABLE:
                total += t.size
    return total


def weight_bytes(g: Graph) -> int:
    return sum(t.nbytes for _, t in g.tensors())


# --- shape helpers -----------------------------------------------------------


def resolve_padding(size: int, k: int, stride: int, pad, ceil: bool = False):
    """Return (pad_before, pad_after, out_size) along one spatial axis."""
    if pad == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    p = 0 if pad == "valid" else int(pad)
    span = size + 2 * p - k
    if span < 0:
        raise InvalidArgumentError(f"window {k} larger than padded input {size + 2 * p}")
    if ceil:
        out = -(-span // stride) + 1
        # the last window must start inside the input or left padding
        if (out - 1) * stride >= size + p:
            out -= 1
    else:
        out = span // stride + 1
    extra = max((out - 1) * stride + k - (size + 2 * p), 0)
    return p, p + extra, out


def infer_shapes(g: Graph, batch: int = 1) -> Dict[str, tuple]:
    """Static output shape of every node for a given batch size."""
    shapes: Dict[str, tuple] = {}
    for n in g.nodes:
        a = n.attrs
        if n.op == "input":
            shapes[n.id] = (batch, *g.input_shape)
            continue
        s = shapes[n.inputs[0]]
        if n.op in ("conv2d", "depthwise_conv2d", "maxpool", "avgpool"):
            kh, kw = (a["kh"], a["kw"]) if "kh" in a else (a["k"], a["k"])
            _, _, oh = resolve_padding(s[1], kh, a["stride"], a.get("pad", 0), a.get("ceil", False))
            _, _, ow = resolve_padding(s[2], kw, a["stride"], a.get("pad", 0), a.get("ceil", False))
            if n.op == "conv2d":
                c = a["cout"]
            else:
                c = s[3]
            shapes[n.id] = (s[0], oh, ow, c)
        elif n.op == "global_avgpool":
            shapes[n.id] = (s[0], 1, 1, s[3])
        elif n.op == "fc":
            shapes[n.id] = (s[0], a["out_features"])
        elif n.op == "concat":
            c = sum(shapes[i][-1] for i in n.inputs)
            shapes[n.id] = (*s[:-1], c)
        else:
            shapes[n.id] = s
    return shapes


# --- transforms --------------------------------------------------------------


def _rewire(nodes: List[Node], outputs: List[str], old: str, new: str):
    for n in nodes:
        n.inputs = [new if i == old else i for i in n.inputs]
    return [new if o == old else o for o in outputs]


def fold_batchnorm(g: Graph) -> Graph:
    """Absorb every BatchNorm into the conv/depthwise/fc node feeding it.

    ``w' = w * gamma / sqrt(var + eps)``, ``b' = (b - mean) * gamma / sqrt(var + eps) + beta``.
    Consumers of the BatchNorm are rewired to the folded producer, which keeps
    its own id.
    """
    if g.quantization != "none":
        raise UnsupportedPatternError("batchnorm folding expects an unquantized graph")
    out = g.copy()
    idx = out.index()
    consumers = out.consumers()
    keep: List[Node] = []
    outputs = out.outputs
    for n in out.nodes:
        if n.op != "batchnorm":
            keep.append(n)
            continue
        prod = idx[n.inputs[0]]
        if prod.op not in MATMUL_OPS or len(consumers[prod.id]) != 1 or prod.id in g.outputs:
            raise UnsupportedPatternError(
                f"batchnorm '{n.id}' does not directly follow a conv/depthwise/fc "
                f"with a single consumer (producer '{prod.id}', op {prod.op})"
            )
        gamma = n.weights["gamma"].to_float().astype(np.float64)
        beta = n.weights["beta"].to_float().astype(np.float64)
        mean = n.weights["mean"].to_float().astype(np.float64)
        var = n.weights["var"].to_float().astype(np.float64)
        k = gamma / np.sqrt(var + n.attrs["eps"])
        w = prod.weights["kernel"].to_float().astype(np.float64)
        b = prod.weights["bias"].to_float().astype(np.float64) if "bias" in prod.weights else 0.0
        prod.weights["kernel"] = Tensor((w * k).astype(np.float32))
        prod.weights["bias"] = Tensor(((b - mean) * k + beta).astype(np.float32))
        if prod.op != "fc":
            prod.attrs["has_bias"] = True
        outputs = _rewire(out.nodes, outputs, n.id, prod.id)
    out.nodes = keep
    out.outputs = outputs
    out.metadata["bn_folded"] = True
    return out.validate()


def has_batchnorm(g: Graph) -> bool:
    return any(n.op == "batchnorm" for n in g.nodes)


def import_weights(g: Graph, source: Graph, strict: bool = False) -> Graph:
    """Copy weight tensors from ``source`` into ``g`` by qualified name.

    Tensors whose shape differs (e.g. a classification head sized for another
    class count) are skipped unless ``strict`` is set. Returns a new graph.
    """
    src = dict(source.tensors())
    out = g.copy()
    for n in out.nodes:
        for name, t in list(n.weights.items()):
            key = f"{n.id}.{name}"
            s = src.get(key)
            if s is None:
                if strict:
                    raise InvalidArgumentError(f"source has no tensor '{key}'")
                continue
            if s.shape != t.shape or s.dtype is not t.dtype:
                if strict:
                    raise InvalidArgumentError(f"tensor '{key}' shape/dtype mismatch")
                continue
            n.weights[name] = s
    return out
