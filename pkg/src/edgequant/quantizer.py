"""Post-training quantization passes and min/max calibration.

Three passes, each taking an unquantized graph and returning a new tagged one:

* :func:`quantize_fp16`    every stored tensor to IEEE binary16
* :func:`quantize_dynamic` int8 matmul weights, activations quantized at run time
* :func:`quantize_full`    int8 weights and activations, ranges from :func:`calibrate`
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable

import numpy as np

from .engine.executor import ExecMode, Executor
from .engine.fixedpoint import quantize_multiplier
from .errors import CalibrationIncompleteError, InvalidArgumentError, InvalidStateError
from .graph import MATMUL_OPS, Graph, Node, fold_batchnorm, has_batchnorm
from .tensor import QuantParams, Tensor, choose_qparams_asymmetric, choose_qparams_symmetric, quantize_affine, to_f16_tensor

DYNAMIC_MIN_ELEMENTS = 1024
DEFAULT_CALIBRATION_BATCHES = 100


def _require_unquantized(g: Graph, pass_name: str):
    if g.quantization != "none":
        raise InvalidStateError(f"{pass_name}: graph is already quantized ('{g.quantization}')")


# --- calibration statistics -------------------------------------------------


@dataclass
class TensorRange:
    min: float
    max: float
    samples_seen: int = 0

    def merge(self, other: "TensorRange") -> "TensorRange":
        return TensorRange(min(self.min, other.min), max(self.max, other.max), self.samples_seen + other.samples_seen)


@dataclass
class CalibrationStats:
    ranges: Dict[str, TensorRange] = field(default_factory=dict)

    def __getitem__(self, key: str) -> TensorRange:
        return self.ranges[key]

    def __contains__(self, key: str) -> bool:
        return key in self.ranges

    def __eq__(self, other) -> bool:
        return isinstance(other, CalibrationStats) and self.ranges == other.ranges

    def observe(self, tensor_id: str, x: np.ndarray):
        r = TensorRange(float(np.min(x)), float(np.max(x)), int(x.shape[0]))
        old = self.ranges.get(tensor_id)
        self.ranges[tensor_id] = old.merge(r) if old else r

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = dict(self.ranges)
        for k, r in other.ranges.items():
            out[k] = out[k].merge(r) if k in out else r
        return CalibrationStats(out)

    def dumps(self) -> str:
        lines = ["# tensor_id\tmin\tmax\tsamples_seen"]
        for k, r in self.ranges.items():
            lines.append(f"{k}\t{r.min!r}\t{r.max!r}\t{r.samples_seen}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CalibrationStats":
        ranges = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise InvalidArgumentError(f"stats line {lineno}: expected 4 tab-separated fields")
            lo, hi = float(parts[1]), float(parts[2])
            if lo > hi:
                raise InvalidArgumentError(f"stats line {lineno}: min > max for '{parts[0]}'")
            ranges[parts[0]] = TensorRange(lo, hi, int(parts[3]))
        return cls(ranges)

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "CalibrationStats":
        return cls.loads(Path(path).read_text())


def calibrate(
    g: Graph,
    representative: Iterable[np.ndarray],
    max_batches: int = DEFAULT_CALIBRATION_BATCHES,
) -> CalibrationStats:
    """Record running min/max of the input and every node output.

    BatchNorm is folded first so the recorded ids are those of the graph that
    :func:`quantize_full` will produce. Plain min/max: no clipping, no averaging.
    """
    _require_unquantized(g, "calibrate")
    if max_batches < 1:
        raise InvalidArgumentError("max_batches must be >= 1")
    folded = fold_batchnorm(g) if has_batchnorm(g) else g
    ex = Executor(folded, ExecMode.F32)
    stats = CalibrationStats()
    seen = 0
    for batch in itertools.islice(representative, max_batches):
        for k, v in ex.trace(batch).items():
            if k in folded.outputs and folded.node(k).op == "softmax":
                continue
            stats.observe(k, v)
        seen += 1
    if seen == 0:
        raise InvalidArgumentError("representative dataset yielded no batches")
    return stats


# --- passes ------------------------------------------------------------------


def quantize_fp16(g: Graph) -> Graph:
    _require_unquantized(g, "quantize_fp16")
    out = g.copy()
    for n in out.nodes:
        n.weights = {k: to_f16_tensor(t.data) for k, t in n.weights.items()}
    out.metadata["quantization"] = "fp16"
    return out


def _weight_qparams(n: Node, kernel: np.ndarray, per_channel: bool) -> QuantParams:
    if n.op == "fc" or not per_channel:
        return choose_qparams_symmetric(float(np.max(np.abs(kernel))))
    max_abs = np.max(np.abs(kernel).reshape(-1, kernel.shape[-1]), axis=0)
    return choose_qparams_symmetric(max_abs, axis=kernel.ndim - 1)


def quantize_dynamic(g: Graph, per_channel: bool = True, min_elements: int = DYNAMIC_MIN_ELEMENTS) -> Graph:
    """int8 weights for conv/depthwise/fc kernels with at least ``min_elements``.

    Conv kernels get one symmetric scale per output channel (``per_channel=False``
    switches to a single scale), fc kernels a single scale. Biases and
    everything else stay float32.
    """
    _require_unquantized(g, "quantize_dynamic")
    out = fold_batchnorm(g) if has_batchnorm(g) else g.copy()
    for n in out.nodes:
        if n.op in MATMUL_OPS and n.weights["kernel"].size >= min_elements:
            k = n.weights["kernel"].data
            n.weights["kernel"] = quantize_affine(k, _weight_qparams(n, k, per_channel))
    out.metadata["quantization"] = "dynamic"
    return out.validate()


_FUSABLE = ("conv2d", "depthwise_conv2d", "fc", "add")
_SHARED_QP = ("relu", "relu6", "maxpool", "avgpool", "global_avgpool")


def quantize_full(g: Graph, stats: CalibrationStats, per_channel: bool = True) -> Graph:
    """Full-integer graph: int8 weights and activations, i32 biases.

    Activation parameters come from the calibrated ranges. A conv/fc/add whose
    only consumer is a ReLU/ReLU6 takes the activation's range, so the
    activation becomes a clamp at the zero point. Pools and ReLUs share their
    input's parameters. A Quantize node follows the input and a Dequantize node
    precedes each softmax.
    """
    _require_unquantized(g, "quantize_full")
    if stats is None:
        raise CalibrationIncompleteError("<all>")
    src = fold_batchnorm(g) if has_batchnorm(g) else g.copy()
    consumers = src.consumers()
    idx = src.index()

    def qp_from_stats(tid: str) -> QuantParams:
        if tid not in stats:
            raise CalibrationIncompleteError(tid)
        r = stats[tid]
        return choose_qparams_asymmetric(r.min, r.max)

    # activation parameters per node output
    qps: Dict[str, QuantParams] = {}
    for n in src.nodes:
        if n.op == "softmax":
            continue
        if n.op in _SHARED_QP:
            qps[n.id] = qps[n.inputs[0]]
            continue
        cons = consumers[n.id]
        if n.op in _FUSABLE and len(cons) == 1 and idx[cons[0]].op in ("relu", "relu6") and n.id not in src.outputs:
            qps[n.id] = qp_from_stats(cons[0])
        else:
            qps[n.id] = qp_from_stats(n.id)

    nodes = [src.nodes[0].clone(), Node("quantize_input", "quantize", [src.input_id], {}, {}, qps[src.input_id])]
    rename = {src.input_id: "quantize_input"}
    outputs = list(src.outputs)
    for n in src.nodes[1:]:
        m = n.clone()
        m.inputs = [rename.get(i, i) for i in m.inputs]
        if m.op == "softmax":
            dq = Node(f"{m.id}_dequantize", "dequantize", list(m.inputs))
            m.inputs = [dq.id]
            nodes.extend([dq, m])
            continue
        m.out_qparams = qps[n.id]
        if m.op in MATMUL_OPS:
            _quantize_matmul(m, qps[n.inputs[0]], qps[n.id], per_channel)
        nodes.append(m)
    for o in list(outputs):
        if idx[o].op != "softmax":
            dq = Node(f"{o}_dequantize", "dequantize", [o])
            nodes.append(dq)
            outputs[outputs.index(o)] = dq.id
    md = dict(src.metadata, quantization="full-int")
    return Graph(nodes, src.input_shape, outputs, md).validate()


def _quantize_matmul(n: Node, in_qp: QuantParams, out_qp: QuantParams, per_channel: bool):
    k = n.weights["kernel"].data
    wqp = _weight_qparams(n, k, per_channel)
    cout = k.shape[-1]
    w_scales = np.broadcast_to(wqp.scale_array().astype(np.float64), (cout,))
    bias_scale = in_qp.scale * w_scales
    n.weights["kernel"] = quantize_affine(k, wqp)
    bias = n.weights["bias"].to_float().astype(np.float64) if "bias" in n.weights else np.zeros(cout)
    bq = np.clip(np.rint(bias / bias_scale), -(2**31), 2**31 - 1).astype(np.int32)
    n.weights["bias"] = Tensor(bq, QuantParams(tuple(bias_scale), (0,) * cout, axis=0, symmetric=True))
    if n.op != "fc":
        n.attrs["has_bias"] = True
    m0, shift = quantize_multiplier(bias_scale / out_qp.scale)
    n.weights["requant_m0"] = Tensor(np.asarray(m0, dtype=np.int32))
    n.weights["requant_shift"] = Tensor(np.asarray(shift, dtype=np.int32))


def batches_of(images: np.ndarray, batch_size: int = 32):
    for i in range(0, len(images), batch_size):
        yield images[i : i + batch_size]
