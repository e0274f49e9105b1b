"""Graph execution in f32, fp16-weight, dynamic-range int8 and full-integer modes.

Batches are always processed in fixed-size chunks; ``threads`` only decides
how many chunks run concurrently. Every per-sample result therefore depends
on the chunk size alone, never on the worker count. Dynamic-range activation
parameters are derived per sample for the same reason.

Integer matmuls run as float64 GEMMs over integer-valued operands. Products
of int8 codes and zero-point-centred activations stay far below 2**53, so the
accumulators are exact and independent of summation order.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from typing import Dict

import numpy as np

from ..errors import InvalidArgumentError, UnsupportedPatternError
from ..graph import Graph, Node
from ..tensor import QMAX, QMIN, DType, QuantParams, asymmetric_params, dequantize, quantize_array
from . import kernels as K
from .fixedpoint import multiply_by_quantized_multiplier, quantize_multiplier, saturate_i32

DEFAULT_CHUNK = 32
ADD_LEFT_SHIFT = 20


class ExecMode(enum.Enum):
    F32 = "f32"
    FP16 = "fp16"
    DYNAMIC = "dynamic"
    FULL_INT8 = "full-int"


TAG_TO_MODE = {
    "none": ExecMode.F32,
    "fp16": ExecMode.FP16,
    "dynamic": ExecMode.DYNAMIC,
    "full-int": ExecMode.FULL_INT8,
}


def mode_for(g: Graph) -> ExecMode:
    return TAG_TO_MODE[g.quantization]


def parse_mode(mode, g: Graph) -> ExecMode:
    if mode is None or mode == "auto":
        return mode_for(g)
    if isinstance(mode, str):
        try:
            mode = ExecMode(mode)
        except ValueError:
            raise InvalidArgumentError(f"unknown execution mode '{mode}'") from None
    return mode


class Executor:
    """Prepared, read-only execution plan for one graph in one mode.

    Safe to share between threads: ``run`` keeps all scratch state local.
    """

    def __init__(self, g: Graph, mode=None, threads: int = 1, chunk_size: int = DEFAULT_CHUNK, debug: bool = False):
        mode = parse_mode(mode, g)
        if mode is not mode_for(g):
            raise InvalidArgumentError(
                f"mode {mode.value} does not match graph quantization tag '{g.quantization}'"
            )
        self.graph = g
        self.mode = mode
        self.threads = max(1, int(threads))
        self.chunk_size = int(chunk_size)
        self.debug = debug
        self._consumers = g.consumers()
        self._prep: Dict[str, dict] = {}
        prep = {
            ExecMode.F32: self._prepare_float,
            ExecMode.FP16: self._prepare_float,
            ExecMode.DYNAMIC: self._prepare_dynamic,
            ExecMode.FULL_INT8: self._prepare_full,
        }[mode]
        for n in g.nodes:
            if n.op == "batchnorm" and mode in (ExecMode.DYNAMIC, ExecMode.FULL_INT8):
                raise UnsupportedPatternError(f"batchnorm '{n.id}' must be folded for int8 execution")
            self._prep[n.id] = prep(n)

    # --- public ---------------------------------------------------------

    def run(self, batch: np.ndarray) -> np.ndarray:
        """Output probabilities, shape (N, num_classes), float32."""
        batch = self._check_batch(batch)
        chunks = [batch[i : i + self.chunk_size] for i in range(0, len(batch), self.chunk_size)]
        if self.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                outs = list(pool.map(self._run_chunk, chunks))
        else:
            outs = [self._run_chunk(c) for c in chunks]
        return np.concatenate(outs, axis=0)

    def trace(self, batch: np.ndarray) -> Dict[str, np.ndarray]:
        """Every node's output for one batch (float modes only)."""
        if self.mode not in (ExecMode.F32, ExecMode.FP16):
            raise InvalidArgumentError("trace is only available in float modes")
        batch = self._check_batch(batch)
        return self._forward(batch, keep_all=True)

    # --- plumbing -------------------------------------------------------

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.graph.input_shape:
            raise InvalidArgumentError(
                f"batch shape {batch.shape} does not match input (N, {', '.join(map(str, self.graph.input_shape))})"
            )
        return batch

    def _run_chunk(self, x):
        outs = self._forward(x)
        y = outs[self.graph.outputs[0]]
        if y.dtype == np.int8:
            y = dequantize(y, self.graph.node(self.graph.outputs[0]).out_qparams)
        return y.reshape(len(x), -1).astype(np.float32, copy=False)

    def _forward(self, x, keep_all=False):
        g = self.graph
        eval_node = {
            ExecMode.F32: self._eval_float,
            ExecMode.FP16: self._eval_float,
            ExecMode.DYNAMIC: self._eval_dynamic,
            ExecMode.FULL_INT8: self._eval_full,
        }[self.mode]
        vals = {g.input_id: x}
        remaining = {k: len(v) for k, v in self._consumers.items()}
        keep = set(g.outputs)
        for n in g.nodes[1:]:
            ins = [vals[i] for i in n.inputs]
            out = eval_node(n, ins)
            if self.debug and out.dtype == np.int8:
                assert out.min() >= QMIN and out.max() <= QMAX
            vals[n.id] = out
            if not keep_all:
                for i in n.inputs:
                    remaining[i] -= 1
                    if remaining[i] == 0 and i not in keep:
                        del vals[i]
        return vals

    # --- float ----------------------------------------------------------

    def _prepare_float(self, n: Node) -> dict:
        # fp16 weights are widened once here; compute stays in f32
        return {k: t.to_float().astype(np.float32, copy=False) for k, t in n.weights.items()}

    def _eval_float(self, n: Node, ins, w=None):
        w = self._prep[n.id] if w is None else w
        a = n.attrs
        x = ins[0]
        op = n.op
        if op == "conv2d":
            return K.conv2d(x, w["kernel"], w.get("bias"), a["stride"], a["pad"], a.get("groups", 1))
        if op == "depthwise_conv2d":
            return K.depthwise_conv2d(x, w["kernel"], w.get("bias"), a["stride"], a["pad"])
        if op == "fc":
            return K.fc(x, w["kernel"], w.get("bias"))
        if op == "batchnorm":
            return K.batchnorm(x, w["gamma"], w["beta"], w["mean"], w["var"], a["eps"])
        if op == "relu":
            return K.relu(x)
        if op == "relu6":
            return K.relu6(x)
        if op == "silu":
            return K.silu(x)
        if op == "maxpool":
            return K.maxpool(x, a["k"], a["stride"], a.get("pad", 0), a.get("ceil", False))
        if op == "avgpool":
            return K.avgpool(x, a["k"], a["stride"])
        if op == "global_avgpool":
            return K.global_avgpool(x)
        if op == "add":
            return K.add(ins[0], ins[1])
        if op == "concat":
            return K.concat(ins, a.get("axis", 3))
        if op == "softmax":
            return K.softmax(x)
        if op == "squeeze_excite":
            return K.squeeze_excite(x, w["w1"], w["b1"], w["w2"], w["b2"])
        raise UnsupportedPatternError(f"op '{op}' not executable in float mode")

    # --- dynamic range --------------------------------------------------

    def _prepare_dynamic(self, n: Node) -> dict:
        kern = n.weights.get("kernel")
        if n.op in ("conv2d", "depthwise_conv2d", "fc") and kern is not None and kern.dtype is DType.I8:
            qp = kern.qparams
            cout = kern.shape[-1]
            ws = np.broadcast_to(np.asarray(qp.scales, dtype=np.float64), (cout,))
            p = {
                "wq": kern.data.astype(np.float64),
                "w_scale": np.array(ws),
                "bias": n.weights["bias"].to_float().astype(np.float64) if "bias" in n.weights else None,
            }
            return p
        return {"float": self._prepare_float(n)}

    @staticmethod
    def _quantize_per_sample(x):
        flat = x.reshape(len(x), -1)
        s, zp = asymmetric_params(flat.min(axis=1), flat.max(axis=1))
        shape = (len(x),) + (1,) * (x.ndim - 1)
        s, zp = s.reshape(shape), zp.reshape(shape)
        q = np.clip(np.rint(x.astype(np.float64) / s) + zp, QMIN, QMAX)
        return q - zp, s  # zero-point-centred codes, exact small integers

    def _eval_dynamic(self, n: Node, ins):
        p = self._prep[n.id]
        if "float" in p:
            return self._eval_float(n, ins, p["float"])
        x = ins[0]
        n_samples = len(x)
        if n.op == "fc":
            xc, s = self._quantize_per_sample(x.reshape(n_samples, -1))
            acc = xc @ p["wq"]
            y = acc * s.reshape(-1, 1) * p["w_scale"]
        else:
            xc, s = self._quantize_per_sample(x)
            y = self._int_conv(n, xc, p["wq"]) * s * p["w_scale"]
        if p["bias"] is not None:
            y = y + p["bias"]
        return y.astype(np.float32)

    @staticmethod
    def _int_conv(n: Node, xc, wq):
        """Exact integer conv of centred codes (float64 carrier), zero padding."""
        a = n.attrs
        if n.op == "depthwise_conv2d":
            kh, kw, _, c = wq.shape
            pads, (oh, ow) = K.spatial_pads(xc.shape, kh, kw, a["stride"], a["pad"])
            win = K.windows(K.pad_nhwc(xc, pads), kh, kw, a["stride"], oh, ow)
            acc = np.zeros((xc.shape[0], oh, ow, c))
            for i in range(kh):
                for j in range(kw):
                    acc += win[:, :, :, i, j, :] * wq[i, j, 0]
            return acc
        return K.conv2d(xc, wq, None, a["stride"], a["pad"], a.get("groups", 1))

    # --- full integer ---------------------------------------------------

    def _in_qp(self, node_id: str) -> QuantParams:
        qp = self.graph.node(node_id).out_qparams
        if qp is None:
            raise InvalidArgumentError(f"tensor '{node_id}' carries no quantization parameters")
        return qp

    def _prepare_full(self, n: Node) -> dict:
        op = n.op
        if op in ("input", "dequantize", "softmax"):
            return {}
        if op == "quantize":
            return {"qp": n.out_qparams}
        in_qp = self._in_qp(n.inputs[0])
        out_qp = n.out_qparams
        if out_qp is None:
            raise InvalidArgumentError(f"node '{n.id}' has no output quantization parameters")
        p = {"in_zp": in_qp.zero_point, "out_zp": out_qp.zero_point}
        if op in ("conv2d", "depthwise_conv2d", "fc"):
            p["wq"] = n.weights["kernel"].data.astype(np.float64)
            p["bias"] = n.weights["bias"].data.astype(np.int64) if "bias" in n.weights else 0
            p["m0"] = n.weights["requant_m0"].data.astype(np.int64)
            p["shift"] = n.weights["requant_shift"].data.astype(np.int64)
        elif op == "relu6":
            p["hi"] = int(quantize_array(np.float32(6.0), out_qp))
        elif op == "silu":
            codes = np.arange(QMIN, QMAX + 1, dtype=np.int8)
            real = dequantize(codes, in_qp)
            p["lut"] = quantize_array(K.silu(real), out_qp)
        elif op in ("add", "concat"):
            p["terms"] = []
            for i in n.inputs:
                qp = self._in_qp(i)
                m0, sh = quantize_multiplier(qp.scale / (out_qp.scale * 2**ADD_LEFT_SHIFT))
                p["terms"].append((qp.zero_point, m0, sh, qp == out_qp))
        elif op == "squeeze_excite":
            p["float"] = self._prepare_float(n)
            p["in_qp"] = in_qp
        return p

    def _eval_full(self, n: Node, ins):
        p = self._prep[n.id]
        op = n.op
        a = n.attrs
        x = ins[0]
        if op == "quantize":
            return quantize_array(x, p["qp"])
        if op == "dequantize":
            return dequantize(x, self._in_qp(n.inputs[0]))
        if op == "softmax":
            if x.dtype == np.int8:
                raise InvalidArgumentError("softmax expects a dequantized input")
            return K.softmax(x)
        if op in ("conv2d", "depthwise_conv2d", "fc"):
            xc = x.astype(np.float64) - p["in_zp"]
            if op == "fc":
                acc = xc.reshape(len(x), -1) @ p["wq"]
            else:
                acc = self._int_conv(n, xc, p["wq"])
            acc = saturate_i32(acc.astype(np.int64) + p["bias"])
            y = multiply_by_quantized_multiplier(acc, p["m0"], p["shift"]) + p["out_zp"]
            return self._to_i8(y)
        if op == "relu":
            return np.maximum(x, np.int8(p["out_zp"]))
        if op == "relu6":
            return np.clip(x, p["out_zp"], p["hi"]).astype(np.int8)
        if op == "silu":
            return p["lut"][x.astype(np.int64) - QMIN]
        if op == "maxpool":
            pads, (oh, ow) = K.spatial_pads(x.shape, a["k"], a["k"], a["stride"], a.get("pad", 0), a.get("ceil", False))
            xp = K.pad_nhwc(x, pads, QMIN)
            return K.windows(xp, a["k"], a["k"], a["stride"], oh, ow).max(axis=(3, 4))
        if op == "avgpool":
            pads, (oh, ow) = K.spatial_pads(x.shape, a["k"], a["k"], a["stride"], 0)
            win = K.windows(K.pad_nhwc(x, pads), a["k"], a["k"], a["stride"], oh, ow)
            return self._to_i8(_div_round_half_even(win.astype(np.int64).sum(axis=(3, 4)), a["k"] * a["k"]))
        if op == "global_avgpool":
            total = x.astype(np.int64).sum(axis=(1, 2), keepdims=True)
            return self._to_i8(_div_round_half_even(total, x.shape[1] * x.shape[2]))
        if op in ("add", "concat"):
            parts = []
            for xi, (zp, m0, sh, same) in zip(ins, p["terms"]):
                if same and op == "concat":
                    parts.append(xi.astype(np.int64) - p["out_zp"])
                    continue
                shifted = (xi.astype(np.int64) - zp) << ADD_LEFT_SHIFT
                parts.append(multiply_by_quantized_multiplier(shifted, m0, sh))
            if op == "add":
                y = parts[0] + parts[1]
            else:
                y = np.concatenate(parts, axis=a.get("axis", 3))
            return self._to_i8(y + p["out_zp"])
        if op == "squeeze_excite":
            # float fallback: no integer kernel for the sigmoid gate
            xf = dequantize(x, p["in_qp"])
            y = self._eval_float(n, [xf], p["float"])
            return quantize_array(y, n.out_qparams)
        raise UnsupportedPatternError(f"op '{op}' not executable in full-integer mode")

    @staticmethod
    def _to_i8(y):
        return np.clip(y, QMIN, QMAX).astype(np.int8)


def _div_round_half_even(total, count: int):
    q, r = np.divmod(total, count)
    twice = 2 * r
    return q + ((twice > count) | ((twice == count) & (q % 2 == 1)))


def run(g: Graph, batch: np.ndarray, mode=None, threads: int = 1) -> np.ndarray:
    """One-shot convenience wrapper around :class:`Executor`."""
    return Executor(g, mode, threads=threads).run(batch)
