"""Reverse-mode gradients through a graph, for training and gradient checks.

:class:`TrainGraph` holds a mutable copy of a graph's parameters in a chosen
float dtype, runs the forward pass with per-node caches and back-propagates a
gradient w.r.t. the logits (the input of the final softmax).
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .engine import kernels as K
from .errors import InvalidArgumentError, UnsupportedPatternError
from .graph import TRAINABLE, Graph, Node
from .tensor import Tensor

BN_MOMENTUM = 0.1

TRAINABLE_OPS = {
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
}

ParamKey = Tuple[str, str]


class TrainGraph:
    def __init__(self, g: Graph, dtype=np.float32):
        if g.quantization != "none":
            raise InvalidArgumentError("training needs an unquantized float graph")
        for n in g.nodes:
            if n.op not in TRAINABLE_OPS:
                raise UnsupportedPatternError(f"op '{n.op}' (node '{n.id}') is not supported in training")
        self.graph = g
        self.dtype = np.dtype(dtype)
        out = g.node(g.outputs[0])
        if len(g.outputs) != 1 or out.op != "softmax":
            raise UnsupportedPatternError("training needs a single softmax output")
        self.logits_id = out.inputs[0]
        self.params: Dict[ParamKey, np.ndarray] = {}
        self.buffers: Dict[ParamKey, np.ndarray] = {}
        for n in g.nodes:
            for name, t in n.weights.items():
                arr = t.to_float().astype(self.dtype, copy=True)
                (self.params if name in TRAINABLE else self.buffers)[(n.id, name)] = arr
        self._consumers = g.consumers()
        self._cache: Dict[str, tuple] = {}

    # --- helpers ----------------------------------------------------------

    def w(self, n: Node, name: str):
        return self.params.get((n.id, name), self.buffers.get((n.id, name)))

    def to_graph(self) -> Graph:
        out = self.graph.copy()
        for n in out.nodes:
            for name in n.weights:
                arr = self.params.get((n.id, name), self.buffers.get((n.id, name)))
                n.weights[name] = Tensor(arr.astype(np.float32))
        return out

    def state(self) -> Dict[ParamKey, np.ndarray]:
        return {k: v.copy() for k, v in {**self.params, **self.buffers}.items()}

    def load_state(self, state):
        for k, v in state.items():
            (self.params if k in self.params else self.buffers)[k] = v.copy()

    # --- forward ----------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        """Logits for a batch; caches intermediates for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        vals = {self.graph.input_id: x}
        self._cache = {}
        for n in self.graph.nodes[1:]:
            if n.op == "softmax":
                continue
            ins = [vals[i] for i in n.inputs]
            vals[n.id] = self._forward_node(n, ins, training)
        self._logits_shape = vals[self.logits_id].shape
        return vals[self.logits_id].reshape(len(x), -1)

    def _forward_node(self, n: Node, ins, training):
        a = n.attrs
        x = ins[0]
        op = n.op
        c = self._cache
        if op == "conv2d":
            w, b = self.w(n, "kernel"), self.w(n, "bias")
            groups = a.get("groups", 1)
            kh, kw, cin_g, cout = w.shape
            cout_g = cout // groups
            cols_list, outs = [], []
            for gi in range(groups):
                xs = x[..., gi * cin_g : (gi + 1) * cin_g] if groups > 1 else x
                cols, (oh, ow) = K.im2col(xs, kh, kw, a["stride"], a["pad"])
                cols_list.append(cols)
                outs.append(cols @ w[..., gi * cout_g : (gi + 1) * cout_g].reshape(-1, cout_g))
            y = np.concatenate(outs, axis=1).reshape(len(x), oh, ow, cout)
            if b is not None:
                y = y + b
            c[n.id] = (x.shape, cols_list, (oh, ow))
            return y
        if op == "depthwise_conv2d":
            w, b = self.w(n, "kernel"), self.w(n, "bias")
            kh, kw, _, ch = w.shape
            pads, (oh, ow) = K.spatial_pads(x.shape, kh, kw, a["stride"], a["pad"])
            win = K.windows(K.pad_nhwc(x, pads), kh, kw, a["stride"], oh, ow)
            y = np.zeros((len(x), oh, ow, ch), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    y += win[:, :, :, i, j, :] * w[i, j, 0]
            if b is not None:
                y = y + b
            c[n.id] = (x.shape, win, pads, (oh, ow))
            return y
        if op == "fc":
            xf = x.reshape(len(x), -1)
            c[n.id] = (x.shape, xf)
            return xf @ self.w(n, "kernel") + self.w(n, "bias")
        if op == "batchnorm":
            gamma, beta = self.w(n, "gamma"), self.w(n, "beta")
            eps = a["eps"]
            if training:
                mu = x.mean(axis=(0, 1, 2))
                var = x.var(axis=(0, 1, 2))
                m = x.size // x.shape[-1]
                rm, rv = (n.id, "mean"), (n.id, "var")
                self.buffers[rm] = (1 - BN_MOMENTUM) * self.buffers[rm] + BN_MOMENTUM * mu
                unbiased = var * m / max(m - 1, 1)
                self.buffers[rv] = (1 - BN_MOMENTUM) * self.buffers[rv] + BN_MOMENTUM * unbiased
            else:
                mu, var = self.w(n, "mean"), self.w(n, "var")
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x - mu) * inv
            c[n.id] = (xhat, inv, training)
            return xhat * gamma + beta
        if op == "relu":
            c[n.id] = (x,)
            return K.relu(x)
        if op == "relu6":
            c[n.id] = (x,)
            return K.relu6(x)
        if op == "silu":
            c[n.id] = (x,)
            return K.silu(x)
        if op == "maxpool":
            k, s = a["k"], a["stride"]
            pads, (oh, ow) = K.spatial_pads(x.shape, k, k, s, a.get("pad", 0), a.get("ceil", False))
            win = K.windows(K.pad_nhwc(x, pads, -np.inf), k, k, s, oh, ow)
            flat = win.reshape(*win.shape[:3], k * k, win.shape[-1])
            arg = flat.argmax(axis=3)
            c[n.id] = (x.shape, pads, arg, (oh, ow))
            return np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        if op == "avgpool":
            k, s = a["k"], a["stride"]
            pads, (oh, ow) = K.spatial_pads(x.shape, k, k, s, 0)
            c[n.id] = (x.shape, pads, (oh, ow))
            return K.avgpool(x, k, s)
        if op == "global_avgpool":
            c[n.id] = (x.shape,)
            return K.global_avgpool(x)
        if op == "add":
            return ins[0] + ins[1]
        if op == "concat":
            c[n.id] = ([i.shape[-1] for i in ins],)
            return np.concatenate(ins, axis=3)
        raise UnsupportedPatternError(f"op '{op}' is not supported in training")

    # --- backward ---------------------------------------------------------

    def backward(self, dlogits: np.ndarray) -> Dict[ParamKey, np.ndarray]:
        """Gradients of every trainable parameter given d(loss)/d(logits).

        The gradient w.r.t. the graph input is left in ``self.input_grad``.
        """
        grads: Dict[ParamKey, np.ndarray] = {}
        dvals: Dict[str, np.ndarray] = {}
        dvals[self.logits_id] = np.asarray(dlogits, dtype=self.dtype).reshape(self._logits_shape)
        for n in reversed(self.graph.nodes[1:]):
            if n.op == "softmax" or n.id not in dvals:
                continue
            dy = dvals.pop(n.id)
            dins = self._backward_node(n, dy, grads)
            for i, d in zip(n.inputs, dins):
                if d is None:
                    continue
                dvals[i] = dvals[i] + d if i in dvals else d
        self.input_grad = dvals.get(self.graph.input_id)
        for k, v in self.params.items():
            grads.setdefault(k, np.zeros_like(v))
        return grads

    def _backward_node(self, n: Node, dy, grads) -> List:
        a = n.attrs
        op = n.op
        c = self._cache.get(n.id)
        if op == "conv2d":
            xshape, cols_list, (oh, ow) = c
            w = self.w(n, "kernel")
            groups = a.get("groups", 1)
            kh, kw, cin_g, cout = w.shape
            cout_g = cout // groups
            dyf = dy.reshape(-1, cout)
            dw = np.empty_like(w)
            dx = np.zeros(xshape, dtype=dy.dtype)
            for gi in range(groups):
                sl = slice(gi * cout_g, (gi + 1) * cout_g)
                dyg = dyf[:, sl]
                dw[..., sl] = (cols_list[gi].T @ dyg).reshape(kh, kw, cin_g, cout_g)
                dcols = dyg @ w[..., sl].reshape(-1, cout_g).T
                gshape = xshape[:3] + (cin_g,)
                dxg = _col2im(dcols.reshape(xshape[0], oh, ow, kh, kw, cin_g), gshape, kh, kw, a["stride"], a["pad"])
                if groups > 1:
                    dx[..., gi * cin_g : (gi + 1) * cin_g] = dxg
                else:
                    dx = dxg
            grads[(n.id, "kernel")] = dw
            if (n.id, "bias") in self.params:
                grads[(n.id, "bias")] = dyf.sum(axis=0)
            return [dx]
        if op == "depthwise_conv2d":
            xshape, win, pads, (oh, ow) = c
            w = self.w(n, "kernel")
            kh, kw, _, ch = w.shape
            dw = np.empty_like(w)
            s = a["stride"]
            (pt, pb), (pl, pr) = pads
            dxp = np.zeros((xshape[0], xshape[1] + pt + pb, xshape[2] + pl + pr, ch), dtype=dy.dtype)
            for i in range(kh):
                for j in range(kw):
                    dw[i, j, 0] = (win[:, :, :, i, j, :] * dy).sum(axis=(0, 1, 2))
                    dxp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += dy * w[i, j, 0]
            grads[(n.id, "kernel")] = dw
            if (n.id, "bias") in self.params:
                grads[(n.id, "bias")] = dy.sum(axis=(0, 1, 2))
            return [dxp[:, pt : pt + xshape[1], pl : pl + xshape[2], :]]
        if op == "fc":
            xshape, xf = c
            dy = dy.reshape(len(xf), -1)
            grads[(n.id, "kernel")] = xf.T @ dy
            grads[(n.id, "bias")] = dy.sum(axis=0)
            return [(dy @ self.w(n, "kernel").T).reshape(xshape)]
        if op == "batchnorm":
            xhat, inv, training = c
            gamma = self.w(n, "gamma")
            grads[(n.id, "gamma")] = (dy * xhat).sum(axis=(0, 1, 2))
            grads[(n.id, "beta")] = dy.sum(axis=(0, 1, 2))
            dxhat = dy * gamma
            if not training:
                return [dxhat * inv]
            m = dy.size // dy.shape[-1]
            s1 = dxhat.sum(axis=(0, 1, 2))
            s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
            return [(inv / m) * (m * dxhat - s1 - xhat * s2)]
        if op == "relu":
            return [dy * (c[0] > 0)]
        if op == "relu6":
            x = c[0]
            return [dy * ((x > 0) & (x < 6))]
        if op == "silu":
            x = c[0]
            sg = K.sigmoid(x)
            return [dy * sg * (1 + x * (1 - sg))]
        if op == "maxpool":
            xshape, pads, arg, (oh, ow) = c
            k, s = a["k"], a["stride"]
            (pt, pb), (pl, pr) = pads
            dxp = np.zeros((xshape[0], xshape[1] + pt + pb, xshape[2] + pl + pr, xshape[3]), dtype=dy.dtype)
            for p in range(k * k):
                i, j = divmod(p, k)
                dxp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += dy * (arg == p)
            return [dxp[:, pt : pt + xshape[1], pl : pl + xshape[2], :]]
        if op == "avgpool":
            xshape, pads, (oh, ow) = c
            k, s = a["k"], a["stride"]
            (pt, pb), (pl, pr) = pads
            dxp = np.zeros((xshape[0], xshape[1] + pt + pb, xshape[2] + pl + pr, xshape[3]), dtype=dy.dtype)
            share = dy / (k * k)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += share
            return [dxp[:, pt : pt + xshape[1], pl : pl + xshape[2], :]]
        if op == "global_avgpool":
            (xshape,) = c
            dy = dy.reshape(xshape[0], 1, 1, xshape[3])
            return [np.broadcast_to(dy / (xshape[1] * xshape[2]), xshape).copy()]
        if op == "add":
            return [dy, dy]
        if op == "concat":
            (widths,) = c
            return np.split(dy, np.cumsum(widths)[:-1], axis=3)
        raise UnsupportedPatternError(f"op '{op}' is not supported in training")


def _col2im(dwin, xshape, kh, kw, stride, pad):
    """Scatter-add window gradients (N, OH, OW, kh, kw, C) back onto the input."""
    pads, (oh, ow) = K.spatial_pads(xshape, kh, kw, stride, pad)
    (pt, pb), (pl, pr) = pads
    n, h, w, ch = xshape
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, ch), dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :] += dwin[:, :, :, i, j, :]
    return dxp[:, pt : pt + h, pl : pl + w, :]
