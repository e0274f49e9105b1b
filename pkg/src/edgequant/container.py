"""The ``.eqm`` model container.

Layout (all integers little-endian)::

    b"EQM1" | u32 header_len | header (UTF-8 JSON text) | zero pad to 8 | payload

The header lists graph structure plus one record per tensor
``{name, dtype, shape, qparams, offset, length}``; offsets are relative to the
payload start and every tensor starts on an 8-byte boundary.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import BadMagicError, ContainerError, LengthMismatchError, TruncatedPayloadError
from .graph import Graph, Node
from .tensor import DType, QuantParams, Tensor

MAGIC = b"EQM1"
FORMAT_VERSION = 1
ALIGN = 8


def _pad(n: int) -> int:
    return -n % ALIGN


def _encode_attr(v):
    if isinstance(v, QuantParams):
        return {"__qparams__": v.to_dict()}
    if isinstance(v, dict):
        return {k: _encode_attr(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode_attr(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _decode_attr(v):
    if isinstance(v, dict):
        if "__qparams__" in v:
            return QuantParams.from_dict(v["__qparams__"])
        return {k: _decode_attr(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode_attr(x) for x in v]
    return v


def serialize(g: Graph) -> bytes:
    records = []
    blobs = []
    offset = 0
    nodes = []
    for n in g.nodes:
        wnames = []
        for name, t in n.weights.items():
            raw = t.data.astype(t.dtype.numpy, copy=False).tobytes()
            records.append(
                {
                    "name": f"{n.id}.{name}",
                    "dtype": t.dtype.value,
                    "shape": list(t.shape),
                    "qparams": t.qparams.to_dict() if t.qparams else None,
                    "offset": offset,
                    "length": len(raw),
                }
            )
            blobs.append(raw + b"\0" * _pad(len(raw)))
            offset += len(raw) + _pad(len(raw))
            wnames.append(name)
        nodes.append(
            {
                "id": n.id,
                "op": n.op,
                "inputs": n.inputs,
                "attrs": _encode_attr(n.attrs),
                "weights": wnames,
                "out_qparams": n.out_qparams.to_dict() if n.out_qparams else None,
            }
        )
    # one record per line keeps the header diffable and greppable
    head = {
        "format": FORMAT_VERSION,
        "input_spec": g.input_spec,
        "outputs": g.outputs,
        "metadata": _encode_attr(g.metadata),
        "payload_length": offset,
    }
    text = json.dumps(head, sort_keys=True)[:-1]
    text += ',\n"nodes": [\n' + ",\n".join(json.dumps(x, sort_keys=True) for x in nodes) + "\n]"
    text += ',\n"tensors": [\n' + ",\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n]}\n"
    header = text.encode("utf-8")
    pre = MAGIC + struct.pack("<I", len(header)) + header
    pre += b"\0" * _pad(len(pre))
    return pre + b"".join(blobs)


def deserialize(buf: Union[bytes, bytearray, memoryview]) -> Graph:
    buf = bytes(buf)
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if 8 + hlen > len(buf):
        raise TruncatedPayloadError(f"header declares {hlen} bytes but only {len(buf) - 8} remain")
    try:
        head = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"unreadable header: {e}") from e
    if not isinstance(head, dict) or not {"payload_length", "tensors", "nodes", "input_spec"} <= set(head):
        raise ContainerError("header is missing required sections")
    start = 8 + hlen + _pad(8 + hlen)
    payload = memoryview(buf)[start:]
    if len(payload) < head["payload_length"]:
        raise TruncatedPayloadError(
            f"payload truncated: {len(payload)} of {head['payload_length']} bytes present"
        )
    if len(payload) > head["payload_length"]:
        raise LengthMismatchError(
            f"payload has {len(payload)} bytes, header declares {head['payload_length']}"
        )
    tensors = {}
    for i, r in enumerate(head["tensors"]):
        try:
            dt = DType(r["dtype"])
            n = int(np.prod(r["shape"], dtype=np.int64)) * dt.itemsize
            r["name"], r["offset"], r["length"], r["qparams"]
        except (KeyError, TypeError, ValueError) as e:
            raise ContainerError(f"tensor record {i} ({r.get('name', '?') if isinstance(r, dict) else r!r}) is malformed: {e}") from None
        if r["length"] != n:
            raise LengthMismatchError(
                f"tensor '{r['name']}' declares {r['length']} bytes but shape {r['shape']} "
                f"needs {n}"
            )
        if r["offset"] % ALIGN or r["offset"] + n > len(payload):
            raise TruncatedPayloadError(f"tensor '{r['name']}' lies outside the payload")
        arr = np.frombuffer(payload, dtype=dt.numpy, count=n // dt.itemsize, offset=r["offset"])
        arr = arr.reshape(r["shape"]).astype(dt.numpy.newbyteorder("="))
        qp = QuantParams.from_dict(r["qparams"]) if r["qparams"] else None
        tensors[r["name"]] = Tensor(arr, qp)
    nodes = []
    for nd in head["nodes"]:
        try:
            weights = {w: tensors[f"{nd['id']}.{w}"] for w in nd["weights"]}
        except KeyError as e:
            raise ContainerError(f"node '{nd['id']}' references missing tensor {e}") from None
        qp = QuantParams.from_dict(nd["out_qparams"]) if nd["out_qparams"] else None
        nodes.append(Node(nd["id"], nd["op"], nd["inputs"], _decode_attr(nd["attrs"]), weights, qp))
    shape = head["input_spec"]["shape"][1:]
    g = Graph(nodes, tuple(shape), head["outputs"], _decode_attr(head["metadata"]))
    return g.validate()


def size_bytes(g: Graph) -> int:
    return len(serialize(g))


def save(g: Graph, path) -> int:
    data = serialize(g)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> Graph:
    return deserialize(Path(path).read_bytes())


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural and bit-exact equality."""
    if (a.input_shape, a.outputs, a.metadata) != (b.input_shape, b.outputs, b.metadata):
        return False
    if len(a.nodes) != len(b.nodes):
        return False
    for x, y in zip(a.nodes, b.nodes):
        if (x.id, x.op, x.inputs, x.attrs, x.out_qparams) != (y.id, y.op, y.inputs, y.attrs, y.out_qparams):
            return False
        if list(x.weights) != list(y.weights):
            return False
        if not all(x.weights[k].equals(y.weights[k]) for k in x.weights):
            return False
    return True
