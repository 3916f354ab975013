"""QSM model files.

Layout::

    b"QSEG" | uint16 version | uint32 header length | JSON header | payload

All integers little-endian. The header lists layer specs, conv hyper-
parameters, quantization records and a tensor table of [name, dtype, shape,
offset, nbytes] rows with offsets relative to the start of the payload. Float
models store parameters and BN buffers; quantized models store only the
integer weights, int32 biases and per-channel requantization vectors.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import FORMAT_VERSION, ConvBlockParams, LayerSpec, ModelGraph
from .quant import QAdd, QConv, QuantizedNet, SiteQuant, dequantized_blocks

MAGIC = b"QSEG"
_PREFIX = struct.Struct("<4sHI")
_CONV_NAMES = ("conv3x3", "conv1x1", "dw3x3")


class QSMError(ValueError):
    pass


def _conv_items(model: ModelGraph):
    for i, bp in enumerate(model.blocks, 1):
        for c in _CONV_NAMES:
            yield f"b{i}.{c}", getattr(bp, c)
    yield "head", model.head


def _float_tensors(model: ModelGraph) -> dict[str, np.ndarray]:
    out = dict(model.named_parameters())
    out.update(model.named_buffers())
    return out


def _quant_tensors(net: QuantizedNet) -> dict[str, np.ndarray]:
    out = {}
    for name, qc in net.convs.items():
        out[f"{name}.weight_q"] = qc.weight_q
        out[f"{name}.bias_q"] = qc.bias_q
        out[f"{name}.weight_scales"] = qc.weight_scales
        out[f"{name}.multiplier"] = qc.multiplier
        out[f"{name}.shift"] = qc.shift
    return out


def _quant_header(net: QuantizedNet) -> dict:
    return {
        # decimal strings round-trip float64 exactly
        "sites": {k: {"scale": repr(float(s.scale)), "zero_point": int(s.zero_point)} for k, s in net.sites.items()},
        "convs": {k: {"in": c.in_site, "out": c.out_site, "relu": c.relu} for k, c in net.convs.items()},
        "adds": {
            k: {"a": a.a_site, "b": a.b_site, "out": a.out_site, "left_shift": a.left_shift,
                "a_mult": list(a.a_mult), "b_mult": list(a.b_mult), "out_mult": list(a.out_mult)}
            for k, a in net.adds.items()
        },
    }


def to_bytes(model: ModelGraph) -> bytes:
    quantized = model.is_quantized
    tensors = _quant_tensors(model.quant) if quantized else _float_tensors(model)
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise QSMError(f"refusing to save non-finite tensor {name}")
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = a.tobytes()
        table.append([name, a.dtype.str, list(a.shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    bn = next(model.batchnorms(), None)
    header = {
        "metadata": {"in_channels": model.in_channels, "version": model.version,
                     "folded": model.folded, "quantized": quantized},
        "specs": [[s.index, s.location, s.kind, s.c_in, s.c_out] for s in model.specs],
        "convs": {n: [cp.stride, cp.padding, cp.groups, cp.bias is not None] for n, cp in _conv_items(model)},
        "bn": None if bn is None else [bn.eps, bn.momentum],
        "tensors": table,
        "quant": _quant_header(model.quant) if quantized else None,
    }
    hb = json.dumps(header, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hb)) + hb + b"".join(blobs)


def save_model(model: ModelGraph, path) -> int:
    """Write ``model``; returns the file size in bytes."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def from_bytes(data: bytes) -> ModelGraph:
    if len(data) < _PREFIX.size:
        raise QSMError("file too short for a QSM header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise QSMError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise QSMError(f"unsupported QSM version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise QSMError("truncated header")
    try:
        header = json.loads(data[_PREFIX.size : start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise QSMError(f"corrupt header: {exc}") from exc
    tensors = {}
    for name, dtype, shape, offset, nbytes in header["tensors"]:
        lo = start + offset
        hi = lo + nbytes
        if hi > len(data):
            raise QSMError(f"truncated payload at tensor {name}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(dtype)).reshape(shape)
        arr = arr.astype(arr.dtype.newbyteorder("="))
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise QSMError(f"non-finite values in tensor {name}")
        tensors[name] = arr
    meta = header["metadata"]
    specs = [LayerSpec(*s) for s in header["specs"]]
    if meta["quantized"]:
        net = _read_quant(header, tensors)
        blocks, head = dequantized_blocks(net)
        return ModelGraph(specs, blocks, head, net, meta["in_channels"], meta["version"], folded=True)
    blocks, head = _read_float(header, tensors, meta["folded"])
    return ModelGraph(specs, blocks, head, None, meta["in_channels"], meta["version"], meta["folded"])


def _read_float(header, tensors, folded):
    convs = header["convs"]
    eps, momentum = header["bn"] if header["bn"] else (1e-5, 0.1)

    def conv(name):
        stride, padding, groups, has_bias = convs[name]
        return T.ConvParams(tensors[f"{name}.weight"], tensors[f"{name}.bias"] if has_bias else None, stride, padding, groups)

    def bn(name):
        if folded:
            return None
        return T.BatchNormParams(tensors[f"{name}.gamma"], tensors[f"{name}.beta"],
                                 tensors[f"{name}.running_mean"], tensors[f"{name}.running_var"], eps, momentum)

    blocks = [
        ConvBlockParams(conv(f"b{i}.conv3x3"), bn(f"b{i}.bn1"), conv(f"b{i}.conv1x1"), conv(f"b{i}.dw3x3"), bn(f"b{i}.bn2"))
        for i in range(1, 8)
    ]
    return blocks, conv("head")


def _read_quant(header, tensors) -> QuantizedNet:
    q = header["quant"]
    sites = {k: SiteQuant(float(v["scale"]), int(v["zero_point"])) for k, v in q["sites"].items()}
    net = QuantizedNet(sites)
    for name, c in q["convs"].items():
        stride, padding, groups, _ = header["convs"][name]
        net.convs[name] = QConv(
            tensors[f"{name}.weight_q"], tensors[f"{name}.weight_scales"], tensors[f"{name}.bias_q"],
            tensors[f"{name}.multiplier"], tensors[f"{name}.shift"],
            c["in"], c["out"], c["relu"], stride, padding, groups,
        )
    for name, a in q["adds"].items():
        net.adds[name] = QAdd(a["a"], a["b"], a["out"], tuple(a["a_mult"]), tuple(a["b_mult"]),
                              tuple(a["out_mult"]), a["left_shift"])
    return net


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc}") from exc
    return from_bytes(data)


def estimate_int8_size(model: ModelGraph, header_bytes: int = 10_800) -> int:
    """Predicted size of the quantized file without building it.

    The JSON header (site table, add records, tensor table) is close to
    constant for this topology, about 10.8 kB.
    """
    weights = sum(cp.weight.size for _, cp in _conv_items(model))
    channels = sum(cp.c_out for _, cp in _conv_items(model))
    # per channel: int32 bias, float64 scale, int32 multiplier, int8 shift
    per_channel = 4 + 8 + 4 + 1
    return _PREFIX.size + header_bytes + weights + channels * per_channel
