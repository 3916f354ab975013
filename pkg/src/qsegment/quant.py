"""Post-training int8 quantization and the integer-only forward pass.

Weights are symmetric per output channel, activations asymmetric per tensor.
Every conv accumulates in int32 and is rescaled with a fixed-point
multiplier/shift pair; skip additions rescale both operands to the sum's
scale with integer arithmetic only.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ConvBlockParams, ModelGraph, RecordingOps, check_input, run_graph

ADD_LEFT_SHIFT = 20


class QuantizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar helpers


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_multiplier(real: float) -> tuple[int, int]:
    """Encode ``real > 0`` as ``multiplier * 2**-(31 + shift)``, multiplier in [2^30, 2^31)."""
    if not real > 0 or not math.isfinite(real):
        raise QuantizationError(f"cannot encode multiplier {real}")
    frac, exp = math.frexp(real)  # real = frac * 2**exp, frac in [0.5, 1)
    m = int(round(frac * (1 << 31)))
    if m == 1 << 31:
        m //= 2
        exp += 1
    shift = -exp
    if shift > 63 or shift < -31:
        raise QuantizationError(f"multiplier {real} outside encodable range")
    return m, shift


def _rescale(acc, multiplier, shift) -> np.ndarray:
    """round_half_away(acc * multiplier / 2**(31 + shift)) in int64 arithmetic."""
    acc = np.asarray(acc, dtype=np.int64)
    m = np.asarray(multiplier, dtype=np.int64)
    total = 31 + np.asarray(shift, dtype=np.int64)
    prod = acc * m  # |acc| < 2^31, m < 2^31: fits in int64
    mag = np.abs(prod)
    ts = np.clip(total, 1, 62)
    rounded = (mag + np.left_shift(np.int64(1), ts - 1)) >> ts
    rounded = np.where(total == 0, mag, rounded)
    rounded = np.where(total > 62, 0, rounded)
    return np.where(prod < 0, -rounded, rounded)


def requantize(acc, multiplier, shift, out_zero) -> np.ndarray:
    """Fixed-point rescale of int32 accumulators to int8 around ``out_zero``."""
    r = _rescale(acc, multiplier, shift) + np.asarray(out_zero, dtype=np.int64)
    return np.clip(r, T.INT8_MIN, T.INT8_MAX).astype(np.int8)


@dataclass
class SiteQuant:
    scale: float
    zero_point: int

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = round_half_away(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, T.INT8_MIN, T.INT8_MAX).astype(np.int8)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (np.asarray(q, np.float64) - self.zero_point) * self.scale

    @classmethod
    def from_range(cls, lo: float, hi: float, name: str = "?") -> "SiteQuant":
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        if hi == lo:
            raise QuantizationError(f"degenerate calibration range at site {name!r}")
        scale = (hi - lo) / 255.0
        zp = int(np.clip(round_half_away(-lo / scale) - 128, T.INT8_MIN, T.INT8_MAX))
        return cls(float(scale), zp)


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-channel symmetric int8: scale = max|w_c| / 127."""
    amax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1).astype(np.float64)
    scales = np.where(amax > 0, amax / 127.0, 1.0 / 127.0)
    q = round_half_away(w / scales[:, None, None, None])
    return np.clip(q, -127, 127).astype(np.int8), scales


# ---------------------------------------------------------------------------
# BN folding and calibration


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Absorb every BN into the conv before it; returns a new BN-free model."""
    out = model.copy()
    if out.folded:
        return out
    for bp in out.blocks:
        bp.conv3x3 = _fold(bp.conv3x3, bp.bn1)
        bp.dw3x3 = _fold(bp.dw3x3, bp.bn2)
        bp.bn1 = bp.bn2 = None
    out.folded = True
    return out


def _fold(cp: T.ConvParams, bn: T.BatchNormParams | None) -> T.ConvParams:
    if bn is None:
        return cp
    if np.any(bn.running_var <= 0):
        raise ValueError("cannot fold batchnorm with zero or negative running variance")
    k = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    b = np.zeros(cp.c_out) if cp.bias is None else cp.bias.astype(np.float64)
    dtype = cp.weight.dtype
    w = (cp.weight * k[:, None, None, None]).astype(dtype)
    bias = ((b - bn.running_mean) * k + bn.beta).astype(dtype)
    return T.ConvParams(w, bias, cp.stride, cp.padding, cp.groups)


class CalibRanges(dict):
    """site name -> [min_seen, max_seen]; every range spans zero and only widens."""

    def observe(self, name: str, x: np.ndarray) -> None:
        lo, hi = float(x.min()), float(x.max())
        cur = self.get(name)
        if cur is None:
            self[name] = [min(lo, 0.0), max(hi, 0.0)]
        else:
            cur[0] = min(cur[0], lo)
            cur[1] = max(cur[1], hi)


def _as_batch(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples if samples.ndim == 4 else samples[None]
    return np.stack([s.image if hasattr(s, "image") else s for s in samples])


def calibrate(model: ModelGraph, samples, chunk: int = 8) -> CalibRanges:
    """Min/max of every activation site over the calibration images."""
    if not model.folded:
        raise ValueError("calibrate expects a BN-folded model")
    x = _as_batch(samples) if len(samples) else None
    if x is None or len(x) == 0:
        raise ValueError("calibration needs at least one sample")
    ranges = CalibRanges()
    model.set_mode("eval")
    for i in range(0, len(x), chunk):
        xb = x[i : i + chunk]
        check_input(model, xb)
        ops = RecordingOps()
        run_graph(model, xb.astype(model.head.weight.dtype), ops)
        for name, act in ops.sites.items():
            ranges.observe(name, act)
    return ranges


# ---------------------------------------------------------------------------
# quantized graph description


@dataclass
class QConv:
    weight_q: np.ndarray  # int8 (c_out, c_in/g, k, k)
    weight_scales: np.ndarray  # float64 (c_out,)
    bias_q: np.ndarray  # int32 (c_out,)
    multiplier: np.ndarray  # int32 (c_out,)
    shift: np.ndarray  # int8 (c_out,)
    in_site: str
    out_site: str
    relu: bool
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class QAdd:
    a_site: str
    b_site: str
    out_site: str
    a_mult: tuple[int, int]
    b_mult: tuple[int, int]
    out_mult: tuple[int, int]
    left_shift: int = ADD_LEFT_SHIFT


@dataclass
class QuantizedNet:
    sites: dict[str, SiteQuant]
    convs: dict[str, QConv] = field(default_factory=dict)
    adds: dict[str, QAdd] = field(default_factory=dict)


def topology():
    """(convs, adds) wiring of the folded graph: which site feeds which op."""
    convs, adds = [], []
    block_in = {1: "input", 2: "b1.out", 3: "b2.out", 4: "b3.out", 5: "b5.in", 6: "b6.in", 7: "b7.in"}
    for i in range(1, 8):
        b = f"b{i}"
        convs += [
            (f"{b}.conv3x3", block_in[i], f"{b}.t", True),
            (f"{b}.conv1x1", f"{b}.t", f"{b}.v", False),
            (f"{b}.dw3x3", f"{b}.v", f"{b}.u", True),
        ]
        adds.append((f"{b}.out", f"{b}.t", f"{b}.u"))
    adds += [
        ("b4.res", "b4.out", "b3.out"),
        ("b5.in", "b4.res", "b3.out"),
        ("b6.in", "b5.out", "b2.out"),
        ("b7.in", "b6.out", "b1.out"),
        ("b7.res", "b7.out", "b7.in"),
    ]
    convs.append(("head", "b7.res", "head", False))
    return convs, adds


def _conv_by_name(model: ModelGraph, name: str) -> T.ConvParams:
    if name == "head":
        return model.head
    b, c = name.split(".")
    return getattr(model.blocks[int(b[1:]) - 1], c)


def quantize_conv(cp: T.ConvParams, s_in: SiteQuant, s_out: SiteQuant, src: str = "in", dst: str = "out",
                  relu: bool = False, name: str = "conv") -> QConv:
    """Integer record for one float conv between two calibrated sites."""
    wq, ws = quantize_weights(cp.weight)
    acc_scale = s_in.scale * ws
    bias = np.zeros(cp.c_out) if cp.bias is None else cp.bias.astype(np.float64)
    bq = round_half_away(bias / acc_scale)
    if np.any(np.abs(bq) > T.INT32_MAX):
        raise OverflowError(f"{name}: bias does not fit int32")
    mults = [quantize_multiplier(r) for r in acc_scale / s_out.scale]
    return QConv(
        wq, ws, bq.astype(np.int32),
        np.array([m for m, _ in mults], np.int32), np.array([s for _, s in mults], np.int8),
        src, dst, relu, cp.stride, cp.padding, cp.groups,
    )


def quantize_model(model: ModelGraph, ranges: CalibRanges) -> ModelGraph:
    """Attach a :class:`QuantizedNet` built from a folded model and its ranges."""
    if not model.folded:
        raise ValueError("quantize_model expects a BN-folded model")
    sites = {name: SiteQuant.from_range(lo, hi, name) for name, (lo, hi) in ranges.items()}
    net = QuantizedNet(sites)
    conv_topo, add_topo = topology()
    for name, src, dst, relu in conv_topo:
        for s in (src, dst):
            if s not in sites:
                raise QuantizationError(f"no calibration range for site {s!r}")
        net.convs[name] = quantize_conv(_conv_by_name(model, name), sites[src], sites[dst], src, dst, relu, name)
    for out, a, b in add_topo:
        sa, sb, so = sites[a].scale, sites[b].scale, sites[out].scale
        twice = 2.0 * max(sa, sb)
        net.adds[out] = QAdd(
            a, b, out,
            quantize_multiplier(sa / twice), quantize_multiplier(sb / twice),
            quantize_multiplier(twice / ((1 << ADD_LEFT_SHIFT) * so)),
        )
    q = model.copy()
    q.quant = net
    return q


# ---------------------------------------------------------------------------
# integer inference


def qconv(xq: np.ndarray, zx: int, qc: QConv, out: SiteQuant) -> np.ndarray:
    """int8 conv -> int32 accumulator -> requantized int8 (ReLU clamps at zero point)."""
    centered = xq.astype(np.int64) - zx  # padding with 0 here represents real 0
    params = T.ConvParams(qc.weight_q.astype(np.int64), None, qc.stride, qc.padding, qc.groups)
    acc = T.conv2d(centered, params) + qc.bias_q.astype(np.int64)[None, :, None, None]
    T.check_int32(acc, "conv accumulator")
    m = qc.multiplier.astype(np.int64)[None, :, None, None]
    s = qc.shift.astype(np.int64)[None, :, None, None]
    y = requantize(acc, m, s, out.zero_point)
    if qc.relu:
        y = np.maximum(y, np.int8(out.zero_point))
    return y


def qadd(aq: np.ndarray, bq: np.ndarray, qa: QAdd, sites: dict[str, SiteQuant]) -> np.ndarray:
    if aq.shape != bq.shape:
        raise T.ShapeError(f"quantized add: {aq.shape} vs {bq.shape}")
    za, zb, out = sites[qa.a_site].zero_point, sites[qa.b_site].zero_point, sites[qa.out_site]
    a = (aq.astype(np.int64) - za) << qa.left_shift
    b = (bq.astype(np.int64) - zb) << qa.left_shift
    total = _rescale(a, *qa.a_mult) + _rescale(b, *qa.b_mult)
    T.check_int32(total, "add accumulator")
    return requantize(total, *qa.out_mult, out.zero_point)


def _qforward(net: QuantizedNet, x: np.ndarray, trace: list | None):
    S = net.sites

    def rec(name, arr):
        if trace is not None:
            trace.append((name, arr))
        return arr

    def conv(name, xq):
        qc = net.convs[name]
        return rec(name, qconv(xq, S[qc.in_site].zero_point, qc, S[qc.out_site]))

    def add(name, a, b):
        return rec(name, qadd(a, b, net.adds[name], S))

    def block(i, xq):
        t = conv(f"b{i}.conv3x3", xq)
        v = conv(f"b{i}.conv1x1", t)
        u = conv(f"b{i}.dw3x3", v)
        return add(f"b{i}.out", t, u)

    def pool(xq):
        p, idx = T.maxpool2x2(xq)
        return rec("pool", p), idx

    def unpool(xq, idx, like, site):
        return rec("unpool", T.max_unpool2x2(xq, idx, like.shape[2:], fill=np.int8(S[site].zero_point)))

    xq = rec("input", S["input"].quantize(x))
    e1 = block(1, xq)
    p1, i1 = pool(e1)
    e2 = block(2, p1)
    p2, i2 = pool(e2)
    e3 = block(3, p2)
    p3, i3 = pool(e3)
    m = add("b4.res", block(4, p3), p3)
    s5 = add("b5.in", unpool(m, i3, e3, "b4.res"), e3)
    d5 = block(5, s5)
    s6 = add("b6.in", unpool(d5, i2, e2, "b5.out"), e2)
    d6 = block(6, s6)
    s7 = add("b7.in", unpool(d6, i1, e1, "b6.out"), e1)
    d7 = add("b7.res", block(7, s7), s7)
    head = conv("head", d7)
    return S["head"].dequantize(head)


def forward_quantized(model: ModelGraph, x: np.ndarray, trace: list | None = None, workers: int = 1) -> np.ndarray:
    """Float logits from the integer pipeline.

    Only input quantization and head dequantization touch floating point.
    With ``workers > 1`` the batch is split across threads; results are
    identical to the single-threaded run. ``trace`` receives
    ``(op name, int8 array)`` pairs in execution order.
    """
    if not model.is_quantized:
        raise ValueError("model is not quantized")
    check_input(model, x)
    net = model.quant
    if workers <= 1 or len(x) == 1:
        return _qforward(net, x, trace)
    chunks = np.array_split(np.arange(len(x)), min(workers, len(x)))
    traces = [[] for _ in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_qforward, net, x[c], tr) for c, tr in zip(chunks, traces)]
        outs = [f.result() for f in futs]
    if trace is not None:
        for entries in zip(*traces):
            trace.append((entries[0][0], np.concatenate([arr for _, arr in entries])))
    return np.concatenate(outs)


def dequantized_blocks(net: QuantizedNet) -> tuple[list[ConvBlockParams], T.ConvParams]:
    """Float (folded) parameters implied by the integer weights and biases."""

    def deq(name):
        qc = net.convs[name]
        w = (qc.weight_q.astype(np.float64) * qc.weight_scales[:, None, None, None]).astype(np.float32)
        b = (qc.bias_q * net.sites[qc.in_site].scale * qc.weight_scales).astype(np.float32)
        return T.ConvParams(w, b, qc.stride, qc.padding, qc.groups)

    blocks = [
        ConvBlockParams(deq(f"b{i}.conv3x3"), None, deq(f"b{i}.conv1x1"), deq(f"b{i}.dw3x3"), None)
        for i in range(1, 8)
    ]
    return blocks, deq("head")


def quantize_pipeline(model: ModelGraph, samples) -> ModelGraph:
    """fold -> calibrate -> quantize."""
    folded = fold_batchnorm(model)
    return quantize_model(folded, calibrate(folded, samples))
