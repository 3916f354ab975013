"""The eight-layer encoder/decoder network: declaration, initialisation, forward."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Tape, Var

FORMAT_VERSION = 1
DEFAULT_WIDTHS = (16, 32, 64)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    location: str  # encoder | intermediate | decoder | head
    kind: str  # convblock_pool | convblock | unpool_convblock | conv_head
    c_in: int
    c_out: int


def default_specs(widths=DEFAULT_WIDTHS, in_channels: int = 3) -> list[LayerSpec]:
    a, b, c = widths
    return [
        LayerSpec(1, "encoder", "convblock_pool", in_channels, a),
        LayerSpec(2, "encoder", "convblock_pool", a, b),
        LayerSpec(3, "encoder", "convblock_pool", b, c),
        LayerSpec(4, "intermediate", "convblock", c, c),
        LayerSpec(5, "decoder", "unpool_convblock", c, b),
        LayerSpec(6, "decoder", "unpool_convblock", b, a),
        LayerSpec(7, "decoder", "unpool_convblock", a, a),
        LayerSpec(8, "head", "conv_head", a, 1),
    ]


def validate_specs(specs: list[LayerSpec]) -> None:
    """Check that every skip and unpool in the fixed topology is shape-valid."""
    if [s.index for s in specs] != list(range(1, 9)):
        raise ValueError("expected exactly eight layers indexed 1..8")
    kinds = [s.kind for s in specs]
    if kinds != ["convblock_pool"] * 3 + ["convblock"] + ["unpool_convblock"] * 3 + ["conv_head"]:
        raise ValueError(f"unsupported topology {kinds}")
    for prev, cur in zip(specs, specs[1:]):
        if prev.c_out != cur.c_in:
            raise ValueError(f"layer {cur.index}: c_in {cur.c_in} != previous c_out {prev.c_out}")
    enc = {s.index: s.c_out for s in specs}
    if enc[4] != specs[3].c_in:
        raise ValueError("intermediate block needs c_in == c_out for its residual")
    if specs[6].c_in != specs[6].c_out:
        raise ValueError("layer 7 needs c_in == c_out for its residual")
    # unpool(x, i_k) + e_k must agree in channels: decoder inputs vs encoder outputs
    for dec, e in ((5, 3), (6, 2), (7, 1)):
        if specs[dec - 1].c_in != enc[e]:
            raise ValueError(f"layer {dec} input ({specs[dec - 1].c_in}ch) cannot add encoder {e} skip ({enc[e]}ch)")
    if specs[7].c_out != 1:
        raise ValueError("head must emit a single logit map")


@dataclass
class ConvBlockParams:
    conv3x3: T.ConvParams
    bn1: T.BatchNormParams | None
    conv1x1: T.ConvParams
    dw3x3: T.ConvParams
    bn2: T.BatchNormParams | None


@dataclass
class ModelGraph:
    specs: list[LayerSpec]
    blocks: list[ConvBlockParams]
    head: T.ConvParams
    quant: object | None = None  # QuantizedNet once quantized
    in_channels: int = 3
    version: int = FORMAT_VERSION
    folded: bool = False

    def __post_init__(self):
        validate_specs(self.specs)

    # parameter access ------------------------------------------------------

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by dotted name (references, not copies)."""
        out = {}
        for i, bp in enumerate(self.blocks, 1):
            for cname in ("conv3x3", "conv1x1", "dw3x3"):
                cp = getattr(bp, cname)
                out[f"b{i}.{cname}.weight"] = cp.weight
                if cp.bias is not None:
                    out[f"b{i}.{cname}.bias"] = cp.bias
            for bname in ("bn1", "bn2"):
                bn = getattr(bp, bname)
                if bn is not None:
                    out[f"b{i}.{bname}.gamma"] = bn.gamma
                    out[f"b{i}.{bname}.beta"] = bn.beta
        out["head.weight"] = self.head.weight
        if self.head.bias is not None:
            out["head.bias"] = self.head.bias
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bp in enumerate(self.blocks, 1):
            for bname in ("bn1", "bn2"):
                bn = getattr(bp, bname)
                if bn is not None:
                    out[f"b{i}.{bname}.running_mean"] = bn.running_mean
                    out[f"b{i}.{bname}.running_var"] = bn.running_var
        return out

    def set_parameters(self, new: dict[str, np.ndarray]) -> None:
        current = self.named_parameters()
        for name, value in new.items():
            if name not in current:
                raise KeyError(f"unknown parameter {name}")
            if current[name].shape != value.shape:
                raise T.ShapeError(f"{name}: shape {value.shape} != {current[name].shape}")
            current[name][...] = value

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.named_parameters().values()))

    def batchnorms(self):
        for bp in self.blocks:
            for bn in (bp.bn1, bp.bn2):
                if bn is not None:
                    yield bn

    def set_mode(self, mode: str) -> "ModelGraph":
        if mode not in ("train", "eval"):
            raise ValueError(mode)
        for bn in self.batchnorms():
            bn.mode = mode
        return self

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        m = self.copy()
        for cp in m.convs():
            cp.weight = cp.weight.astype(dtype)
            if cp.bias is not None:
                cp.bias = cp.bias.astype(dtype)
        for bn in m.batchnorms():
            for f in ("gamma", "beta", "running_mean", "running_var"):
                setattr(bn, f, getattr(bn, f).astype(dtype))
        return m

    def convs(self):
        for bp in self.blocks:
            yield bp.conv3x3
            yield bp.conv1x1
            yield bp.dw3x3
        yield self.head

    @property
    def is_quantized(self) -> bool:
        return self.quant is not None


def _kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _block_params(rng, c_in: int, c_out: int) -> ConvBlockParams:
    z = lambda c: np.zeros(c, np.float32)  # noqa: E731
    return ConvBlockParams(
        conv3x3=T.ConvParams(_kaiming_uniform(rng, (c_out, c_in, 3, 3)), z(c_out), 1, 1, 1),
        bn1=T.BatchNormParams.identity(c_out),
        conv1x1=T.ConvParams(_kaiming_uniform(rng, (c_out, c_out, 1, 1)), z(c_out), 1, 0, 1),
        dw3x3=T.ConvParams(_kaiming_uniform(rng, (c_out, 1, 3, 3)), None, 1, 1, c_out),
        bn2=T.BatchNormParams.identity(c_out),
    )


def build_model(seed: int = 0, widths=DEFAULT_WIDTHS, in_channels: int = 3) -> ModelGraph:
    """Fresh network with fan-in uniform conv weights, zero biases, identity BN."""
    specs = default_specs(widths, in_channels)
    validate_specs(specs)
    rng = np.random.default_rng(seed)
    blocks = [_block_params(rng, s.c_in, s.c_out) for s in specs[:7]]
    hs = specs[7]
    head = T.ConvParams(_kaiming_uniform(rng, (hs.c_out, hs.c_in, 3, 3)), np.zeros(hs.c_out, np.float32), 1, 1, 1)
    return ModelGraph(specs, blocks, head, in_channels=in_channels)


# ---------------------------------------------------------------------------
# forward pass, shared between plain evaluation, calibration and the tape


class PlainOps:
    """Evaluate kernels directly on arrays."""

    def conv(self, name, x, cp):
        return T.conv2d(x, cp)

    def bn(self, name, x, bn):
        return T.batchnorm(x, bn)

    def relu(self, x):
        return T.relu(x)

    def add(self, a, b):
        return T.add(a, b)

    def pool(self, x):
        return T.maxpool2x2(x)

    def unpool(self, x, idx, hw):
        return T.max_unpool2x2(x, idx, hw)

    def site(self, name, x):
        return x

    def hw(self, x):
        return x.shape[2:]


class RecordingOps(PlainOps):
    """Plain evaluation that also keeps every activation site."""

    def __init__(self):
        self.sites: dict[str, np.ndarray] = {}

    def site(self, name, x):
        self.sites[name] = x
        return x


class TapeOps:
    """Evaluate through an autodiff tape, exposing parameters as leaves."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def conv(self, name, x, cp):
        w = self.tape.param(f"{name}.weight", cp.weight)
        b = None if cp.bias is None else self.tape.param(f"{name}.bias", cp.bias)
        return self.tape.conv2d(x, w, b, cp.stride, cp.padding, cp.groups)

    def bn(self, name, x, bn):
        g = self.tape.param(f"{name}.gamma", bn.gamma)
        b = self.tape.param(f"{name}.beta", bn.beta)
        return self.tape.batchnorm(x, g, b, bn)

    def relu(self, x):
        return self.tape.relu(x)

    def add(self, a, b):
        return self.tape.add(a, b)

    def pool(self, x):
        return self.tape.maxpool2x2(x)

    def unpool(self, x, idx, hw):
        return self.tape.max_unpool2x2(x, idx, hw)

    def site(self, name, x):
        return x

    def hw(self, x):
        return x.shape[2:]


def _block(ops, name: str, bp: ConvBlockParams, x):
    t = ops.conv(f"{name}.conv3x3", x, bp.conv3x3)
    if bp.bn1 is not None:
        t = ops.bn(f"{name}.bn1", t, bp.bn1)
    t = ops.site(f"{name}.t", ops.relu(t))
    v = ops.site(f"{name}.v", ops.conv(f"{name}.conv1x1", t, bp.conv1x1))
    u = ops.conv(f"{name}.dw3x3", v, bp.dw3x3)
    if bp.bn2 is not None:
        u = ops.bn(f"{name}.bn2", u, bp.bn2)
    u = ops.site(f"{name}.u", ops.relu(u))
    return ops.site(f"{name}.out", ops.add(t, u))


def check_input(model: ModelGraph, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise T.ShapeError(f"input must be (n, c, h, w), got {x.shape}")
    if x.shape[1] != model.in_channels:
        raise T.ShapeError(f"input has {x.shape[1]} channels, model expects {model.in_channels}")
    h, w = x.shape[2:]
    if h % 8 or w % 8:
        raise T.ShapeError(f"spatial dims must be divisible by 8, got {h}x{w}")


def run_graph(model: ModelGraph, x, ops):
    """Execute the encoder/decoder dataflow with the given op provider."""
    b = model.blocks
    x = ops.site("input", x)
    e1 = _block(ops, "b1", b[0], x)
    p1, i1 = ops.pool(e1)
    e2 = _block(ops, "b2", b[1], p1)
    p2, i2 = ops.pool(e2)
    e3 = _block(ops, "b3", b[2], p2)
    p3, i3 = ops.pool(e3)
    m = ops.site("b4.res", ops.add(_block(ops, "b4", b[3], p3), p3))
    s5 = ops.site("b5.in", ops.add(ops.unpool(m, i3, ops.hw(e3)), e3))
    d5 = _block(ops, "b5", b[4], s5)
    s6 = ops.site("b6.in", ops.add(ops.unpool(d5, i2, ops.hw(e2)), e2))
    d6 = _block(ops, "b6", b[5], s6)
    s7 = ops.site("b7.in", ops.add(ops.unpool(d6, i1, ops.hw(e1)), e1))
    d7 = ops.site("b7.res", ops.add(_block(ops, "b7", b[6], s7), s7))
    return ops.site("head", ops.conv("head", d7, model.head))


def forward_float(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Float logits of shape (n, 1, h, w); no sigmoid applied."""
    check_input(model, x)
    x = x.astype(model.head.weight.dtype, copy=False)
    return run_graph(model, x, PlainOps())


def forward_tape(model: ModelGraph, x: np.ndarray, tape: Tape) -> Var:
    check_input(model, x)
    x = x.astype(model.head.weight.dtype, copy=False)
    return run_graph(model, Var(x, "input"), TapeOps(tape))


def site_names() -> list[str]:
    names = ["input"]
    for i in range(1, 8):
        if i >= 5:
            names.append(f"b{i}.in")
        names += [f"b{i}.t", f"b{i}.v", f"b{i}.u", f"b{i}.out"]
        if i == 4:
            names.append("b4.res")
    names += ["b7.res", "head"]
    return names


# ---------------------------------------------------------------------------
# analytic accounting


def layer_table(model: ModelGraph, h: int, w: int) -> list[dict]:
    """Per-layer rows: index, kind, channels, output shape, params, MACs."""
    rows = []
    params = model.named_parameters()
    hh, ww = h, w
    for spec in model.specs:
        prefix = "head" if spec.kind == "conv_head" else f"b{spec.index}"
        if spec.kind == "unpool_convblock":
            hh, ww = hh * 2, ww * 2
        convs = [model.head] if spec.kind == "conv_head" else [
            getattr(model.blocks[spec.index - 1], n) for n in ("conv3x3", "conv1x1", "dw3x3")
        ]
        macs = sum(_conv_macs(cp, hh, ww) for cp in convs)
        n_params = sum(a.size for k, a in params.items() if k.startswith(prefix + "."))
        out_h, out_w = (hh // 2, ww // 2) if spec.kind == "convblock_pool" else (hh, ww)
        rows.append(
            dict(index=spec.index, kind=spec.kind, c_in=spec.c_in, c_out=spec.c_out,
                 out_shape=(spec.c_out, out_h, out_w), params=int(n_params), macs=int(macs))
        )
        hh, ww = out_h, out_w
    return rows


def _conv_macs(cp: T.ConvParams, h: int, w: int) -> int:
    ho, wo = T.conv_output_hw(h, w, cp.kernel, cp.stride, cp.padding)
    return cp.kernel**2 * (cp.c_in // cp.groups) * cp.c_out * ho * wo


def mac_count(model: ModelGraph, h: int, w: int) -> int:
    if h % 8 or w % 8:
        raise T.ShapeError(f"size must be divisible by 8, got {h}x{w}")
    return sum(r["macs"] for r in layer_table(model, h, w))
