"""Dense NCHW kernels: convolution, pooling, batch norm, elementwise ops.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, rows, cols). Every function here is pure; the ``*_backward``
companions are used by :mod:`qsegment.autodiff`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class ShapeError(ValueError):
    pass


def check_tensor(x: np.ndarray, name: str = "tensor", finite: bool = True) -> np.ndarray:
    """Validate rank, dtype range and (for floats) finiteness."""
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 NCHW tensor, got shape {x.shape}")
    if np.issubdtype(x.dtype, np.floating):
        if finite and not np.all(np.isfinite(x)):
            raise ValueError(f"{name}: non-finite values")
    elif x.dtype == np.int8:
        pass
    elif np.issubdtype(x.dtype, np.integer):
        if x.size and (x.min() < INT32_MIN or x.max() > INT32_MAX):
            raise OverflowError(f"{name}: values exceed int32 range")
    else:
        raise TypeError(f"{name}: unsupported dtype {x.dtype}")
    return x


def check_int32(acc: np.ndarray, name: str = "accumulator") -> np.ndarray:
    """Raise instead of wrapping when an int64 accumulator leaves int32 range."""
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise OverflowError(f"{name}: int32 accumulator overflow")
    return acc


@dataclass
class ConvParams:
    weight: np.ndarray  # (c_out, c_in // groups, k, k)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def validate(self) -> None:
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (c_out, c_in/g, k, k), got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError("stride >= 1, padding >= 0 and groups >= 1 required")
        if self.c_out % self.groups:
            raise ShapeError(f"groups={self.groups} does not divide c_out={self.c_out}")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.c_out},)")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "eval"

    @classmethod
    def identity(cls, c: int, dtype=np.float32) -> "BatchNormParams":
        return cls(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype))

    def validate(self) -> None:
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("batchnorm running_var must be non-negative")
        if not 0 < self.momentum < 1:
            raise ValueError("batchnorm momentum must lie in (0, 1)")


# ---------------------------------------------------------------------------
# convolution


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {k} with padding {padding}")
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (n, c, hp, wp) -> (c, k, k, n, ho, wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    xt = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return xt.transpose(1, 0, 2, 3)


def _check_conv(x: np.ndarray, params: ConvParams) -> None:
    params.validate()
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if x.shape[1] != params.c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {params.c_in}")


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-padded grouped 2-D cross-correlation plus bias."""
    _check_conv(x, params)
    n, _, h, w = x.shape
    k, s, p, g = params.kernel, params.stride, params.padding, params.groups
    ho, wo = conv_output_hw(h, w, k, s, p)
    wt = params.weight
    xp = _pad(x, p)
    if g == 1:
        cols = _im2col(xp, k, s, ho, wo).reshape(-1, n * ho * wo)
        out = (wt.reshape(params.c_out, -1) @ cols).reshape(params.c_out, n, ho, wo)
        out = out.transpose(1, 0, 2, 3)
    elif g == params.c_in == params.c_out:
        out = np.zeros((n, params.c_out, ho, wo), dtype=np.result_type(x, wt))
        for i in range(k):
            for j in range(k):
                out += wt[None, :, 0, i, j, None, None] * xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    else:
        cin_g, cout_g = params.c_in // g, params.c_out // g
        parts = []
        for gi in range(g):
            sub = ConvParams(wt[gi * cout_g : (gi + 1) * cout_g], None, s, 0, 1)
            parts.append(conv2d(xp[:, gi * cin_g : (gi + 1) * cin_g], sub))
        out = np.concatenate(parts, axis=1)
    if params.bias is not None:
        out = out + params.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, params: ConvParams, dout: np.ndarray):
    """Return (dx, dweight, dbias) for :func:`conv2d`."""
    n, _, h, w = x.shape
    k, s, p, g = params.kernel, params.stride, params.padding, params.groups
    ho, wo = dout.shape[2:]
    wt = params.weight
    xp = _pad(x, p)
    db = dout.sum(axis=(0, 2, 3)) if params.bias is not None else None
    if g == 1:
        cols = _im2col(xp, k, s, ho, wo).reshape(-1, n * ho * wo)
        d2 = dout.transpose(1, 0, 2, 3).reshape(params.c_out, -1)
        dw = (d2 @ cols.T).reshape(wt.shape)
        dcols = (wt.reshape(params.c_out, -1).T @ d2).reshape(-1, k, k, n, ho, wo)
        dxp = _col2im(dcols, xp.shape, k, s, ho, wo)
    elif g == params.c_in == params.c_out:
        dw = np.empty_like(wt)
        dxp = np.zeros_like(xp, dtype=np.result_type(xp, dout))
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                dw[:, 0, i, j] = (dout * win).sum(axis=(0, 2, 3))
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += wt[None, :, 0, i, j, None, None] * dout
    else:
        cin_g, cout_g = params.c_in // g, params.c_out // g
        dw = np.empty_like(wt)
        dxp = np.zeros_like(xp, dtype=np.result_type(xp, dout))
        for gi in range(g):
            co = slice(gi * cout_g, (gi + 1) * cout_g)
            ci = slice(gi * cin_g, (gi + 1) * cin_g)
            sub = ConvParams(wt[co], None, s, 0, 1)
            dxg, dwg, _ = conv2d_backward(xp[:, ci], sub, dout[:, co])
            dw[co] = dwg
            dxp[:, ci] = dxg
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max pool.

    Returns ``(pooled, indices)`` where ``indices`` holds the flat ``row * w + col``
    position of each maximum inside its (n, c) plane. Ties resolve to the
    smallest flat index.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # window order (0,0),(0,1),(1,0),(1,1) is increasing in flat index, and argmax
    # returns the first maximum
    arg = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + arg // 2
    cols = 2 * np.arange(w // 2)[None, :] + arg % 2
    indices = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(pooled), indices


def max_unpool2x2(pooled: np.ndarray, indices: np.ndarray, out_hw: tuple[int, int], fill=0) -> np.ndarray:
    """Scatter pooled values to their recorded positions; ``fill`` elsewhere."""
    if pooled.shape != indices.shape:
        raise ShapeError(f"unpool: pooled {pooled.shape} and indices {indices.shape} differ")
    n, c, hp, wp = pooled.shape
    h, w = out_hw
    if (h, w) != (2 * hp, 2 * wp):
        raise ShapeError(f"unpool: out_hw {out_hw} must be twice pooled dims {(hp, wp)}")
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise IndexError("unpool: index out of range")
    out = np.full((n, c, h * w), fill, dtype=pooled.dtype)
    np.put_along_axis(out, indices.reshape(n, c, -1), pooled.reshape(n, c, -1), axis=-1)
    return out.reshape(n, c, h, w)


def gather_indices(x: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Read ``x`` at flat per-plane ``indices`` (the adjoint of unpooling)."""
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    return np.take_along_axis(flat, indices.reshape(n, c, -1), axis=-1).reshape(indices.shape)


def _box_sum(x: np.ndarray, r: int) -> np.ndarray:
    # sum over a (2r+1)^2 window clipped to the plane, via integral images
    n, c, h, w = x.shape
    s = np.zeros((n, c, h + 1, w + 1), dtype=np.float64)
    s[:, :, 1:, 1:] = x.cumsum(axis=2).cumsum(axis=3)
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (
        s[:, :, y1][:, :, :, x1]
        - s[:, :, y0][:, :, :, x1]
        - s[:, :, y1][:, :, :, x0]
        + s[:, :, y0][:, :, :, x0]
    )


def avgpool_same(x: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 "same" average pool; border windows divide by the in-bounds count."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"avgpool_same needs an odd kernel, got {k}")
    if x.ndim != 4:
        raise ShapeError(f"avgpool_same input must be NCHW, got {x.shape}")
    r = (k - 1) // 2
    h, w = x.shape[2:]
    # centring on the plane minimum keeps constant planes exact
    base = x.min(axis=(2, 3), keepdims=True).astype(np.float64)
    sums = _box_sum(x - base, r)
    counts = _box_sum(np.ones((1, 1, h, w)), r)
    return (base + sums / counts).astype(x.dtype)


# ---------------------------------------------------------------------------
# batch norm and elementwise


def batchnorm(x: np.ndarray, params: BatchNormParams, update_stats: bool = True) -> np.ndarray:
    """Per-channel normalisation.

    In ``train`` mode batch statistics over (n, h, w) are used and, if
    ``update_stats``, the running buffers are updated in place with the
    unbiased variance.
    """
    params.validate()
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but params for {params.gamma.shape[0]}")
    if params.mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = x.size // c
            unbiased = var * m / max(m - 1, 1)
            mo = params.momentum
            params.running_mean[...] = (1 - mo) * params.running_mean + mo * mean
            params.running_var[...] = (1 - mo) * params.running_var + mo * unbiased
    elif params.mode == "eval":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {params.mode!r}")
    inv = (1.0 / np.sqrt(var + params.eps)).astype(x.dtype)
    scale = params.gamma * inv
    shift = params.beta - mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(x: np.ndarray, params: BatchNormParams, dout: np.ndarray):
    """Return (dx, dgamma, dbeta); train mode differentiates through batch stats."""
    axes = (0, 2, 3)
    if params.mode == "train":
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
    else:
        mean = params.running_mean[None, :, None, None]
        var = params.running_var[None, :, None, None]
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean) * inv
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = params.gamma[None, :, None, None]
    if params.mode == "train":
        dxhat = dout * g
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    else:
        dx = dout * g * inv
    return dx.astype(x.dtype), dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def elementwise(kind: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "add":
        if b is None:
            raise ValueError("add needs two operands")
        return add(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")
