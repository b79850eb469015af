"""Dense numeric primitives used by every other module.

Tensors are plain ``numpy.ndarray`` objects (C-contiguous, row-major).  All
operations preserve the dtype of their inputs: float32 is the default for
inference and benchmarking, float64 is used by the oracles and gradient
checks.  Nothing here spawns threads of its own; the bench harness pins the
BLAS pool to one thread.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

Tensor = np.ndarray
Rng = np.random.Generator

DEFAULT_DTYPE = np.float32


def make_rng(seed: int) -> Rng:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise DimensionError("batchnorm parameter vectors differ in length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise DimensionError("layernorm gamma/beta differ in length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, d: int, dtype=DEFAULT_DTYPE) -> "LayerNormParams":
        return cls(gamma=np.ones(d, dtype), beta=np.zeros(d, dtype))

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    if not -v.ndim <= axis < v.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {v.ndim}")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def swish(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def _check_kernel(k: int, padding: int | None) -> int:
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if padding is None:
        padding = k // 2
    if padding < 0:
        raise DimensionError("padding must be non-negative")
    return padding


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    size = (n + 2 * pad - k) // stride + 1
    if size < 1:
        raise DimensionError(f"input extent {n} too small for kernel {k}")
    return size


def _pad(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense cross-correlation, x: C_in x H x W, w: C_out x C_in x K x K."""
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 3-d input and 4-d kernel, got {x.shape}, {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    pad = _check_kernel(kh, padding)
    _, h, wd = x.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = _pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: C_in x Ho x Wo x K x K
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))


def conv2d_depthwise(x: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Per-channel cross-correlation, x: C x H x W, w: C x K x K."""
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"depthwise conv expects 3-d input and kernel, got {x.shape}, {w.shape}")
    c, kh, kw = w.shape
    if x.shape[0] != c:
        raise DimensionError(f"depthwise conv: input has {x.shape[0]} channels, kernel has {c}")
    if kh != kw:
        raise DimensionError("depthwise conv: only square kernels are supported")
    pad = _check_kernel(kh, padding)
    _, h, wd = x.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((c, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
            out += w[:, i, j, None, None] * tap
    return out


def conv2d_pointwise(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution, w: C_out x C_in."""
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"pointwise conv: kernel {w.shape} does not fit input {x.shape}")
    c, h, wd = x.shape
    return (w @ x.reshape(c, h * wd)).reshape(w.shape[0], h, wd)


def batchnorm_inference(x: Tensor, p: BatchNormParams) -> Tensor:
    """Normalise channel axis 0 of a C x H x W map with frozen statistics."""
    if x.shape[0] != p.channels:
        raise DimensionError(f"batchnorm: {x.shape[0]} channels vs {p.channels} parameters")
    scale = p.gamma / np.sqrt(p.running_var + p.eps)
    shift = p.beta - p.running_mean * scale
    bshape = (-1,) + (1,) * (x.ndim - 1)
    return x * scale.astype(x.dtype).reshape(bshape) + shift.astype(x.dtype).reshape(bshape)


def layernorm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Standardise over the last axis, then apply the affine map."""
    if x.shape[-1] != p.dim:
        raise DimensionError(f"layernorm: last dim {x.shape[-1]} vs {p.dim} parameters")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(p.eps)) * p.gamma + p.beta


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects C x H x W, got {x.shape}")
    return x.mean(axis=(1, 2))


def seeded_init(shape, fan_in: int, rng: Rng, dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform samples in [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = float(np.sqrt(6.0 / fan_in))
    out = rng.uniform(-bound, bound, size=shape).astype(dtype)
    # f32 rounding can push a sample one ulp past the bound
    return np.clip(out, -bound, bound, out=out)
