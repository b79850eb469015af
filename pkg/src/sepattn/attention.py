"""Attention units: multi-head self-attention, Linformer and separable
self-attention, plus the feed-forward network and the pre-norm transformer
block that hosts any of them.

Token matrices are ``k x d`` (rows are tokens).  The separable unit and the
block also accept extra leading batch axes, ``(..., k, d)``, which is how the
MobileViTv2 block runs one sequence per pixel position.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    DEFAULT_DTYPE,
    LayerNormParams,
    Rng,
    Tensor,
    layernorm,
    relu,
    seeded_init,
    softmax,
    swish,
)

KINDS = ("mha", "linformer", "separable")


def astype(weights, dtype):
    """Copy of a weight dataclass with every array (recursively) cast to dtype."""
    changes = {}
    for f in dataclasses.fields(weights):
        v = getattr(weights, f.name)
        if isinstance(v, np.ndarray):
            changes[f.name] = v.astype(dtype)
        elif dataclasses.is_dataclass(v):
            changes[f.name] = astype(v, dtype)
    return dataclasses.replace(weights, **changes)


def _require_finite(*arrays):
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ConfigurationError("attention weights contain NaN or Inf")


@dataclass(frozen=True)
class MHAWeights:
    """Per-head projections stored stacked as ``h x d x d_h``; ``w_o`` is d x d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def __post_init__(self):
        if self.w_q.ndim != 3:
            raise ConfigurationError("w_q must be stacked h x d x d_h")
        h, d, dh = self.w_q.shape
        if h * dh != d:
            raise ConfigurationError(f"{h} heads of width {dh} do not tile d={d}")
        if self.w_k.shape != self.w_q.shape or self.w_v.shape != self.w_q.shape:
            raise ConfigurationError("query/key/value head stacks differ in shape")
        if self.w_o.shape != (d, d):
            raise ConfigurationError(f"w_o must be {d}x{d}, got {self.w_o.shape}")
        _require_finite(self.w_q, self.w_k, self.w_v, self.w_o)

    @property
    def h(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_h(self) -> int:
        return self.w_q.shape[2]

    @cached_property
    def fused(self) -> tuple[Tensor, Tensor, Tensor]:
        # head i occupies columns [i*d_h, (i+1)*d_h) of each d x d matrix
        def cat(w):
            return np.ascontiguousarray(np.concatenate(list(w), axis=1))

        return cat(self.w_q), cat(self.w_k), cat(self.w_v)


@dataclass(frozen=True)
class LinformerWeights:
    base: MHAWeights
    e_proj: Tensor  # k_max x p, keys
    f_proj: Tensor  # k_max x p, values

    def __post_init__(self):
        if self.e_proj.ndim != 2 or self.e_proj.shape != self.f_proj.shape:
            raise ConfigurationError("token projections must share one k_max x p shape")
        if self.e_proj.shape[1] < 1:
            raise ConfigurationError("p must be >= 1")
        _require_finite(self.e_proj, self.f_proj)

    @property
    def k_max(self) -> int:
        return self.e_proj.shape[0]

    @property
    def p(self) -> int:
        return self.e_proj.shape[1]


@dataclass(frozen=True)
class SepAttnWeights:
    w_i: Tensor  # latent token, length d
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def __post_init__(self):
        d = self.w_i.shape[0]
        if self.w_i.ndim != 1 or any(m.shape != (d, d) for m in (self.w_k, self.w_v, self.w_o)):
            raise ConfigurationError("separable attention weights must share one d")
        _require_finite(self.w_i, self.w_k, self.w_v, self.w_o)

    @property
    def d(self) -> int:
        return self.w_i.shape[0]


@dataclass(frozen=True)
class FfnWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d = self.w1.shape[0]
        if self.w1.shape != (d, 2 * d) or self.b1.shape != (2 * d,):
            raise ConfigurationError("ffn expansion must be exactly 2")
        if self.w2.shape != (2 * d, d) or self.b2.shape != (d,):
            raise ConfigurationError("ffn output projection must map 2d -> d")

    @property
    def d(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class TransformerBlockWeights:
    attn: MHAWeights | LinformerWeights | SepAttnWeights
    ffn: FfnWeights
    norm1: LayerNormParams
    norm2: LayerNormParams

    def __post_init__(self):
        d = self.ffn.d
        attn_d = self.attn.base.d if isinstance(self.attn, LinformerWeights) else self.attn.d
        if attn_d != d or self.norm1.dim != d or self.norm2.dim != d:
            raise ConfigurationError("transformer block sub-weights disagree on d")

    @property
    def kind(self) -> str:
        return _KIND_OF[type(self.attn)]


_KIND_OF = {MHAWeights: "mha", LinformerWeights: "linformer", SepAttnWeights: "separable"}


# ---------------------------------------------------------------- init


def init_mha(d: int, h: int, rng: Rng, dtype=DEFAULT_DTYPE) -> MHAWeights:
    if h < 1 or d % h:
        raise ConfigurationError(f"d={d} is not divisible by h={h}")
    dh = d // h
    return MHAWeights(
        w_q=seeded_init((h, d, dh), d, rng, dtype),
        w_k=seeded_init((h, d, dh), d, rng, dtype),
        w_v=seeded_init((h, d, dh), d, rng, dtype),
        w_o=seeded_init((d, d), d, rng, dtype),
    )


def init_linformer(d: int, h: int, p: int, k_max: int, rng: Rng, dtype=DEFAULT_DTYPE) -> LinformerWeights:
    base = init_mha(d, h, rng, dtype)
    return LinformerWeights(
        base=base,
        e_proj=seeded_init((k_max, p), k_max, rng, dtype),
        f_proj=seeded_init((k_max, p), k_max, rng, dtype),
    )


def init_separable(d: int, rng: Rng, dtype=DEFAULT_DTYPE) -> SepAttnWeights:
    return SepAttnWeights(
        w_i=seeded_init((d,), d, rng, dtype),
        w_k=seeded_init((d, d), d, rng, dtype),
        w_v=seeded_init((d, d), d, rng, dtype),
        w_o=seeded_init((d, d), d, rng, dtype),
    )


def init_ffn(d: int, rng: Rng, dtype=DEFAULT_DTYPE) -> FfnWeights:
    return FfnWeights(
        w1=seeded_init((d, 2 * d), d, rng, dtype),
        b1=np.zeros(2 * d, dtype),
        w2=seeded_init((2 * d, d), 2 * d, rng, dtype),
        b2=np.zeros(d, dtype),
    )


def init_transformer_block(
    kind: str, d: int, rng: Rng, *, h: int = 1, p: int = 1, k_max: int = 1, dtype=DEFAULT_DTYPE
) -> TransformerBlockWeights:
    if kind == "mha":
        attn = init_mha(d, h, rng, dtype)
    elif kind == "linformer":
        attn = init_linformer(d, h, p, k_max, rng, dtype)
    elif kind == "separable":
        attn = init_separable(d, rng, dtype)
    else:
        raise ConfigurationError(f"unknown attention kind {kind!r}")
    return TransformerBlockWeights(
        attn=attn,
        ffn=init_ffn(d, rng, dtype),
        norm1=LayerNormParams.identity(d, dtype),
        norm2=LayerNormParams.identity(d, dtype),
    )


# ---------------------------------------------------------------- forwards


def _check_tokens(x: Tensor, d: int):
    if x.ndim != 2:
        raise DimensionError(f"expected a k x d token matrix, got shape {x.shape}")
    if x.shape[0] < 1:
        raise DimensionError("need at least one token")
    if x.shape[1] != d:
        raise DimensionError(f"token dim {x.shape[1]} does not match weights d={d}")


def mha_forward(x: Tensor, w: MHAWeights, return_attention: bool = False):
    """Scaled dot-product multi-head self-attention.

    With ``return_attention`` the per-head ``h x k x k`` attention maps are
    returned alongside the output.
    """
    _check_tokens(x, w.d)
    wq, wk, wv = w.fused
    q, kk, v = x @ wq, x @ wk, x @ wv
    scale = x.dtype.type(1.0 / math.sqrt(w.d_h))
    heads = np.empty_like(v)
    maps = []
    for i in range(w.h):
        sl = slice(i * w.d_h, (i + 1) * w.d_h)
        a = softmax((q[:, sl] @ kk[:, sl].T) * scale, axis=-1)
        heads[:, sl] = a @ v[:, sl]
        if return_attention:
            maps.append(a)
    y = heads @ w.w_o
    return (y, np.stack(maps)) if return_attention else y


def linformer_forward(x: Tensor, w: LinformerWeights, return_attention: bool = False):
    """MHA with the key/value token axis projected from k to p tokens.

    The projections E, F are shared by all heads; only their first k rows
    are used for a k-token input.
    """
    _check_tokens(x, w.base.d)
    k = x.shape[0]
    if k > w.k_max:
        raise ConfigurationError(f"{k} tokens exceed the projection capacity k_max={w.k_max}")
    base = w.base
    wq, wk, wv = base.fused
    e, f = w.e_proj[:k], w.f_proj[:k]
    q = x @ wq
    kp = e.T @ (x @ wk)  # p x d
    vp = f.T @ (x @ wv)
    scale = x.dtype.type(1.0 / math.sqrt(base.d_h))
    heads = np.empty_like(q)
    maps = []
    for i in range(base.h):
        sl = slice(i * base.d_h, (i + 1) * base.d_h)
        a = softmax((q[:, sl] @ kp[:, sl].T) * scale, axis=-1)  # k x p
        heads[:, sl] = a @ vp[:, sl]
        if return_attention:
            maps.append(a)
    y = heads @ base.w_o
    return (y, np.stack(maps)) if return_attention else y


def context_scores(x: Tensor, w_i: Tensor) -> Tensor:
    """Softmax over tokens of each token's inner product with the latent token."""
    if x.shape[-1] != w_i.shape[0]:
        raise DimensionError(f"token dim {x.shape[-1]} does not match latent token length {w_i.shape[0]}")
    return softmax(x @ w_i, axis=-1)


def context_vector(c_s: Tensor, x_k: Tensor) -> Tensor:
    """Score-weighted sum of key rows: ``sum_i c_s[i] * x_k[i]``."""
    if c_s.shape[-1] != x_k.shape[-2]:
        raise DimensionError(f"{c_s.shape[-1]} scores for {x_k.shape[-2]} key rows")
    return (c_s[..., None, :] @ x_k)[..., 0, :]


def _separable(x: Tensor, w: SepAttnWeights) -> tuple[Tensor, Tensor]:
    if x.ndim < 2 or x.shape[-1] != w.d:
        raise DimensionError(f"expected (..., k, {w.d}) tokens, got {x.shape}")
    c_s = context_scores(x, w.w_i)  # (..., k)
    c_v = context_vector(c_s, x @ w.w_k)  # (..., d)
    x_v = relu(x @ w.w_v)
    return (x_v * c_v[..., None, :]) @ w.w_o, c_s


def separable_self_attention_forward(x: Tensor, w: SepAttnWeights, return_scores: bool = False):
    """Linear-cost attention against a single latent token.

    Nothing larger than ``k x d`` is ever allocated.  Leading batch axes are
    allowed; the softmax always runs over the token axis (-2 of ``x``).
    """
    if x.shape[-2] < 1:
        raise DimensionError("need at least one token")
    y, c_s = _separable(x, w)
    return (y, c_s) if return_scores else y


def separable_self_attention_patched(x_u: Tensor, w: SepAttnWeights) -> tuple[Tensor, Tensor]:
    """Run the separable unit on an unfolded ``d x M x N`` map.

    Each of the M pixel positions is an independent sequence of N patch
    tokens.  Returns the ``d x M x N`` output and the ``M x N`` context scores.
    """
    if x_u.ndim != 3 or x_u.shape[0] != w.d:
        raise DimensionError(f"expected a {w.d} x M x N unfolded map, got {x_u.shape}")
    tokens = np.ascontiguousarray(x_u.transpose(1, 2, 0))  # M x N x d
    y, c_s = _separable(tokens, w)
    return np.ascontiguousarray(y.transpose(2, 0, 1)), c_s


def ffn_forward(x: Tensor, w: FfnWeights) -> Tensor:
    if x.shape[-1] != w.d:
        raise DimensionError(f"token dim {x.shape[-1]} does not match ffn d={w.d}")
    return swish(x @ w.w1 + w.b1) @ w.w2 + w.b2


def attention_forward(kind: str, x: Tensor, w) -> Tensor:
    if kind not in KINDS:
        raise ConfigurationError(f"unknown attention kind {kind!r}")
    if _KIND_OF.get(type(w)) != kind:
        raise ConfigurationError(f"{type(w).__name__} cannot run as {kind!r} attention")
    if kind == "mha":
        return mha_forward(x, w)
    if kind == "linformer":
        return linformer_forward(x, w)
    return separable_self_attention_forward(x, w)


def transformer_block_forward(x: Tensor, w: TransformerBlockWeights, kind: str, return_scores: bool = False):
    """Pre-norm block: ``y1 = x + attn(norm1(x))``, ``y = y1 + ffn(norm2(y1))``.

    ``return_scores`` is only meaningful for the separable kind and returns
    the context scores of the attention sub-layer as a second value.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown attention kind {kind!r}")
    if w.kind != kind:
        raise ConfigurationError(f"block holds {w.kind!r} weights, asked to run {kind!r}")
    scores = None
    h = layernorm(x, w.norm1)
    if kind == "separable":
        a, scores = _separable(h, w.attn)
    else:
        a = attention_forward(kind, h, w.attn)
    y1 = x + a
    y = y1 + ffn_forward(layernorm(y1, w.norm2), w.ffn)
    if return_scores:
        if scores is None:
            raise ConfigurationError("context scores exist only for separable attention")
        return y, scores
    return y


# ---------------------------------------------------------------- MAC counts


def mac_breakdown(kind: str, k: int, d: int, h: int = 1, p: int = 1) -> dict[str, int]:
    """Analytic multiply-accumulate count per stage of one attention forward.

    Softmax, ReLU and normalisation are elementwise and not counted.
    """
    if kind == "mha":
        return {
            "qkv_proj": 3 * k * d * d,
            "attn_logits": k * k * d,
            "attn_values": k * k * d,
            "out_proj": k * d * d,
        }
    if kind == "linformer":
        return {
            "qkv_proj": 3 * k * d * d,
            "token_proj": 2 * k * p * d,
            "attn_logits": k * p * d,
            "attn_values": k * p * d,
            "out_proj": k * d * d,
        }
    if kind == "separable":
        return {
            "scores": k * d,
            "key_proj": k * d * d,
            "value_proj": k * d * d,
            "context": k * d,
            "broadcast": k * d,
            "out_proj": k * d * d,
        }
    raise ConfigurationError(f"unknown attention kind {kind!r}")


# d x d linear maps; everything else is token mixing
_PROJECTION_TERMS = {"qkv_proj", "key_proj", "value_proj", "out_proj"}


def attention_macs(kind: str, k: int, d: int, h: int = 1, p: int = 1) -> int:
    return sum(mac_breakdown(kind, k, d, h, p).values())


def token_mixing_macs(kind: str, k: int, d: int, h: int = 1, p: int = 1) -> int:
    """MACs excluding the d x d projections every unit shares."""
    return sum(v for n, v in mac_breakdown(kind, k, d, h, p).items() if n not in _PROJECTION_TERMS)


def ffn_macs(k: int, d: int) -> int:
    return k * d * 2 * d + k * 2 * d * d
