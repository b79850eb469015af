"""MobileViTv2 blocks, the width-scaled classification network, and exact
parameter / multiply-accumulate counters.

Feature maps are ``C x H x W`` (batch size 1).  The network is built from a
:class:`ModelSpec`, a plain list of stages that can be written to and read
back from JSON.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as attn
from .errors import ConfigurationError, ShapeError
from .tensor import (
    DEFAULT_DTYPE,
    BatchNormParams,
    LayerNormParams,
    Rng,
    Tensor,
    batchnorm_inference,
    conv2d,
    conv2d_depthwise,
    conv2d_pointwise,
    global_avg_pool,
    layernorm,
    seeded_init,
    swish,
)

MV2_EXPANSION = 2
KERNEL = 3


# ---------------------------------------------------------------- unfold / fold


def unfold(x: Tensor, h: int, w: int) -> Tensor:
    """``d x H x W`` -> ``d x M x N`` with M = h*w pixels per patch, N patches.

    Pixel (r, c) of a patch lands at m = r*w + c; patches are numbered
    row-major over the patch grid.
    """
    d, hh, ww = x.shape
    if hh % h or ww % w:
        raise ShapeError(f"cannot unfold {hh}x{ww} map into {h}x{w} patches")
    nh, nw = hh // h, ww // w
    return np.ascontiguousarray(x.reshape(d, nh, h, nw, w).transpose(0, 2, 4, 1, 3)).reshape(d, h * w, nh * nw)


def fold(x_u: Tensor, h: int, w: int, H: int, W: int) -> Tensor:
    """Exact inverse of :func:`unfold`."""
    if x_u.ndim != 3:
        raise ShapeError(f"fold expects d x M x N, got {x_u.shape}")
    d, m, n = x_u.shape
    if H % h or W % w or m != h * w or n != (H // h) * (W // w):
        raise ShapeError(f"cannot fold {m}x{n} tokens with {h}x{w} patches into {H}x{W}")
    nh, nw = H // h, W // w
    return np.ascontiguousarray(x_u.reshape(d, h, w, nh, nw).transpose(0, 3, 1, 4, 2)).reshape(d, H, W)


# ---------------------------------------------------------------- blocks


@dataclass(frozen=True)
class ConvBN:
    """Dense K x K conv followed by batchnorm (the stem)."""

    w: Tensor
    bn: BatchNormParams


@dataclass(frozen=True)
class Mv2BlockWeights:
    expand: Tensor  # 2C x C
    expand_bn: BatchNormParams
    depthwise: Tensor  # 2C x 3 x 3
    depthwise_bn: BatchNormParams
    project: Tensor  # C_out x 2C
    project_bn: BatchNormParams

    def __post_init__(self):
        hidden, c_in = self.expand.shape
        if hidden != MV2_EXPANSION * c_in:
            raise ConfigurationError(f"MV2 expansion must be {MV2_EXPANSION}, got {hidden}/{c_in}")
        if self.depthwise.shape[0] != hidden or self.project.shape[1] != hidden:
            raise ConfigurationError("MV2 hidden widths disagree")

    @property
    def c_in(self) -> int:
        return self.expand.shape[1]

    @property
    def c_out(self) -> int:
        return self.project.shape[0]


@dataclass(frozen=True)
class MobileVitV2BlockWeights:
    dw_conv: Tensor  # C x 3 x 3
    dw_bn: BatchNormParams
    pw_in: Tensor  # d x C
    blocks: tuple[attn.TransformerBlockWeights, ...]
    out_norm: LayerNormParams
    pw_out: Tensor  # C x d

    def __post_init__(self):
        d, c = self.pw_in.shape
        if self.pw_out.shape != (c, d) or self.dw_conv.shape[0] != c or self.out_norm.dim != d:
            raise ConfigurationError("MobileViTv2 block widths disagree")
        if any(b.kind != "separable" or b.ffn.d != d for b in self.blocks):
            raise ConfigurationError("MobileViTv2 blocks must hold separable attention of width d")

    @property
    def channels(self) -> int:
        return self.pw_in.shape[1]

    @property
    def d(self) -> int:
        return self.pw_in.shape[0]


def mv2_block_forward(x: Tensor, w: Mv2BlockWeights, stride: int) -> Tensor:
    """Inverted residual: expand -> BN -> swish -> depthwise -> BN -> swish -> project -> BN."""
    if stride not in (1, 2):
        raise ConfigurationError(f"MV2 stride must be 1 or 2, got {stride}")
    y = swish(batchnorm_inference(conv2d_pointwise(x, w.expand), w.expand_bn))
    y = swish(batchnorm_inference(conv2d_depthwise(y, w.depthwise, stride), w.depthwise_bn))
    y = batchnorm_inference(conv2d_pointwise(y, w.project), w.project_bn)
    if stride == 1 and w.c_in == w.c_out:
        y = y + x
    return y


def mobilevitv2_block_forward(x: Tensor, w: MobileVitV2BlockWeights, patch: tuple[int, int] = (2, 2)):
    """Local 3x3 depthwise conv, 1x1 to d, unfold, B separable transformer
    blocks, layer norm, fold, 1x1 back to C.  No skip or fusion path.

    Returns the output map and the list of B ``M x N`` context-score matrices.
    """
    ph, pw = patch
    c, hh, ww = x.shape
    if hh % ph or ww % pw:
        raise ShapeError(f"{hh}x{ww} map is not divisible by the {ph}x{pw} patch")
    y = swish(batchnorm_inference(conv2d_depthwise(x, w.dw_conv, 1), w.dw_bn))
    y = conv2d_pointwise(y, w.pw_in)
    tokens = np.ascontiguousarray(unfold(y, ph, pw).transpose(1, 2, 0))  # M x N x d
    scores = []
    for blk in w.blocks:
        tokens, c_s = attn.transformer_block_forward(tokens, blk, "separable", return_scores=True)
        scores.append(c_s)
    tokens = layernorm(tokens, w.out_norm)
    y = fold(np.ascontiguousarray(tokens.transpose(2, 0, 1)), ph, pw, hh, ww)
    return conv2d_pointwise(y, w.pw_out), scores


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class StageSpec:
    kind: str  # "conv" | "mv2" | "mobilevit"
    stride: int
    out_channels: int
    repeats: int = 1
    attn_blocks: int = 0
    attn_dim: int = 0


def _round_width(c: float) -> int:
    return int(math.floor(c + 0.5))


def _round_dim(d: float) -> int:
    n = _round_width(d)
    return n + (n % 2)


@dataclass(frozen=True)
class ModelSpec:
    alpha: float
    stages: tuple[StageSpec, ...]
    patch: tuple[int, int] = (2, 2)
    num_classes: int = 1000
    in_channels: int = 3

    def __post_init__(self):
        if not self.stages or self.stages[0].kind != "conv":
            raise ConfigurationError("the first stage must be the conv stem")
        for s in self.stages:
            if s.kind not in ("conv", "mv2", "mobilevit"):
                raise ConfigurationError(f"unknown stage kind {s.kind!r}")
            if s.out_channels < 1 or s.repeats < 1 or s.stride not in (1, 2):
                raise ConfigurationError(f"invalid stage {s}")
            if s.kind == "mobilevit":
                if s.stride != 1 or s.attn_blocks < 1:
                    raise ConfigurationError(f"invalid MobileViTv2 stage {s}")
                if s.attn_dim < 8 or s.attn_dim % 2:
                    raise ConfigurationError(f"attention dim must be even and >= 8, got {s.attn_dim}")

    @classmethod
    def from_alpha(cls, alpha: float, num_classes: int = 1000, os4_repeats: int = 1) -> "ModelSpec":
        """Canonical width-scaled layer plan.

        ``os4_repeats`` is the number of stride-1 MV2 blocks after the strided
        one at output stride 4.  One reproduces the published parameter and
        FLOP totals; the architecture table's literal value is two.
        """
        if not 0 < alpha <= 4:
            raise ConfigurationError(f"alpha must lie in (0, 4], got {alpha}")
        c = lambda n: _round_width(n * alpha)  # noqa: E731
        dim = lambda n: _round_dim(n * alpha)  # noqa: E731
        stages = [
            StageSpec("conv", 2, c(32)),
            StageSpec("mv2", 1, c(64)),
            StageSpec("mv2", 2, c(128)),
            StageSpec("mv2", 1, c(128), repeats=os4_repeats),
            StageSpec("mv2", 2, c(256)),
            StageSpec("mobilevit", 1, c(256), attn_blocks=2, attn_dim=dim(128)),
            StageSpec("mv2", 2, c(384)),
            StageSpec("mobilevit", 1, c(384), attn_blocks=4, attn_dim=dim(192)),
            StageSpec("mv2", 2, c(512)),
            StageSpec("mobilevit", 1, c(512), attn_blocks=3, attn_dim=dim(256)),
        ]
        return cls(alpha=float(alpha), stages=tuple(stages), num_classes=num_classes)

    @property
    def total_stride(self) -> int:
        return math.prod(s.stride for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "patch": list(self.patch),
            "stages": [dataclasses.asdict(s) for s in self.stages],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            alpha=float(data["alpha"]),
            num_classes=int(data.get("num_classes", 1000)),
            in_channels=int(data.get("in_channels", 3)),
            patch=tuple(int(v) for v in data.get("patch", (2, 2))),
            stages=tuple(StageSpec(**s) for s in data["stages"]),
        )


def save_spec(spec: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_spec(path) -> ModelSpec:
    return ModelSpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class Layer:
    kind: str
    stride: int
    weights: object
    output_stride: int


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    layers: tuple[Layer, ...]
    classifier_w: Tensor  # C x num_classes
    classifier_b: Tensor


@dataclass(frozen=True)
class ContextScores:
    """Context scores of one separable block, with the map size they fold to."""

    output_stride: int
    block: int
    scores: Tensor  # M x N
    height: int
    width: int


def _init_mv2(c_in: int, c_out: int, rng: Rng, dtype) -> Mv2BlockWeights:
    hidden = MV2_EXPANSION * c_in
    return Mv2BlockWeights(
        expand=seeded_init((hidden, c_in), c_in, rng, dtype),
        expand_bn=BatchNormParams.identity(hidden, dtype),
        depthwise=seeded_init((hidden, KERNEL, KERNEL), KERNEL * KERNEL, rng, dtype),
        depthwise_bn=BatchNormParams.identity(hidden, dtype),
        project=seeded_init((c_out, hidden), hidden, rng, dtype),
        project_bn=BatchNormParams.identity(c_out, dtype),
    )


def _init_mvit(c: int, d: int, n_blocks: int, rng: Rng, dtype) -> MobileVitV2BlockWeights:
    return MobileVitV2BlockWeights(
        dw_conv=seeded_init((c, KERNEL, KERNEL), KERNEL * KERNEL, rng, dtype),
        dw_bn=BatchNormParams.identity(c, dtype),
        pw_in=seeded_init((d, c), c, rng, dtype),
        blocks=tuple(attn.init_transformer_block("separable", d, rng, dtype=dtype) for _ in range(n_blocks)),
        out_norm=LayerNormParams.identity(d, dtype),
        pw_out=seeded_init((c, d), d, rng, dtype),
    )


def build_model(alpha_or_spec, rng: Rng, dtype=DEFAULT_DTYPE) -> Model:
    """Instantiate a network from a width multiplier or an explicit spec."""
    spec = alpha_or_spec if isinstance(alpha_or_spec, ModelSpec) else ModelSpec.from_alpha(alpha_or_spec)
    layers = []
    c = spec.in_channels
    os_ = 1
    for s in spec.stages:
        for r in range(s.repeats):
            stride = s.stride if r == 0 else 1
            os_ *= stride
            if s.kind == "conv":
                w = ConvBN(
                    w=seeded_init((s.out_channels, c, KERNEL, KERNEL), c * KERNEL * KERNEL, rng, dtype),
                    bn=BatchNormParams.identity(s.out_channels, dtype),
                )
            elif s.kind == "mv2":
                w = _init_mv2(c, s.out_channels, rng, dtype)
            else:
                if s.out_channels != c:
                    raise ConfigurationError("a MobileViTv2 stage cannot change the channel count")
                w = _init_mvit(c, s.attn_dim, s.attn_blocks, rng, dtype)
            layers.append(Layer(s.kind, stride, w, os_))
            c = s.out_channels
    return Model(
        spec=spec,
        layers=tuple(layers),
        classifier_w=seeded_init((c, spec.num_classes), c, rng, dtype),
        classifier_b=np.zeros(spec.num_classes, dtype),
    )


def _check_input(spec: ModelSpec, x: Tensor):
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"expected a {spec.in_channels} x H x W image, got {x.shape}")
    _check_resolution(spec, x.shape[1], x.shape[2])


def _check_resolution(spec: ModelSpec, hh: int, ww: int):
    """Divisible by the total stride and by the patch at every attention stage."""
    s = spec.total_stride
    if hh % s or ww % s:
        raise ShapeError(f"input {hh}x{ww} is not divisible by the total stride {s}")
    ph, pw = spec.patch
    os_ = 1
    for st in spec.stages:
        os_ *= st.stride
        if st.kind == "mobilevit" and ((hh // os_) % ph or (ww // os_) % pw):
            raise ShapeError(
                f"input {hh}x{ww} gives a {hh // os_}x{ww // os_} map at output stride {os_}, "
                f"not divisible by the {ph}x{pw} patch"
            )


def model_forward(m: Model, x: Tensor, return_scores: bool = False):
    """Logits for one ``3 x H x W`` image; optionally every block's context scores."""
    _check_input(m.spec, x)
    x = x.astype(m.classifier_w.dtype, copy=False)
    captured = []
    for layer in m.layers:
        if layer.kind == "conv":
            x = swish(batchnorm_inference(conv2d(x, layer.weights.w, layer.stride), layer.weights.bn))
        elif layer.kind == "mv2":
            x = mv2_block_forward(x, layer.weights, layer.stride)
        else:
            x, scores = mobilevitv2_block_forward(x, layer.weights, m.spec.patch)
            if return_scores:
                _, hh, ww = x.shape
                captured.extend(
                    ContextScores(layer.output_stride, i, c_s, hh, ww) for i, c_s in enumerate(scores)
                )
    logits = global_avg_pool(x) @ m.classifier_w + m.classifier_b
    return (logits, captured) if return_scores else logits


# ---------------------------------------------------------------- counting


def _param_arrays(obj):
    if isinstance(obj, np.ndarray):
        yield obj
    elif isinstance(obj, (BatchNormParams, LayerNormParams)):
        # running statistics are buffers, not parameters
        yield obj.gamma
        yield obj.beta
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _param_arrays(v)
    elif isinstance(obj, Layer):
        yield from _param_arrays(obj.weights)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, ModelSpec):
        for f in dataclasses.fields(obj):
            yield from _param_arrays(getattr(obj, f.name))


def count_params(m: Model) -> int:
    """Number of learnable scalars, including norm affine parameters."""
    return sum(a.size for a in _param_arrays(m))


def pointwise_macs(c_in: int, c_out: int, height: int, width: int) -> int:
    return height * width * c_in * c_out


def mac_breakdown(spec: ModelSpec, input_hw: tuple[int, int] = (256, 256)) -> list[tuple[str, int]]:
    """Per-layer analytic MAC counts (convolutions, linear maps and attention
    internals; norms, activations and pooling are free)."""
    hh, ww = input_hw
    _check_resolution(spec, hh, ww)
    out = []
    c = spec.in_channels
    for si, s in enumerate(spec.stages):
        for r in range(s.repeats):
            stride = s.stride if r == 0 else 1
            name = f"stage{si}.{r}.{s.kind}"
            if s.kind == "conv":
                hh, ww = hh // stride, ww // stride
                out.append((name, hh * ww * s.out_channels * c * KERNEL * KERNEL))
            elif s.kind == "mv2":
                hidden = MV2_EXPANSION * c
                macs = pointwise_macs(c, hidden, hh, ww)
                hh, ww = hh // stride, ww // stride
                macs += hh * ww * hidden * KERNEL * KERNEL + pointwise_macs(hidden, s.out_channels, hh, ww)
                out.append((name, macs))
            else:
                d, t = s.attn_dim, hh * ww
                m_pix = spec.patch[0] * spec.patch[1]
                n_tok = t // m_pix
                out.append((f"{name}.local", t * c * KERNEL * KERNEL + pointwise_macs(c, d, hh, ww)))
                for b in range(s.attn_blocks):
                    out.append((f"{name}.attn{b}", m_pix * attn.attention_macs("separable", n_tok, d)))
                    out.append((f"{name}.ffn{b}", m_pix * attn.ffn_macs(n_tok, d)))
                out.append((f"{name}.proj", pointwise_macs(d, c, hh, ww)))
            c = s.out_channels
    out.append(("classifier", c * spec.num_classes))
    return out


def count_macs(m: Model | ModelSpec, input_hw: tuple[int, int] = (256, 256)) -> int:
    spec = m.spec if isinstance(m, Model) else m
    return sum(v for _, v in mac_breakdown(spec, input_hw))
