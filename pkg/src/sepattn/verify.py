"""Independent checks for the attention units.

The oracles below are deliberately naive: plain Python floats and explicit
loops, sharing no code with the vectorised forwards they are compared with.
The backward passes are hand-derived and are validated against central
finite differences in float64.

Relative error throughout is normwise: ``max|a - b| / max|b|``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as attn
from .attention import LinformerWeights, MHAWeights, SepAttnWeights
from .tensor import Rng, Tensor, make_rng

FD_STEP = 1e-5
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-5
EQUIV_TOL = 1e-5
KINK_GUARD = 1e-3


@dataclass(frozen=True)
class CheckReport:
    op: str
    max_rel_err: float
    max_abs_err: float
    tol: float
    metric: str = "rel"  # which error the tolerance applies to

    @property
    def passed(self) -> bool:
        err = self.max_rel_err if self.metric == "rel" else self.max_abs_err
        return bool(err <= self.tol)

    def line(self) -> str:
        return (
            f"op={self.op} max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
            f"tol={self.tol:.0e} metric={self.metric} pass={str(self.passed).lower()}"
        )


GradCheckReport = CheckReport


def rel_err(a: Tensor, b: Tensor) -> float:
    scale = float(np.max(np.abs(b))) if np.size(b) else 0.0
    return float(np.max(np.abs(np.asarray(a, np.float64) - b))) / max(scale, 1e-300)


def abs_err(a: Tensor, b: Tensor) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


# ---------------------------------------------------------------- loop oracles


def _lists(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def _proj(x, w, rows, cols, inner):
    return [[sum(x[i][t] * w[t][j] for t in range(inner)) for j in range(cols)] for i in range(rows)]


def _softmax_row(v):
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return [t / s for t in e]


def _heads_attend(q, kk, vv, k_q, k_kv, dh):
    """One head: softmax(q kk^T / sqrt(dh)) vv, returns k_q x dh."""
    scale = 1.0 / math.sqrt(dh)
    out = []
    for i in range(k_q):
        logits = [sum(q[i][c] * kk[j][c] for c in range(dh)) * scale for j in range(k_kv)]
        a = _softmax_row(logits)
        out.append([sum(a[j] * vv[j][c] for j in range(k_kv)) for c in range(dh)])
    return out


def _mha_loops(x, wq, wk, wv, wo, e=None, f=None):
    k, d = len(x), len(x[0])
    h, dh = len(wq), len(wq[0][0])
    concat = [[0.0] * d for _ in range(k)]
    for head in range(h):
        q = _proj(x, wq[head], k, dh, d)
        kk = _proj(x, wk[head], k, dh, d)
        vv = _proj(x, wv[head], k, dh, d)
        k_kv = k
        if e is not None:
            p = len(e[0])
            kk = [[sum(e[t][r] * kk[t][c] for t in range(k)) for c in range(dh)] for r in range(p)]
            vv = [[sum(f[t][r] * vv[t][c] for t in range(k)) for c in range(dh)] for r in range(p)]
            k_kv = p
        o = _heads_attend(q, kk, vv, k, k_kv, dh)
        for i in range(k):
            for c in range(dh):
                concat[i][head * dh + c] = o[i][c]
    return np.array(_proj(concat, wo, k, d, d))


def oracle_mha(x: Tensor, w: MHAWeights) -> Tensor:
    """Multi-head attention via scalar loops in float64."""
    return _mha_loops(_lists(x), _lists(w.w_q), _lists(w.w_k), _lists(w.w_v), _lists(w.w_o))


def oracle_linformer(x: Tensor, w: LinformerWeights) -> Tensor:
    k = len(x)
    b = w.base
    return _mha_loops(
        _lists(x), _lists(b.w_q), _lists(b.w_k), _lists(b.w_v), _lists(b.w_o),
        e=_lists(w.e_proj[:k]), f=_lists(w.f_proj[:k]),
    )


def oracle_separable(x: Tensor, w: SepAttnWeights) -> Tensor:
    """Separable self-attention via scalar loops in float64."""
    xs = _lists(x)
    k, d = len(xs), len(xs[0])
    wi, wk, wv, wo = _lists(w.w_i), _lists(w.w_k), _lists(w.w_v), _lists(w.w_o)
    c_s = _softmax_row([sum(xs[i][t] * wi[t] for t in range(d)) for i in range(k)])
    x_k = _proj(xs, wk, k, d, d)
    c_v = [sum(c_s[i] * x_k[i][j] for i in range(k)) for j in range(d)]
    x_v = _proj(xs, wv, k, d, d)
    mixed = [[c_v[j] * max(x_v[i][j], 0.0) for j in range(d)] for i in range(k)]
    return np.array(_proj(mixed, wo, k, d, d))


# ---------------------------------------------------------------- backward passes


def _softmax_vjp(a: Tensor, g: Tensor, axis: int = -1) -> Tensor:
    return a * (g - np.sum(g * a, axis=axis, keepdims=True))


def sep_attn_backward(x: Tensor, w: SepAttnWeights, upstream: Tensor) -> tuple[Tensor, SepAttnWeights]:
    """Gradients of ``L = sum(upstream * y)`` for separable self-attention."""
    c_s = attn.softmax(x @ w.w_i, axis=-1)
    x_k = x @ w.w_k
    c_v = c_s @ x_k
    pre_v = x @ w.w_v
    x_v = np.maximum(pre_v, 0)
    mixed = x_v * c_v

    g_wo = mixed.T @ upstream
    g_mixed = upstream @ w.w_o.T
    g_c_v = np.sum(g_mixed * x_v, axis=0)
    g_pre_v = (g_mixed * c_v) * (pre_v > 0)
    g_x_k = np.outer(c_s, g_c_v)
    g_c_s = x_k @ g_c_v
    g_z = _softmax_vjp(c_s, g_c_s)

    grads = SepAttnWeights(
        w_i=x.T @ g_z,
        w_k=x.T @ g_x_k,
        w_v=x.T @ g_pre_v,
        w_o=g_wo,
    )
    g_x = np.outer(g_z, w.w_i) + g_x_k @ w.w_k.T + g_pre_v @ w.w_v.T
    return g_x, grads


def mha_backward(x: Tensor, w: MHAWeights, upstream: Tensor) -> tuple[Tensor, MHAWeights]:
    """Gradients of ``L = sum(upstream * y)`` for multi-head attention."""
    h, d, dh = w.w_q.shape
    scale = 1.0 / math.sqrt(dh)
    g_x = np.zeros_like(x)
    g_q, g_k, g_v = (np.zeros_like(w.w_q) for _ in range(3))
    concat = np.empty((x.shape[0], d), dtype=x.dtype)
    g_concat = upstream @ w.w_o.T
    for i in range(h):
        q, kk, v = x @ w.w_q[i], x @ w.w_k[i], x @ w.w_v[i]
        a = attn.softmax(q @ kk.T * scale, axis=-1)
        concat[:, i * dh : (i + 1) * dh] = a @ v
        g_o = g_concat[:, i * dh : (i + 1) * dh]
        g_a = g_o @ v.T
        g_vh = a.T @ g_o
        g_s = _softmax_vjp(a, g_a) * scale
        g_qh = g_s @ kk
        g_kh = g_s.T @ q
        g_q[i], g_k[i], g_v[i] = x.T @ g_qh, x.T @ g_kh, x.T @ g_vh
        g_x += g_qh @ w.w_q[i].T + g_kh @ w.w_k[i].T + g_vh @ w.w_v[i].T
    return g_x, MHAWeights(w_q=g_q, w_k=g_k, w_v=g_v, w_o=concat.T @ upstream)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, step: float = FD_STEP) -> Tensor:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


# ---------------------------------------------------------------- instance sampling


def sample_separable(rng: Rng, k: int, d: int, dtype=np.float64) -> tuple[Tensor, SepAttnWeights]:
    """Random instance whose ReLU pre-activations all sit >= KINK_GUARD from zero."""
    while True:
        x = rng.standard_normal((k, d))
        w = attn.init_separable(d, rng, np.float64)
        if np.min(np.abs(x @ w.w_v)) > KINK_GUARD:
            return x.astype(dtype), attn.astype(w, dtype)


def sample_mha(rng: Rng, k: int, d: int, h: int, dtype=np.float64) -> tuple[Tensor, MHAWeights]:
    x = rng.standard_normal((k, d)).astype(dtype)
    return x, attn.init_mha(d, h, rng, dtype)


def sample_linformer(rng: Rng, k: int, d: int, h: int, p: int, dtype=np.float64):
    x = rng.standard_normal((k, d)).astype(dtype)
    return x, attn.init_linformer(d, h, p, k, rng, dtype)


# ---------------------------------------------------------------- suites

SHAPE_CLASSES = [(k, d, h) for k in (1, 2, 5, 16) for d in (8, 12, 32) for h in (1, 2, 4)]


def oracle_check(kind: str, trials: int = 20, seed: int = 0, dtype=np.float32) -> CheckReport:
    """Optimised forward (in ``dtype``) vs the float64 loop oracle.

    Runs ``trials`` random instances for every (k, d, h) in ``SHAPE_CLASSES``.
    """
    rng = make_rng(seed)
    worst_rel = worst_abs = 0.0
    cases = [c for c in SHAPE_CLASSES for _ in range(trials)]
    for t, (k, d, h) in enumerate(cases):
        if kind == "mha":
            x, w = sample_mha(rng, k, d, h, dtype)
            got, ref = attn.mha_forward(x, w), oracle_mha(x, w)
        elif kind == "linformer":
            p = 1 + t % 6
            x, w = sample_linformer(rng, k, d, h, p, dtype)
            got, ref = attn.linformer_forward(x, w), oracle_linformer(x, w)
        elif kind == "separable":
            x, w = sample_separable(rng, k, d, dtype)
            got, ref = attn.separable_self_attention_forward(x, w), oracle_separable(x, w)
        else:
            raise ValueError(f"unknown attention kind {kind!r}")
        worst_rel = max(worst_rel, rel_err(got, ref))
        worst_abs = max(worst_abs, abs_err(got, ref))
    return CheckReport(f"oracle_{kind}", worst_rel, worst_abs, ORACLE_TOL)


def _loss(forward, x, w, g) -> float:
    return float(np.sum(g * forward(x, w)))


def _grad_errors(forward, backward, x, w, g) -> tuple[float, float]:
    g_x, g_w = backward(x, w, g)
    pairs = [(g_x, finite_diff_grad(lambda xx: _loss(forward, xx, w, g), x))]
    for f in dataclasses.fields(w):
        cur = getattr(w, f.name)
        num = finite_diff_grad(lambda p, n=f.name: _loss(forward, x, dataclasses.replace(w, **{n: p}), g), cur)
        pairs.append((getattr(g_w, f.name), num))
    return max(rel_err(a, b) for a, b in pairs), max(abs_err(a, b) for a, b in pairs)


def gradient_check(kind: str, trials: int = 10, seed: int = 0, k: int = 7, d: int = 12, h: int = 3) -> CheckReport:
    """Analytic backward vs central differences (float64, step FD_STEP)."""
    rng = make_rng(seed)
    worst_rel = worst_abs = 0.0
    for _ in range(trials):
        g = rng.standard_normal((k, d))
        if kind == "separable":
            x, w = sample_separable(rng, k, d)
            rel, ab = _grad_errors(attn.separable_self_attention_forward, sep_attn_backward, x, w, g)
        elif kind == "mha":
            x, w = sample_mha(rng, k, d, h)
            rel, ab = _grad_errors(attn.mha_forward, mha_backward, x, w, g)
        else:
            raise ValueError(f"no analytic backward for {kind!r}")
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
    return CheckReport(f"grad_{kind}", worst_rel, worst_abs, GRAD_TOL)


def check_permutation_equivariance(
    kind: str,
    trials: int = 10,
    seed: int = 0,
    k: int = 9,
    d: int = 16,
    h: int = 2,
    p: int = 4,
    permute_projections: bool = False,
    dtype=np.float32,
) -> CheckReport:
    """Max over trials of ``|f(P x) - P f(x)|_inf`` for random x, weights, P.

    Linformer's token projections are indexed by position, so it is only
    equivariant when ``permute_projections`` applies P to E and F as well.
    """
    rng = make_rng(seed)
    worst_rel = worst_abs = 0.0
    for _ in range(trials):
        x = rng.standard_normal((k, d)).astype(dtype)
        if kind == "mha":
            w = attn.init_mha(d, h, rng, dtype)
        elif kind == "linformer":
            w = attn.init_linformer(d, h, p, k, rng, dtype)
        elif kind == "separable":
            w = attn.init_separable(d, rng, dtype)
        else:
            raise ValueError(f"unknown attention kind {kind!r}")
        perm = rng.permutation(k)
        w_perm = w
        if kind == "linformer" and permute_projections:
            w_perm = dataclasses.replace(w, e_proj=w.e_proj[perm], f_proj=w.f_proj[perm])
        lhs = attn.attention_forward(kind, x[perm], w_perm)
        rhs = attn.attention_forward(kind, x, w)[perm]
        worst_abs = max(worst_abs, abs_err(lhs, rhs))
        worst_rel = max(worst_rel, rel_err(lhs, rhs))
    suffix = "_coperm" if permute_projections else ""
    return CheckReport(f"perm_equiv_{kind}{suffix}", worst_rel, worst_abs, EQUIV_TOL, metric="abs")


def run_all(seed: int = 0) -> list[CheckReport]:
    reports = [oracle_check(kind, seed=seed) for kind in attn.KINDS]
    reports += [gradient_check(kind, seed=seed) for kind in ("mha", "separable")]
    reports += [check_permutation_equivariance(kind, seed=seed) for kind in attn.KINDS]
    return reports
