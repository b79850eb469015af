import dataclasses
import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepattn import attention as attn
from sepattn.errors import ConfigurationError, DimensionError
from sepattn.tensor import LayerNormParams, layernorm, make_rng, swish
from sepattn.verify import oracle_linformer, oracle_mha, oracle_separable


def rand(shape, seed=0, dtype=np.float32):
    return make_rng(seed).standard_normal(shape).astype(dtype)


class TestWeights:
    def test_mha_head_dim(self):
        w = attn.init_mha(12, 3, make_rng(0))
        assert (w.h, w.d, w.d_h) == (3, 12, 4)

    def test_mha_rejects_indivisible_heads(self):
        with pytest.raises(ConfigurationError):
            attn.init_mha(10, 3, make_rng(0))

    def test_linformer_projection_rows(self):
        w = attn.init_linformer(8, 2, 3, 20, make_rng(0))
        assert (w.k_max, w.p) == (20, 3)
        assert w.e_proj.shape == w.f_proj.shape == (20, 3)

    def test_ffn_expansion_is_two(self):
        w = attn.init_ffn(6, make_rng(0))
        assert w.w1.shape == (6, 12) and w.w2.shape == (12, 6)
        with pytest.raises(ConfigurationError):
            attn.FfnWeights(w1=np.zeros((6, 18)), b1=np.zeros(18), w2=np.zeros((18, 6)), b2=np.zeros(6))

    def test_non_finite_weights_rejected(self):
        w = attn.init_separable(4, make_rng(0))
        bad = w.w_k.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ConfigurationError):
            dataclasses.replace(w, w_k=bad)

    def test_block_dims_must_agree(self):
        blk = attn.init_transformer_block("separable", 8, make_rng(0))
        with pytest.raises(ConfigurationError):
            dataclasses.replace(blk, norm1=LayerNormParams.identity(6))


class TestMHA:
    def test_single_token(self):
        x = rand((1, 8))
        w = attn.init_mha(8, 2, make_rng(1))
        y, a = attn.mha_forward(x, w, return_attention=True)
        np.testing.assert_array_equal(a, np.ones((2, 1, 1)))
        v = np.concatenate([x @ w.w_v[i] for i in range(2)], axis=1)
        np.testing.assert_allclose(y, v @ w.w_o, rtol=1e-5, atol=1e-6)

    def test_zero_query_key_gives_uniform_rows(self):
        x = rand((5, 8), 2)
        w = attn.init_mha(8, 2, make_rng(2))
        w = dataclasses.replace(w, w_q=np.zeros_like(w.w_q), w_k=np.zeros_like(w.w_k))
        y, a = attn.mha_forward(x, w, return_attention=True)
        np.testing.assert_allclose(a, 1 / 5, atol=1e-7)
        pooled = np.concatenate([(x @ w.w_v[i]).mean(axis=0) for i in range(2)])
        np.testing.assert_allclose(y, np.tile(pooled @ w.w_o, (5, 1)), atol=1e-6)

    def test_against_loop_oracle(self):
        x = rand((5, 8), 3)
        w = attn.init_mha(8, 2, make_rng(3))
        assert np.max(np.abs(attn.mha_forward(x, w) - oracle_mha(x, w))) < 1e-5

    def test_attention_rows_sum_to_one(self):
        _, a = attn.mha_forward(rand((9, 16), 4) * 5, attn.init_mha(16, 4, make_rng(4)), return_attention=True)
        assert np.max(np.abs(a.sum(axis=-1) - 1)) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            attn.mha_forward(rand((3, 6)), attn.init_mha(8, 2, make_rng(0)))


class TestLinformer:
    def test_identity_projection_collapses_to_mha(self):
        k = 6
        x = rand((k, 8), 5)
        w = attn.init_linformer(8, 2, k, k, make_rng(5))
        w = dataclasses.replace(w, e_proj=np.eye(k, dtype=np.float32), f_proj=np.eye(k, dtype=np.float32))
        assert np.max(np.abs(attn.linformer_forward(x, w) - attn.mha_forward(x, w.base))) < 1e-5

    def test_single_token_single_projection(self):
        x = rand((1, 8), 6)
        w = attn.init_linformer(8, 2, 1, 1, make_rng(6))
        w = dataclasses.replace(w, e_proj=np.ones((1, 1), np.float32), f_proj=np.ones((1, 1), np.float32))
        np.testing.assert_allclose(attn.linformer_forward(x, w), attn.mha_forward(x, w.base), atol=1e-6)

    def test_against_loop_oracle(self):
        x = rand((8, 8), 7)
        w = attn.init_linformer(8, 2, 4, 8, make_rng(7))
        assert np.max(np.abs(attn.linformer_forward(x, w) - oracle_linformer(x, w))) < 1e-5

    def test_uses_leading_projection_rows(self):
        w = attn.init_linformer(8, 2, 3, 12, make_rng(8))
        x = rand((5, 8), 8)
        trimmed = dataclasses.replace(w, e_proj=w.e_proj[:5], f_proj=w.f_proj[:5])
        np.testing.assert_array_equal(attn.linformer_forward(x, w), attn.linformer_forward(x, trimmed))

    def test_attention_shape(self):
        _, a = attn.linformer_forward(rand((7, 8)), attn.init_linformer(8, 4, 3, 7, make_rng(0)), return_attention=True)
        assert a.shape == (4, 7, 3)

    def test_too_many_tokens(self):
        with pytest.raises(ConfigurationError):
            attn.linformer_forward(rand((9, 8)), attn.init_linformer(8, 2, 4, 8, make_rng(0)))


class TestContext:
    def test_identical_rows_give_uniform_scores(self):
        x = np.tile(rand((1, 5)), (4, 1))
        np.testing.assert_allclose(attn.context_scores(x, rand((5,), 1)), 0.25, atol=1e-7)

    def test_single_token_score(self):
        np.testing.assert_array_equal(attn.context_scores(rand((1, 5)), rand((5,), 1)), [1.0])

    def test_scores_against_float64(self):
        x, wi = rand((6, 4), 2), rand((4,), 3)
        z = [sum(float(x[i, t]) * float(wi[t]) for t in range(4)) for i in range(6)]
        e = [math.exp(v - max(z)) for v in z]
        ref = [v / sum(e) for v in e]
        assert np.max(np.abs(attn.context_scores(x, wi) - ref)) < 1e-7

    def test_vector_uniform_is_mean(self):
        xk = rand((4, 3))
        np.testing.assert_allclose(attn.context_vector(np.full(4, 0.25, np.float32), xk), xk.mean(axis=0), atol=1e-7)

    def test_vector_one_hot_selects_row(self):
        xk = rand((4, 3))
        np.testing.assert_array_equal(attn.context_vector(np.eye(4, dtype=np.float32)[2], xk), xk[2])

    def test_vector_against_loop(self):
        c, xk = rand((5,), 1), rand((5, 3), 2)
        ref = [sum(float(c[i]) * float(xk[i, j]) for i in range(5)) for j in range(3)]
        assert np.max(np.abs(attn.context_vector(c, xk) - ref)) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            attn.context_vector(np.ones(3), np.ones((4, 2)))
        with pytest.raises(DimensionError):
            attn.context_scores(np.ones((4, 2)), np.ones(3))


class TestSeparable:
    def test_single_token_closed_form(self):
        x = rand((1, 8), 1)
        w = attn.init_separable(8, make_rng(1))
        ref = ((x @ w.w_k) * np.maximum(x @ w.w_v, 0)) @ w.w_o
        np.testing.assert_allclose(attn.separable_self_attention_forward(x, w), ref, rtol=1e-6, atol=1e-7)

    def test_zero_value_weights_annihilate(self):
        w = attn.init_separable(8, make_rng(2))
        w = dataclasses.replace(w, w_v=np.zeros_like(w.w_v))
        np.testing.assert_array_equal(attn.separable_self_attention_forward(rand((5, 8)), w), 0.0)

    def test_against_loop_oracle(self):
        x = rand((16, 32), 3)
        w = attn.init_separable(32, make_rng(3))
        assert np.max(np.abs(attn.separable_self_attention_forward(x, w) - oracle_separable(x, w))) < 1e-5

    def test_scores_returned(self):
        y, c_s = attn.separable_self_attention_forward(rand((7, 8)), attn.init_separable(8, make_rng(0)), return_scores=True)
        assert y.shape == (7, 8) and c_s.shape == (7,)
        assert abs(float(c_s.sum()) - 1) < 1e-6

    def test_no_quadratic_buffer(self):
        k, d = 4096, 16
        x = rand((k, d))
        w = attn.init_separable(d, make_rng(0))
        attn.separable_self_attention_forward(x, w)
        tracemalloc.start()
        try:
            attn.separable_self_attention_forward(x, w)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        # a k x k float32 buffer alone would be 64 MiB
        assert peak < 16 * k * d * 4
        assert peak < k * k * 4 / 16

    def test_batched_matches_per_sequence(self):
        x = rand((3, 5, 8), 4)
        w = attn.init_separable(8, make_rng(4))
        y = attn.separable_self_attention_forward(x, w)
        for b in range(3):
            np.testing.assert_allclose(y[b], attn.separable_self_attention_forward(x[b], w), rtol=1e-6, atol=1e-7)


class TestPatched:
    def test_single_pixel_position(self):
        w = attn.init_separable(8, make_rng(5))
        x_u = rand((8, 1, 6), 5)
        y, c_s = attn.separable_self_attention_patched(x_u, w)
        ref, ref_s = attn.separable_self_attention_forward(x_u[:, 0, :].T, w, return_scores=True)
        np.testing.assert_allclose(y[:, 0, :].T, ref, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(c_s[0], ref_s, atol=1e-7)

    def test_each_pixel_independent(self):
        w = attn.init_separable(8, make_rng(6))
        x_u = rand((8, 4, 5), 6)
        y, c_s = attn.separable_self_attention_patched(x_u, w)
        assert y.shape == (8, 4, 5) and c_s.shape == (4, 5)
        np.testing.assert_allclose(c_s.sum(axis=1), 1.0, atol=1e-6)
        for m in range(4):
            ref = attn.separable_self_attention_forward(x_u[:, m, :].T, w)
            np.testing.assert_allclose(y[:, m, :].T, ref, rtol=1e-5, atol=1e-6)

    def test_wrong_layout(self):
        with pytest.raises(DimensionError):
            attn.separable_self_attention_patched(rand((4, 2, 2)), attn.init_separable(8, make_rng(0)))


class TestBlock:
    @pytest.mark.parametrize("kind", attn.KINDS)
    def test_pre_norm_composition(self, kind):
        x = rand((6, 8), 7)
        blk = attn.init_transformer_block(kind, 8, make_rng(7), h=2, p=3, k_max=6)
        blk = dataclasses.replace(
            blk, ffn=dataclasses.replace(blk.ffn, b1=rand((16,), 8), b2=rand((8,), 9)),
        )
        y1 = x + attn.attention_forward(kind, layernorm(x, blk.norm1), blk.attn)
        f = blk.ffn
        ref = y1 + swish(layernorm(y1, blk.norm2) @ f.w1 + f.b1) @ f.w2 + f.b2
        np.testing.assert_allclose(attn.transformer_block_forward(x, blk, kind), ref, rtol=1e-6, atol=1e-6)

    def test_scores_only_for_separable(self):
        blk = attn.init_transformer_block("mha", 8, make_rng(0), h=2)
        with pytest.raises(ConfigurationError):
            attn.transformer_block_forward(rand((3, 8)), blk, "mha", return_scores=True)

    def test_kind_mismatch(self):
        blk = attn.init_transformer_block("separable", 8, make_rng(0))
        with pytest.raises(ConfigurationError):
            attn.transformer_block_forward(rand((3, 8)), blk, "mha")
        with pytest.raises(ConfigurationError):
            attn.attention_forward("mha", rand((3, 8)), blk.attn)
        with pytest.raises(ConfigurationError):
            attn.init_transformer_block("performer", 8, make_rng(0))


class TestMacs:
    def test_closed_forms(self):
        k, d, h, p = 100, 64, 8, 16
        assert attn.attention_macs("mha", k, d, h) == 4 * k * d * d + 2 * k * k * d
        assert attn.attention_macs("linformer", k, d, h, p) == 4 * k * d * d + 4 * k * p * d
        assert attn.attention_macs("separable", k, d) == 3 * k * d * d + 3 * k * d
        assert attn.ffn_macs(k, d) == 4 * k * d * d

    def test_separable_is_linear_in_tokens(self):
        assert attn.attention_macs("separable", 2048, 64) == 2 * attn.attention_macs("separable", 1024, 64)

    def test_token_mixing_ratio_grows_linearly(self):
        r = lambda k: attn.token_mixing_macs("mha", k, 512, 8) / attn.token_mixing_macs("separable", k, 512)  # noqa: E731
        assert 15.5 <= r(4096) / r(256) <= 16.5

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            attn.mac_breakdown("performer", 4, 4)


shapes = st.tuples(st.integers(1, 12), st.sampled_from([4, 8, 12]), st.sampled_from([1, 2, 4]))


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_mha_and_separable_are_permutation_equivariant(shape, seed):
    k, d, h = shape
    rng = make_rng(seed)
    x = rng.standard_normal((k, d)).astype(np.float32)
    perm = rng.permutation(k)
    for kind, w in (("mha", attn.init_mha(d, h, rng)), ("separable", attn.init_separable(d, rng))):
        y = attn.attention_forward(kind, x, w)
        assert y.shape == (k, d)
        assert np.max(np.abs(attn.attention_forward(kind, x[perm], w) - y[perm])) < 1e-5


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(1, 6), st.integers(0, 2**31))
def test_linformer_equivariant_when_projections_follow_tokens(shape, p, seed):
    k, d, h = shape
    rng = make_rng(seed)
    x = rng.standard_normal((k, d)).astype(np.float32)
    w = attn.init_linformer(d, h, p, k, rng)
    perm = rng.permutation(k)
    w_perm = dataclasses.replace(w, e_proj=w.e_proj[perm], f_proj=w.f_proj[perm])
    assert np.max(np.abs(attn.linformer_forward(x[perm], w_perm) - attn.linformer_forward(x, w)[perm])) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.sampled_from([4, 8, 16]), st.floats(0.1, 20), st.integers(0, 2**31))
def test_context_scores_sum_to_one(k, d, scale, seed):
    rng = make_rng(seed)
    c_s = attn.context_scores((rng.standard_normal((k, d)) * scale).astype(np.float32), rng.standard_normal(d).astype(np.float32))
    assert abs(float(c_s.sum(dtype=np.float64)) - 1) < 1e-6
    assert np.all(c_s >= 0)
