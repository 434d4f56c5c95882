import numpy as np
import pytest

from oracles import layer_norm_two_pass, naive_attention
from trips.attention import (
    CrossAttnLayer,
    FfnBlock,
    LayerNorm,
    MhsaLayer,
    cross_attn_forward,
    ffn_block,
    mhsa_forward,
    random_cross_attn,
    random_ffn,
    random_mhsa,
    sa_block,
)
from trips.kernels import LinearLayer, gelu, layer_norm


def _pairs(layer: MhsaLayer):
    return [(w.weight, w.bias) for w in (layer.wq, layer.wk, layer.wv, layer.wo)]


def _zero_mhsa(d, heads=2):
    z = LinearLayer(np.zeros((d, d)))
    return MhsaLayer(z, z, z, z, heads)


class TestMhsa:
    def test_single_token(self, rng, np_rng):
        layer = random_mhsa(rng, 8, 2)
        x = np_rng.normal(size=(1, 8))
        y, maps = mhsa_forward(layer, x)
        expected = (x @ layer.wv.weight.T + layer.wv.bias) @ layer.wo.weight.T + layer.wo.bias
        assert np.allclose(y, expected, atol=1e-13)
        assert np.array_equal(maps, np.ones((2, 1, 1)))

    def test_identical_rows(self, rng, np_rng):
        x = np.tile(np_rng.normal(size=8), (5, 1))
        y, _ = mhsa_forward(random_mhsa(rng, 8, 4), x)
        assert np.allclose(y, y[0], atol=1e-13)

    def test_matches_naive_loop(self, rng, np_rng):
        layer = random_mhsa(rng, 8, 2)
        x = np_rng.normal(size=(6, 8))
        y, maps = mhsa_forward(layer, x)
        y_ref, maps_ref = naive_attention(*_pairs(layer), 2, x, x)
        assert np.max(np.abs(y - y_ref)) <= 1e-10
        assert np.max(np.abs(maps - maps_ref)) <= 1e-10

    def test_head_divisibility(self):
        z = LinearLayer(np.zeros((6, 6)))
        with pytest.raises(ValueError):
            MhsaLayer(z, z, z, z, heads=4)

    def test_projection_shape(self):
        z, bad = LinearLayer(np.zeros((4, 4))), LinearLayer(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            MhsaLayer(z, bad, z, z, heads=2)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            mhsa_forward(random_mhsa(rng, 8, 2), np.ones((3, 6)))


class TestSaBlock:
    def test_zero_attention_is_layer_norm(self, np_rng):
        x = np_rng.normal(size=(4, 6))
        v, _ = sa_block(_zero_mhsa(6), x)
        assert np.allclose(v, layer_norm(x, np.ones(6), np.zeros(6)), atol=1e-14)

    def test_two_step_oracle(self, rng, np_rng):
        layer = random_mhsa(rng, 8, 2, norm_jitter=0.2)
        x = np_rng.normal(size=(5, 8))
        y_ref, _ = naive_attention(*_pairs(layer), 2, x, x)
        ref = layer_norm_two_pass(y_ref + x, layer.norm.gamma, layer.norm.beta, layer.norm.eps)
        assert np.max(np.abs(sa_block(layer, x)[0] - ref)) <= 1e-10

    def test_shape_preserved(self, rng, np_rng):
        x = np_rng.normal(size=(7, 8))
        assert sa_block(random_mhsa(rng, 8, 2), x)[0].shape == (7, 8)

    def test_pre_norm_variant(self, rng, np_rng):
        layer = random_mhsa(rng, 8, 2, norm_jitter=0.2)
        x = np_rng.normal(size=(5, 8))
        y, _ = mhsa_forward(layer, layer.norm(x))
        assert np.allclose(sa_block(layer, x, norm_first=True)[0], y + x, atol=1e-14)


class TestFfn:
    def test_zero_weights_is_layer_norm(self, np_rng):
        ffn = FfnBlock(LinearLayer(np.zeros((24, 6))), LinearLayer(np.zeros((6, 24))))
        x = np_rng.normal(size=(3, 6))
        assert np.allclose(ffn_block(ffn, x), layer_norm(x, np.ones(6), np.zeros(6)), atol=1e-14)

    def test_step_by_step(self, rng, np_rng):
        ffn = random_ffn(rng, 8, norm_jitter=0.1)
        x = np_rng.normal(size=(4, 8))
        h = gelu(x @ ffn.w1.weight.T + ffn.w1.bias) @ ffn.w2.weight.T + ffn.w2.bias
        ref = layer_norm_two_pass(h + x, ffn.norm.gamma, ffn.norm.beta, ffn.norm.eps)
        assert np.max(np.abs(ffn_block(ffn, x) - ref)) <= 1e-10

    def test_rows_preserved(self, rng, np_rng):
        assert ffn_block(random_ffn(rng, 8), np_rng.normal(size=(9, 8))).shape == (9, 8)

    def test_expansion_enforced(self):
        with pytest.raises(ValueError):
            FfnBlock(LinearLayer(np.zeros((12, 6))), LinearLayer(np.zeros((6, 12))))


class TestCrossAttention:
    def test_single_kv_token(self, rng, np_rng):
        layer = random_cross_attn(rng, 8, 2)
        xq, xkv = np_rng.normal(size=(3, 8)), np_rng.normal(size=(1, 8))
        attn = layer.attn
        v = xkv @ attn.wv.weight.T + attn.wv.bias
        y = v @ attn.wo.weight.T + attn.wo.bias  # every query takes the one value
        ref = ffn_block(layer.ffn, layer_norm(y + xq, attn.norm.gamma, attn.norm.beta))
        assert np.allclose(cross_attn_forward(layer, xq, xkv), ref, atol=1e-12)

    def test_matches_naive(self, rng, np_rng):
        layer = random_cross_attn(rng, 8, 2, norm_jitter=0.2)
        xq, xkv = np_rng.normal(size=(3, 8)), np_rng.normal(size=(5, 8))
        y_ref, _ = naive_attention(*_pairs(layer.attn), 2, xq, xkv)
        h = layer_norm_two_pass(y_ref + xq, layer.attn.norm.gamma, layer.attn.norm.beta, 1e-6)
        assert np.max(np.abs(cross_attn_forward(layer, xq, xkv) - ffn_block(layer.ffn, h))) <= 1e-10

    def test_output_length(self, rng, np_rng):
        out = cross_attn_forward(random_cross_attn(rng, 8, 4), np_rng.normal(size=(4, 8)), np_rng.normal(size=(11, 8)))
        assert out.shape == (4, 8)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            CrossAttnLayer(random_mhsa(rng, 8, 2), random_ffn(rng, 4))

    def test_empty_keys(self, rng):
        with pytest.raises(ValueError):
            cross_attn_forward(random_cross_attn(rng, 8, 2), np.ones((2, 8)), np.ones((0, 8)))


def test_layer_norm_identity_default():
    ln = LayerNorm.identity(3)
    assert np.array_equal(ln.gamma, np.ones(3)) and np.array_equal(ln.beta, np.zeros(3))
