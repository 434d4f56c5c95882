import math

import numpy as np
import pytest

from oracles import partition_fuse, softmax_hp
from trips.attention import ffn_block, random_ffn, random_mhsa, sa_block
from trips.kernels import LinearLayer, softmax_rows
from trips.selection import (
    CLS,
    FUSED,
    TEXT,
    DegenerateGuidanceError,
    GuidanceMode,
    GuidanceSource,
    TokenSequence,
    image_cls_scores,
    multimodal_cls_scores,
    select_and_fuse,
    selection_layer_forward,
    td_att_scores,
)


def make_seq(tokens, grid=None):
    tokens = np.asarray(tokens, dtype=float)
    n = tokens.shape[0] - 1
    return TokenSequence(tokens, np.concatenate([[CLS], np.arange(n)]), grid or (1, max(n, 1)))


class TestTokenSequence:
    def test_requires_cls_first(self):
        with pytest.raises(ValueError):
            TokenSequence(np.ones((3, 2)), [0, CLS, 1], (1, 2))

    def test_single_cls(self):
        with pytest.raises(ValueError):
            TokenSequence(np.ones((3, 2)), [CLS, CLS, 0], (1, 2))

    def test_provenance_in_grid(self):
        with pytest.raises(ValueError):
            TokenSequence(np.ones((3, 2)), [CLS, 0, 4], (2, 2))

    def test_grid_coords(self):
        seq = TokenSequence(np.ones((4, 2)), [CLS, 5, FUSED, TEXT], (2, 3))
        assert seq.grid_coords(1) == (1, 2)
        assert seq.grid_coords(0) is None and seq.grid_coords(2) is None


class TestTdAtt:
    def test_identical_tokens_uniform(self, np_rng):
        v = np.vstack([np_rng.normal(size=4), np.tile(np_rng.normal(size=4), (5, 1))])
        s = td_att_scores(np_rng.normal(size=4), v, LinearLayer(np_rng.normal(size=(4, 4))))
        assert np.allclose(s, 0.2, atol=1e-15)

    def test_orthogonal_query_uniform(self, np_rng):
        v = np.zeros((4, 3))
        v[1:, :2] = np_rng.normal(size=(3, 2))
        t = np.array([0.0, 0.0, 1.0])  # identity wq keeps the query on the third axis
        s = td_att_scores(t, v, LinearLayer(np.eye(3)))
        assert np.allclose(s, 1 / 3, atol=1e-15)

    def test_loop_oracle(self, np_rng):
        d, n = 8, 10
        v, t = np_rng.normal(size=(n + 1, d)), np_rng.normal(size=d)
        w, b = np_rng.normal(size=(d, d)), np_rng.normal(size=d)
        q = [math.fsum(w[i, j] * t[j] for j in range(d)) + b[i] for i in range(d)]
        logits = [math.fsum(q[c] * v[r, c] for c in range(d)) / math.sqrt(d) for r in range(1, n + 1)]
        s = td_att_scores(t, v, LinearLayer(w, b))
        assert np.max(np.abs(s - softmax_hp(logits))) <= 1e-12

    def test_cls_excluded(self, np_rng):
        v, t = np_rng.normal(size=(6, 4)), np_rng.normal(size=4)
        w = LinearLayer(np.eye(4))
        v2 = v.copy()
        v2[0] = 100.0
        assert np.array_equal(td_att_scores(t, v, w), td_att_scores(t, v2, w))

    def test_key_projected(self, np_rng):
        v, t = np_rng.normal(size=(6, 4)), np_rng.normal(size=4)
        wq, wk = LinearLayer(np_rng.normal(size=(4, 4))), LinearLayer(np_rng.normal(size=(4, 4)))
        keys = v[1:] @ wk.weight.T + wk.bias
        ref = softmax_rows((keys @ (wq.weight @ t + wq.bias) / 2.0)[None, :])[0]
        assert np.allclose(td_att_scores(t, v, wq, wk), ref, atol=1e-14)

    def test_width_mismatch(self, np_rng):
        with pytest.raises(ValueError):
            td_att_scores(np.ones(3), np.ones((4, 4)), LinearLayer(np.eye(4)))


class TestImageCls:
    def test_single_head(self, np_rng):
        maps = softmax_rows(np_rng.normal(size=(1, 5, 5)))
        row = maps[0, 0, 1:]
        assert np.allclose(image_cls_scores(maps), row / row.sum(), atol=1e-15)

    def test_identical_heads(self, np_rng):
        one = softmax_rows(np_rng.normal(size=(1, 5, 5)))
        assert np.allclose(image_cls_scores(np.repeat(one, 3, axis=0)), image_cls_scores(one), atol=1e-15)

    def test_loop_oracle(self, np_rng):
        maps = softmax_rows(np_rng.normal(size=(4, 7, 7)))
        avg = [math.fsum(maps[h, 0, j] for h in range(4)) / 4 for j in range(1, 7)]
        total = math.fsum(avg)
        assert np.max(np.abs(image_cls_scores(maps) - np.array(avg) / total)) <= 1e-14


class TestMultimodalCls:
    def test_mass_on_text_only_is_degenerate(self):
        maps = np.zeros((2, 5, 5))
        maps[:, 0, 1:3] = 0.5
        with pytest.raises(DegenerateGuidanceError):
            multimodal_cls_scores(maps, [3, 4])

    def test_single_image_column(self, np_rng):
        maps = softmax_rows(np_rng.normal(size=(2, 4, 4)))
        assert multimodal_cls_scores(maps, [3]).tolist() == [1.0]

    def test_restriction_oracle(self, np_rng):
        maps = softmax_rows(np_rng.normal(size=(3, 8, 8)))
        cols = [4, 5, 6, 7]
        avg = np.array([maps[:, 0, c].mean() for c in cols])
        assert np.allclose(multimodal_cls_scores(maps, cols), avg / avg.sum(), atol=1e-15)


class TestSelectAndFuse:
    def test_uniform_half(self, np_rng):
        tokens = np_rng.normal(size=(5, 3))
        out, o = select_and_fuse(make_seq(tokens), np.full(4, 0.25), 0.5)
        assert o.k == 2 and o.kept_indices == [0, 1]
        assert np.allclose(out.tokens[-1], 0.25 * (tokens[3] + tokens[4]), atol=1e-15)
        assert out.provenance.tolist() == [CLS, 0, 1, FUSED]

    def test_hand_arithmetic(self, np_rng):
        tokens = np_rng.normal(size=(4, 3))
        out, o = select_and_fuse(make_seq(tokens), [0.7, 0.2, 0.1], 2 / 3)
        assert o.k == 2 and o.kept_indices == [0, 1]
        assert o.fused_mass == pytest.approx(0.1, abs=1e-15)
        assert np.allclose(out.tokens[-1], 0.1 * tokens[3], atol=1e-15)

    def test_partition_oracle(self, np_rng):
        tokens = np_rng.normal(size=(31, 6))
        scores = softmax_rows(np_rng.normal(size=(1, 30)))[0]
        out, o = select_and_fuse(make_seq(tokens), scores, 0.7)
        kept, kept_rows, fused, mass = partition_fuse(tokens[1:], scores, 0.7)
        assert o.kept_indices == kept
        assert np.max(np.abs(out.tokens[1:-1] - kept_rows)) <= 1e-12
        assert np.max(np.abs(out.tokens[-1] - fused)) <= 1e-12
        assert abs(o.fused_mass - mass) <= 1e-12

    def test_without_fusion(self, np_rng):
        out, o = select_and_fuse(make_seq(np_rng.normal(size=(7, 2))), np.full(6, 1 / 6), 0.5, fuse=False)
        assert len(out) == o.k + 1 and FUSED not in out.provenance

    def test_keep_all_appends_zero_token(self, np_rng):
        out, o = select_and_fuse(make_seq(np_rng.normal(size=(4, 2))), [0.5, 0.3, 0.2], 1.0)
        assert len(out) == 5 and np.array_equal(out.tokens[-1], np.zeros(2))
        assert o.fused_mass == 0.0 and o.dropped_indices == []
        assert o.tie_margin == math.inf

    def test_cls_untouched(self, np_rng):
        tokens = np_rng.normal(size=(6, 3))
        out, _ = select_and_fuse(make_seq(tokens), [0.1, 0.2, 0.3, 0.2, 0.2], 0.4)
        assert np.array_equal(out.tokens[0], tokens[0])

    def test_fixed_prefix(self, np_rng):
        tokens = np_rng.normal(size=(7, 3))
        seq = TokenSequence(tokens, [CLS, TEXT, TEXT, 0, 1, 2, 3], (2, 2))
        out, o = select_and_fuse(seq, [0.1, 0.4, 0.3, 0.2], 0.5, n_fixed=3)
        assert np.array_equal(out.tokens[:3], tokens[:3])
        assert o.kept_indices == [1, 2] and out.provenance.tolist() == [CLS, TEXT, TEXT, 1, 2, FUSED]

    @pytest.mark.parametrize("rate", [0.0, 1.01, -1.0])
    def test_rate_domain(self, rate):
        with pytest.raises(ValueError):
            select_and_fuse(make_seq(np.ones((4, 2))), [0.3, 0.3, 0.4], rate)

    def test_needs_two_candidates(self):
        with pytest.raises(ValueError):
            select_and_fuse(make_seq(np.ones((2, 2))), [1.0], 0.5)

    def test_score_length(self):
        with pytest.raises(ValueError):
            select_and_fuse(make_seq(np.ones((4, 2))), [0.5, 0.5], 0.5)

    def test_tie_margin(self):
        _, o = select_and_fuse(make_seq(np.ones((5, 2))), [0.4, 0.1, 0.3, 0.2], 0.5)
        assert o.tie_margin == pytest.approx(0.1)


class TestSelectionLayer:
    def _setup(self, rng, np_rng, n=9, d=8):
        return random_mhsa(rng, d, 2), random_ffn(rng, d), make_seq(np_rng.normal(size=(n + 1, d))), np_rng.normal(size=d)

    def test_keep_all_without_fusion_is_plain_layer(self, rng, np_rng):
        mhsa, ffn, seq, g = self._setup(rng, np_rng)
        out, o, _ = selection_layer_forward(mhsa, ffn, seq, g, 1.0, GuidanceMode(disable_fusion=True))
        plain = ffn_block(ffn, sa_block(mhsa, seq.tokens)[0])
        assert np.array_equal(out.tokens, plain)

    def test_keep_all_with_fusion_zero_token(self, rng, np_rng):
        mhsa, ffn, seq, g = self._setup(rng, np_rng)
        out, o, _ = selection_layer_forward(mhsa, ffn, seq, g, 1.0)
        v, _ = sa_block(mhsa, seq.tokens)
        ref = ffn_block(ffn, np.vstack([v, np.zeros(8)]))
        assert np.allclose(out.tokens, ref, atol=1e-14) and len(out) == len(seq) + 1

    @pytest.mark.parametrize(
        "mode",
        [GuidanceMode(), GuidanceMode(GuidanceSource.IMAGE_CLS), GuidanceMode(disable_td_att=True), GuidanceMode(key_projected=True)],
    )
    def test_composed_oracle(self, rng, np_rng, mode):
        mhsa, ffn, seq, g = self._setup(rng, np_rng)
        out, o, maps = selection_layer_forward(mhsa, ffn, seq, g, 0.6, mode)
        v, maps_ref = sa_block(mhsa, seq.tokens)
        if mode.needs_guidance_vector:
            scores = td_att_scores(g, v, mhsa.wq, mhsa.wk if mode.key_projected else None)
        else:
            scores = image_cls_scores(maps_ref)
        kept, kept_rows, fused, _ = partition_fuse(v[1:], scores, 0.6)
        ref = ffn_block(ffn, np.vstack([v[:1], kept_rows, fused]))
        assert o.kept_indices == kept
        assert np.max(np.abs(out.tokens - ref)) <= 1e-12

    def test_text_mode_needs_guidance(self, rng, np_rng):
        mhsa, ffn, seq, _ = self._setup(rng, np_rng)
        with pytest.raises(ValueError):
            selection_layer_forward(mhsa, ffn, seq, None, 0.5)


class TestGuidanceMode:
    def test_flag_validation(self):
        with pytest.raises(ValueError):
            GuidanceMode(GuidanceSource.IMAGE_CLS, disable_td_att=True)
        with pytest.raises(ValueError):
            GuidanceMode(GuidanceSource.MULTIMODAL_CLS, key_projected=True)

    def test_string_source(self):
        assert GuidanceMode("image-cls").source is GuidanceSource.IMAGE_CLS

    def test_needs_guidance(self):
        assert GuidanceMode().needs_guidance_vector
        assert not GuidanceMode(disable_td_att=True).needs_guidance_vector
        assert not GuidanceMode(GuidanceSource.IMAGE_CLS).needs_guidance_vector
