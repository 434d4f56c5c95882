import json

import pytest

from oracles import cross_macs_terms, encoder_macs_terms, schedule_oracle
from trips.backbone import ConfigError, SelectionConfig
from trips.cost import (
    LOCATION_SWEEP,
    RESOLUTION_SWEEP,
    CostConfig,
    FlopsConvention,
    SweepRow,
    cross_layer_flops,
    encoder_layer_flops,
    model_flops,
    overall_keep_rate,
    speedup_estimate,
    sweep,
    token_schedule,
)


class TestTokenSchedule:
    def test_577(self):
        assert token_schedule(577, SelectionConfig.uniform((5, 10), 0.7)) == [577] * 4 + [405] * 5 + [284] * 3

    def test_197(self):
        assert token_schedule(197, SelectionConfig.uniform((5, 10), 0.7)) == [197] * 4 + [139] * 5 + [98] * 3

    def test_empty(self):
        assert token_schedule(577, SelectionConfig()) == [577] * 12

    def test_oracle(self):
        sel = SelectionConfig((1, 3, 12), (0.9, 0.33, 0.5))
        assert token_schedule(577, sel) == schedule_oracle(577, (1, 3, 12), (0.9, 0.33, 0.5))

    def test_too_deep(self):
        with pytest.raises(ConfigError):
            token_schedule(577, SelectionConfig.uniform((13,), 0.5))

    def test_too_few_candidates(self):
        with pytest.raises(ConfigError):
            token_schedule(2, SelectionConfig.uniform((1,), 0.5))


class TestKeepRate:
    @pytest.mark.parametrize(
        "rates,pct", [([0.5], 50), ([0.5, 0.5], 25), ([0.7, 0.7], 49), ([0.7, 0.7, 0.7], 34), ([], 100)]
    )
    def test_values(self, rates, pct):
        assert overall_keep_rate(rates) == pct

    def test_half_rounds_up(self):
        assert overall_keep_rate([0.125, 0.5, 0.5, 0.5]) == 2  # 1.5625% -> 2
        assert overall_keep_rate([0.005]) == 1  # exactly 0.5% rounds up


class TestLayerFlops:
    def test_n_equals_one(self):
        d = 768
        assert encoder_layer_flops(1, d, 4) == 4 * d * d + 2 * d + 2 * 4 * d * d

    def test_vit_b_at_197(self):
        assert encoder_layer_flops(197, 768, 4) == encoder_macs_terms(197, 768, 4)
        assert encoder_layer_flops(197, 768, 4) / 1e9 == pytest.approx(1.454, abs=1e-3)
        assert 12 * encoder_layer_flops(197, 768, 4) / 1e9 == pytest.approx(17.5, abs=0.1)

    def test_doubling(self):
        assert encoder_layer_flops(50, 64, 4, FlopsConvention.TWO_PER_MAC) == 2 * encoder_layer_flops(50, 64, 4)
        assert cross_layer_flops(40, 9, 64, 4, FlopsConvention.TWO_PER_MAC) == 2 * cross_layer_flops(40, 9, 64, 4)

    def test_cross_needs_keys(self):
        with pytest.raises(ValueError):
            cross_layer_flops(40, 0, 768)

    def test_cross_equal_lengths_closed_form(self):
        n, d, m = 40, 768, 4
        assert cross_layer_flops(n, n, d, m) == 8 * n * d * d + 4 * n * n * d + 2 * m * n * d * d

    @pytest.mark.parametrize("nq,nk,d,m", [(3, 7, 16, 4), (40, 284, 768, 4), (1, 1, 8, 2), (17, 5, 32, 3)])
    def test_cross_terms(self, nq, nk, d, m):
        assert cross_layer_flops(nq, nk, d, m) == cross_macs_terms(nq, nk, d, m)


class TestModelFlops:
    def test_parts_sum(self):
        r = model_flops(CostConfig(selection=SelectionConfig.uniform((5, 10), 0.7)))
        assert r.total == r.vision + r.text + r.fusion
        assert r.keep_rate == 49 and r.lengths == [577] * 4 + [405] * 5 + [284] * 3

    def test_selection_layer_split(self):
        sel = SelectionConfig.uniform((1,), 0.5)
        cfg = CostConfig(vision_layers=1, text_layers=0, fusion_layers=0, n_tokens=11, width=8, selection=sel)
        # SA at 11 tokens, FFN at 5 + 2 = 7
        sa = 4 * 11 * 64 + 2 * 121 * 8
        ffn = 2 * 4 * 7 * 64
        assert model_flops(cfg).vision == sa + ffn

    def test_fusion_uses_final_length(self):
        cfg = CostConfig(selection=SelectionConfig.uniform((5, 10), 0.7))
        assert model_flops(cfg).fusion == 6 * cross_layer_flops(40, 284, 768, 4)

    def test_ratio_convention_invariant(self):
        sel = SelectionConfig.uniform((4, 8), 0.5)
        mac = CostConfig(selection=sel)
        two = CostConfig(selection=sel, convention=FlopsConvention.TWO_PER_MAC)
        base_mac, base_two = model_flops(CostConfig()), model_flops(CostConfig(convention=FlopsConvention.TWO_PER_MAC))
        assert model_flops(mac).ratio_to(base_mac) == model_flops(two).ratio_to(base_two)

    def test_speedup_estimate(self):
        a = model_flops(CostConfig(selection=SelectionConfig.uniform((2,), 0.5)))
        b = model_flops(CostConfig())
        assert speedup_estimate(a, a) == 1.0
        assert speedup_estimate(a, b) == pytest.approx(1 / speedup_estimate(b, a), rel=1e-15)
        assert speedup_estimate(a, b) == a.total / b.total

    def test_mixed_conventions_rejected(self):
        a = model_flops(CostConfig())
        b = model_flops(CostConfig(convention=FlopsConvention.TWO_PER_MAC))
        with pytest.raises(ValueError):
            speedup_estimate(a, b)

    def test_as_dict_is_json(self):
        d = model_flops(CostConfig()).as_dict()
        assert json.loads(json.dumps(d))["convention"] == "mac"

    def test_for_image(self):
        assert CostConfig.for_image(224).n_tokens == 197


class TestSweep:
    def test_keep_rate_column(self):
        assert [r.report.keep_rate for r in sweep(LOCATION_SWEEP)] == [50, 50, 25, 25, 25, 25, 49, 49, 49, 49, 34, 34, 34]

    def test_resolution_monotone(self):
        totals = [r.report.total for r in sweep(RESOLUTION_SWEEP)]
        assert all(a < b for a, b in zip(totals, totals[1:]))

    def test_tuple_rows(self):
        (res,) = sweep([((5, 10), (0.7, 0.7), 384)])
        assert res.row == SweepRow((5, 10), (0.7, 0.7), 384)

    def test_bad_resolution(self):
        with pytest.raises(ConfigError):
            sweep([((5,), (0.5,), 100)])
