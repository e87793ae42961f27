from dataclasses import replace

import pytest

from tauflow.accounting import AccountingError, Layer, cost_report, count_params, estimate_flops, static_flops
from tauflow.config import ModelConfig, reduced
from tauflow.model import TauFlow


def test_single_conv_params():
    assert Layer("x", "conv", 48, 64, 1).params() == 3136


def test_single_conv_flops():
    assert Layer("x", "conv", 48, 64, 1, hw=56).flops() == 19_267_584


def test_depthwise_and_biasless_conv():
    assert Layer("x", "conv", 8, 8, 3, groups=8).params() == 8 * 9 + 8
    assert Layer("x", "conv", 8, 4, 1, bias=False).params() == 32


def test_unknown_layer_kind_rejected():
    bogus = Layer("x", "lstm", 4, 4)
    with pytest.raises(AccountingError, match="unsupported layer kind"):
        bogus.params()
    with pytest.raises(AccountingError, match="unsupported layer kind"):
        bogus.flops()


@pytest.mark.parametrize("base", [8, 16, 32])
def test_analytic_count_matches_runtime(base):
    cfg = reduced(base_channel=base, input_size=32)
    total, by_module = count_params(cfg)
    assert total == sum(by_module.values())
    assert total == TauFlow(cfg, seed=0).num_parameters()


def test_max_groups_changes_only_the_mask_head():
    small, large = ModelConfig(max_groups=5), ModelConfig(max_groups=7)
    t5, m5 = count_params(small)
    t7, m7 = count_params(large)
    # each extra group adds one output row of the 32-channel 1x1 mask conv, plus its bias
    assert t7 - t5 == 2 * (32 + 1)
    assert {k for k in m5 if m5[k] != m7[k]} == {"grouping"}
    assert TauFlow(reduced(8, 32, max_groups=7)).num_parameters() - \
        TauFlow(reduced(8, 32, max_groups=5)).num_parameters() == 66


def test_default_budget():
    total, _ = count_params(ModelConfig())
    assert total == 151_988
    assert total <= 500_000
    assert count_params(replace(ModelConfig(), base_channel=16))[0] < total


def test_count_is_pure():
    cfg = ModelConfig()
    assert count_params(cfg) == count_params(cfg)


@pytest.mark.parametrize("field,values", [("base_channel", [8, 16, 32, 48]), ("max_groups", [1, 3, 5, 7]),
                                          ("T", [1, 2, 4, 8])])
def test_monotone_in_config(field, values):
    base = ModelConfig(input_size=64)
    params, flops = [], []
    for v in values:
        cfg = replace(base, **{field: v})
        params.append(count_params(cfg)[0])
        flops.append(estimate_flops(cfg, min(cfg.max_groups, 1)))
    assert params == sorted(params)
    assert flops == sorted(flops)


def test_flops_increase_with_groups():
    report = cost_report(ModelConfig())
    series = [report.flops_dynamic(g) for g in range(1, 6)]
    assert all(a < b for a, b in zip(series, series[1:]))
    assert 1e9 <= report.flops_dynamic(5) <= 10e9


def test_static_cost_independent_of_groups():
    cfg = ModelConfig()
    static = static_flops(cfg)
    # the G-dependent remainder is the only thing that moves with G
    dynamic = [estimate_flops(cfg, g) - static for g in range(1, 6)]
    assert dynamic[0] > 0
    assert all(a < b for a, b in zip(dynamic, dynamic[1:]))
    assert static_flops(replace(cfg, T=4)) == static


def test_groups_outside_range_rejected():
    with pytest.raises(AccountingError, match="outside"):
        estimate_flops(ModelConfig(), 0)
    with pytest.raises(AccountingError, match="outside"):
        estimate_flops(ModelConfig(), 6)


def test_input_size_override():
    cfg = ModelConfig()
    assert estimate_flops(cfg, 2, input_size=112) < estimate_flops(cfg, 2)
    assert estimate_flops(cfg, 2, input_size=224) == estimate_flops(cfg, 2)


def test_report_dict_and_table():
    report = cost_report(reduced(8, 32))
    d = report.to_dict()
    assert d["params_total"] == report.params_total
    assert set(d["flops_dynamic"]) == {"1", "2", "3", "4", "5"}
    assert "total" in report.table()
