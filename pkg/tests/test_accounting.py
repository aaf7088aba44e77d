import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupbert_kit.accounting import (Phase, PipelinePlan, TrainingSchedule, count_flops, count_params,
                                      flop_breakdown, global_batch, grouped_linear_flops, layer_flops,
                                      matmul_flops, module_flops, phase_flops, solve_accumulation,
                                      training_flops)
from groupbert_kit.config import bundled_names, load_config
from groupbert_kit.model import ModelConfig, parameter_specs

SIZES = {"small": (4, 512, 8), "medium": (8, 512, 8), "base": (12, 768, 12), "large": (24, 1024, 16)}
BERT = ModelConfig(family="bert")
GROUPBERT = ModelConfig(family="groupbert")
SCHEDULE = TrainingSchedule.two_phase(480)


def matmul_only_forward(cfg: ModelConfig, L: int) -> int:
    """Independent count of MAC-bearing work only (2 FLOPs/MAC); no pointwise terms."""
    d, V = cfg.hidden, cfg.vocab_size
    per = {"mha": 2 * (4 * L * d * d + 2 * L * L * d),
           "ffn": 2 * (8 * L * d * d),
           "gffn": 2 * (4 * L * d * d + L * 4 * d * d // cfg.ffn_groups + L * d * d),
           "conv": 2 * (3 * L * d * d + L * cfg.conv_kernel * cfg.conv_group_size * d)}
    body = cfg.layers * sum(per[k] for k in cfg.layer_modules)
    return body + 2 * (L * d * d + L * d * V) + 2 * (d * d + 2 * d)


def test_matmul_convention():
    assert matmul_flops(3, 4, 5) == 120


def test_grouped_linear_is_quarter_at_four_groups():
    assert grouped_linear_flops(128, 3072, 768, 4) * 4 == matmul_flops(128, 3072, 768)


def test_forward_ratio_at_128():
    ratio = count_flops(GROUPBERT, 128) / count_flops(BERT, 128)
    assert 1.35 <= ratio <= 1.55
    assert ratio == pytest.approx(1.456, abs=5e-4)


def test_forward_ratio_against_matmul_only_oracle():
    oracle = matmul_only_forward(GROUPBERT, 128) / matmul_only_forward(BERT, 128)
    ours = count_flops(GROUPBERT, 128) / count_flops(BERT, 128)
    assert abs(oracle - ours) < 0.01


def test_pointwise_terms_are_small():
    for cfg in (BERT, GROUPBERT):
        mm = matmul_only_forward(cfg, 128)
        assert 0 < count_flops(cfg, 128) - mm < 0.03 * mm


def test_single_step_training_is_three_forwards():
    sched = TrainingSchedule((Phase(64, 1, 1),))
    assert training_flops(BERT, sched) == 3 * count_flops(BERT, 64)


def test_bert_base_training_total():
    total = training_flops(BERT, SCHEDULE)
    assert abs(total - 6.1e19) <= 0.2 * 6.1e19
    assert total == pytest.approx(5.869e19, rel=1e-3)


def test_training_ratio():
    ratio = training_flops(GROUPBERT, SCHEDULE) / training_flops(BERT, SCHEDULE)
    assert abs(ratio - 1.44) <= 0.05 * 1.44
    assert ratio == pytest.approx(1.4476, abs=5e-4)


def test_per_layer_ratio_is_reported_separately():
    assert layer_flops(GROUPBERT, 128) / layer_flops(BERT, 128) == pytest.approx(1.581, abs=1e-3)


def test_phase_subtotals_sum_to_total():
    assert sum(phase_flops(GROUPBERT, SCHEDULE)) == training_flops(GROUPBERT, SCHEDULE)


@pytest.mark.parametrize("size", list(SIZES))
@pytest.mark.parametrize("family", ["bert", "groupbert"])
def test_closed_form_matches_builder(family, size):
    layers, hidden, heads = SIZES[size]
    cfg = ModelConfig(family=family, layers=layers, hidden=hidden, heads=heads)
    assert count_params(cfg).total_params == sum(math.prod(s) for _, s, _ in parameter_specs(cfg))


@pytest.mark.parametrize("name", bundled_names())
def test_bundled_configs_reconcile(name):
    cfg = load_config(name).model
    report = count_params(cfg)
    assert report.total_params == sum(report.params.values())
    assert report.total_params == sum(math.prod(s) for _, s, _ in parameter_specs(cfg))


@pytest.mark.parametrize("modules, expected", [
    (("mha", "conv", "ffn"), 132.4e6),
    (("mha", "gffn", "gffn"), 138.5e6),
    (("mha", "gffn", "conv", "gffn"), 160.8e6),
])
def test_ablation_rows(modules, expected):
    cfg = BERT.replace(layer_modules=modules)
    assert abs(count_params(cfg).total_params - expected) <= 0.15e6


def test_counts_are_non_negative_integers():
    report = count_params(GROUPBERT)
    assert all(isinstance(v, int) and v >= 0 for v in report.params.values())
    assert all(isinstance(v, int) and v >= 0 for v in flop_breakdown(GROUPBERT, 128).values())


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 255), layers=st.integers(0, 6), d_mult=st.integers(1, 4), family=st.sampled_from(["bert", "groupbert"]))
def test_flops_monotone(L, layers, d_mult, family):
    cfg = ModelConfig(family=family, layers=layers, hidden=64 * d_mult, heads=4, vocab_size=100, max_positions=256)
    base = count_flops(cfg, L)
    assert count_flops(cfg, L + 1) > base
    assert count_flops(cfg.replace(layers=layers + 1), L) > base
    assert count_flops(cfg.replace(hidden=64 * (d_mult + 1)), L) > base


def test_module_flops_rejects_unknown_kind():
    with pytest.raises(ValueError):
        module_flops("lstm", BERT, 8)


def test_sequence_length_bounds():
    with pytest.raises(ValueError):
        count_flops(BERT, 513)


# ---------------------------------------------------------------------------
# pipeline


def test_global_batch_examples():
    assert global_batch(PipelinePlan(2, 64, 4, 1)) == 512
    assert global_batch(PipelinePlan(1, 1, 1, 1)) == 1


def test_solve_accumulation():
    plan = solve_accumulation(480, 2, 4, 1)
    assert plan.accumulation_factor == 60 and global_batch(plan) == 480
    with pytest.raises(ValueError, match="not a multiple"):
        solve_accumulation(481, 2, 4, 1)


@settings(max_examples=50, deadline=None)
@given(r=st.integers(1, 8), a=st.integers(1, 100), p=st.integers(1, 8), c=st.integers(1, 8))
def test_solve_inverts_global_batch(r, a, p, c):
    plan = PipelinePlan(r, a, p, c)
    assert global_batch(plan) == r * a * p * c
    assert solve_accumulation(global_batch(plan), r, p, c) == plan


def test_plan_rejects_non_positive():
    with pytest.raises(ValueError):
        PipelinePlan(0, 1, 1, 1)


def test_schedule_round_trip():
    assert TrainingSchedule.from_list(SCHEDULE.to_list()) == SCHEDULE
    with pytest.raises(ValueError):
        TrainingSchedule(())
