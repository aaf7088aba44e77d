import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupbert_kit.analysis import (AttentionMap, average_attention_maps, collect_attention, entropy_report,
                                    heatmap_pixels, model_entropy, pgm_bytes, positional_entropy, read_pgm,
                                    write_heatmaps)
from groupbert_kit.data import synthetic_corpus
from groupbert_kit.model import ModelConfig, build_model

TOY = ModelConfig(family="groupbert", layers=2, hidden=32, heads=2, ffn_groups=2, conv_group_size=8,
                  vocab_size=40, max_positions=32, init_std=0.2)


@pytest.mark.parametrize("L", range(2, 65))
def test_uniform_and_one_hot_extremes(L):
    assert positional_entropy(np.full((L, L), 1.0 / L)) == 1.0
    perm = np.eye(L)[np.random.default_rng(L).permutation(L)]
    assert positional_entropy(perm) == 0.0


def test_length_one_rejected():
    with pytest.raises(ValueError):
        positional_entropy(np.ones((1, 1)))


def test_non_stochastic_map_rejected():
    with pytest.raises(ValueError):
        positional_entropy(np.full((3, 3), 0.9))


@settings(max_examples=40, deadline=None)
@given(L=st.integers(2, 12), seed=st.integers(0, 10_000))
def test_entropy_permutation_invariant_and_bounded(L, seed):
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.ones(L) * 0.5, size=L)
    perm = rng.permutation(L)
    h = positional_entropy(a)
    assert 0.0 <= h <= 1.0
    assert positional_entropy(a[perm][:, perm]) == pytest.approx(h, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(2, 10), n=st.integers(1, 20), seed=st.integers(0, 10_000))
def test_averages_stay_stochastic(L, n, seed):
    maps = np.random.default_rng(seed).dirichlet(np.ones(L), size=(n, L))
    np.testing.assert_allclose(maps.mean(axis=0).sum(axis=1), 1.0, atol=1e-12)


def batches_of(data, size=16):
    return list(data.batches(size))


def test_single_sequence_average_is_the_map():
    model = build_model(TOY, seed=1)
    data = synthetic_corpus(1, 12, TOY.vocab_size, seed=3)
    maps = average_attention_maps(model, batches_of(data))
    buckets = collect_attention(model, batches_of(data))
    (length, slot), = buckets.items()
    assert maps[(1, 1)].sequences_averaged == 1
    np.testing.assert_array_equal(maps[(1, 1)].values, slot["sums"][1][1])


def test_averaged_maps_are_row_stochastic_and_deterministic():
    model = build_model(TOY, seed=2)
    data = synthetic_corpus(100, 16, TOY.vocab_size, seed=5, min_length=8)
    a = average_attention_maps(model, batches_of(data))
    b = average_attention_maps(model, batches_of(data))
    for key, amap in a.items():
        np.testing.assert_allclose(amap.values.sum(axis=1), 1.0, atol=1e-5)
        assert np.array_equal(amap.values, b[key].values)


def test_bucketing_uses_most_populated_length():
    model = build_model(TOY)
    data = synthetic_corpus(60, 16, TOY.vocab_size, seed=1, min_length=10)
    counts = np.bincount(data.mask.sum(axis=1))
    best = max(range(len(counts)), key=lambda n: (counts[n], n))
    maps = average_attention_maps(model, batches_of(data))
    assert maps[(0, 0)].length == best
    assert maps[(0, 0)].sequences_averaged == counts[best]


def test_uniform_attention_model_scores_one():
    model = build_model(TOY, seed=0)
    for name, t in model.params.items():
        if name.endswith(("mha.q.weight", "mha.k.weight")):
            t.data[:] = 0
    data = synthetic_corpus(20, 12, TOY.vocab_size, seed=0)
    assert model_entropy(model, batches_of(data)).mean == pytest.approx(1.0, abs=1e-12)


def test_single_head_report_equals_map_entropy():
    cfg = TOY.replace(layers=1, heads=1)
    model = build_model(cfg, seed=4)
    data = synthetic_corpus(10, 12, cfg.vocab_size, seed=0)
    maps = average_attention_maps(model, batches_of(data))
    assert entropy_report(maps).mean == positional_entropy(maps[(0, 0)])


def test_report_orders_heads_by_entropy():
    maps = {(0, h): AttentionMap(np.eye(3) * (h == 0) + np.full((3, 3), 1 / 3) * (h == 1), 0, h) for h in (0, 1)}
    maps[(0, 2)] = AttentionMap(np.array([[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]]), 0, 2)
    report = entropy_report(maps)
    assert [h for h, _ in report.per_layer[0]] == [0, 2, 1]
    assert json.loads(json.dumps(report.to_dict()))["layers"][0][0]["entropy"] == 0.0


def test_padding_must_be_suffix():
    model = build_model(TOY)
    toks = np.full((1, 6), 7)
    mask = np.array([[True, False, True, True, True, True]])
    with pytest.raises(ValueError, match="suffix"):
        collect_attention(model, [type("B", (), {"tokens": toks, "segments": None, "mask": mask})()])


def test_heatmap_pixels_and_pgm(tmp_path):
    values = np.array([[0.0, 0.1], [0.0125, 1.0]])
    px = heatmap_pixels(values)
    assert px.tolist() == [[0, 255], [128, 255]]
    assert np.array_equal(read_pgm(pgm_bytes(px)), px)
    maps = {(0, 0): AttentionMap(np.full((2, 2), 0.5)), (0, 1): AttentionMap(np.eye(2))}
    written = write_heatmaps(maps, tmp_path, entropy_report(maps))
    assert len(written) == 4
    csv_back = np.loadtxt(tmp_path / "layer00_head01_rank00.csv", delimiter=",")
    assert np.array_equal(csv_back, np.eye(2))
