import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qanas import space as S


@pytest.fixture(scope="module")
def table1():
    return S.load_space("table1")


@pytest.fixture(scope="module")
def toy():
    return S.load_space("toy")


def test_table1_cardinality_is_exact(table1):
    archs, policies = S.cardinality(table1)
    assert archs == 30 * 1080**5 * 180 * 5 == 39671858073600000000
    assert policies == 5**23 == 11920928955078125
    assert f"{archs:.2e}" == "3.97e+19"
    assert str(archs).startswith("396718")
    assert f"{policies:.3g}" == "1.19e+16"


def test_architecture_count_by_hand(table1):
    per_block = [b.size for b in table1.blocks]
    assert per_block == [30] + [1080] * 5 + [180]


def test_single_choice_space():
    block = S.BlockSpec((3,), (1.0,), (2,), (1,), (0, 0, 0, 0), 8)
    sp = S.SearchSpaceSpec((block,), (16,), 0, (8,), 0, (), (8, 8, 1), 10)
    assert S.cardinality(sp) == (1, 1)
    sp4 = replace(sp, bitwidth_choices=(4, 8))
    n = S.quantizable_layers(S.seed_genome(sp4), sp4)
    assert S.cardinality(sp4) == (1, 2**n)


def test_repetition_aware_total_small_space_by_enumeration():
    block = S.BlockSpec((3, 5), (1.0,), (1, 2), (0, 1, 2), (0, 0, 0, 1), 8)
    sp = S.SearchSpaceSpec((block, block), (16, 32), 0, (4, 8), 1, (1,), (8, 8, 1), 10)
    total = 0
    for k1 in (3, 5):
        for e1 in (1, 2):
            for n1 in (0, 1, 2):
                for k2 in (3, 5):
                    for e2 in (1, 2):
                        for n2 in (0, 1, 2):
                            for c in (16, 32):
                                g = S.ArchitectureGenome(
                                    (S.BlockGenome(k1, 1.0, e1, n1), S.BlockGenome(k2, 1.0, e2, n2)), c
                                )
                                total += 2 ** S.quantizable_layers(g, sp)
    assert S.total_mixed_precision_networks(sp) == total


def test_seed_genome(table1):
    g = S.seed_genome(table1)
    assert g.blocks[0] == S.BlockGenome(3, 0.1, 1, 1)
    assert all(b == S.BlockGenome(3, 0.1, 6, 1) for b in g.blocks[1:])
    assert g.conv2_filters == 1280
    S.validate_genome(g, table1)


def test_seed_materialization(table1):
    g = S.seed_genome(table1)
    layers = S.materialize(g, table1)
    assert sum(l.quantizable for l in layers) == S.quantizable_layers(g, table1) == 23
    assert S.final_spatial_size(layers) == (8, 8)
    assert all(l.in_channels >= 1 and l.out_channels >= 1 for l in layers)
    strided = [l for l in layers if l.stride == 2]
    assert [l.group for l in strided] == [5, 7]
    assert layers[-1].kind == "dense" and layers[-1].out_channels == 10


def test_first_block_without_expansion_has_two_weighted_layers(table1):
    layers = S.materialize(S.seed_genome(table1), table1)
    block1 = [l.kind for l in layers if l.group == 1 and l.quantizable]
    assert block1 == ["depthwise_conv", "pointwise_conv"]
    block2 = [l.kind for l in layers if l.group == 2 and l.quantizable]
    assert block2 == ["pointwise_conv", "depthwise_conv", "pointwise_conv"]


def test_zero_repetition_blocks_are_skipped(table1):
    g = S.seed_genome(table1)
    blocks = list(g.blocks)
    for i in range(1, 6):
        blocks[i] = replace(blocks[i], repetitions=0)
    g0 = S.ArchitectureGenome(tuple(blocks), g.conv2_filters)
    layers = S.materialize(g0, table1)
    assert {l.group for l in layers} == {0, 1, 7, 8}
    # stem + block1 (2) + block7 (3) + conv2 + dense
    assert S.quantizable_layers(g0, table1) == 1 + 2 + 3 + 2


def test_zero_repetition_block_shortens_policy(table1):
    g = S.seed_genome(table1)
    blocks = list(g.blocks)
    blocks[2] = replace(blocks[2], repetitions=0)
    g0 = S.ArchitectureGenome(tuple(blocks), g.conv2_filters)
    assert S.quantizable_layers(g0, table1) == 23 - 3
    pol = S.sample_policy(table1, g0, np.random.default_rng(0))
    assert len(pol) == 20


def test_residual_only_where_legal(table1):
    rng = np.random.default_rng(3)
    for _ in range(50):
        layers = S.materialize(S.sample_genome(table1, rng), table1)
        for i, l in enumerate(layers):
            if l.kind == "residual_add":
                src = layers[l.skip_from]
                assert src.in_channels == l.out_channels
                block = layers[l.skip_from : i]
                assert all(b.stride == 1 for b in block)


def test_channel_rounding():
    assert S.channels(0.01, 16) == 1
    assert S.channels(0.1, 16) == 2  # 1.6
    assert S.channels(0.1, 24) == 2  # 2.4
    assert S.channels(0.5, 5) == 3  # 2.5 rounds away from zero
    assert S.channels(0.3, 320) == 96


def test_materialize_rejects_foreign_genome(table1):
    g = S.seed_genome(table1)
    bad = S.ArchitectureGenome((replace(g.blocks[0], kernel_size=9),) + g.blocks[1:], 1280)
    with pytest.raises(S.SpaceError):
        S.materialize(bad, table1)


def test_sampling_is_deterministic(table1):
    a = S.sample_genome(table1, np.random.default_rng(11))
    b = S.sample_genome(table1, np.random.default_rng(11))
    assert a == b
    rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
    assert S.sample_policy(table1, a, rng1) == S.sample_policy(table1, a, rng2)


def test_six_way_gene_is_uniform(table1):
    rng = np.random.default_rng(0)
    counts = {k: 0 for k in table1.blocks[1].kernel_size_choices}
    n = 10_000
    for _ in range(n):
        counts[S.sample_genome(table1, rng).blocks[1].kernel_size] += 1
    for c in counts.values():
        assert abs(c / n - 1 / 6) <= 0.02


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_policy_length_matches_materialized_layers(seed):
    sp = S.load_space("table1")
    rng = np.random.default_rng(seed)
    g = S.sample_genome(sp, rng)
    pol = S.sample_policy(sp, g, rng)
    layers = S.materialize(g, sp)
    assert len(pol) == sum(l.quantizable for l in layers)
    assert [l.group for l in layers if l.quantizable] == S.quantizable_layer_groups(g, sp)
    S.validate_policy(pol, g, sp)


def test_encode_slots(table1):
    g = S.seed_genome(table1)
    pol = S.seed_policy(table1, g)
    x = S.encode(g, pol, table1)
    assert len(x) == S.encoding_length(table1)
    assert x[0] == pytest.approx(0.2)  # kernel size 3 is index 1 of 6
    assert np.array_equal(x, S.encode(g, pol, table1))


def test_encode_all_max_is_ones(table1):
    blocks = tuple(
        S.BlockGenome(*(c[-1] for c in b.choice_lists())) for b in table1.blocks
    )
    g = S.ArchitectureGenome(blocks, max(table1.conv2_filter_choices))
    pol = S.QuantizationPolicy.uniform(S.quantizable_layers(g, table1), 8)
    assert np.all(S.encode(g, pol, table1) == 1.0)


def test_encode_absent_block_is_zero(table1):
    g = S.seed_genome(table1)
    blocks = list(g.blocks)
    blocks[3] = S.BlockGenome(7, 0.3, 5, 0)
    g0 = S.ArchitectureGenome(tuple(blocks), g.conv2_filters)
    x = S.encode(g0, S.seed_policy(table1, g0), table1)
    # block 1 has two slots (k, alpha); blocks 2 and 3 have four each
    start = 2 + 4 + 4
    assert np.all(x[start : start + 4] == 0.0)


def _random_full_genome(sp, rng):
    g = S.sample_genome(sp, rng)
    blocks = tuple(
        replace(b, repetitions=max(b.repetitions, 1)) if 0 in spec.repetition_choices else b
        for b, spec in zip(g.blocks, sp.blocks)
    )
    return S.ArchitectureGenome(blocks, g.conv2_filters)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_encode_injective_without_empty_blocks(s1, s2):
    sp = S.load_space("table1")
    g1 = _random_full_genome(sp, np.random.default_rng(s1))
    g2 = _random_full_genome(sp, np.random.default_rng(s2))
    p1 = S.QuantizationPolicy.uniform(S.quantizable_layers(g1, sp), 8)
    p2 = S.QuantizationPolicy.uniform(S.quantizable_layers(g2, sp), 8)
    if g1 != g2:
        assert not np.array_equal(S.encode(g1, p1, sp), S.encode(g2, p2, sp))


def test_distance_examples():
    assert S.distance([0, 0], [0.3, 0.4]) == pytest.approx(0.5)
    x = np.array([0.1, 0.7, 0.2])
    assert S.distance(x, x) == 0.0
    with pytest.raises(ValueError):
        S.distance([0, 0], [0, 0, 0])


@settings(max_examples=200)
@given(st.lists(st.lists(st.floats(0, 1), min_size=5, max_size=5), min_size=3, max_size=3))
def test_distance_is_a_metric(pts):
    a, b, c = (np.array(p) for p in pts)
    assert S.distance(a, b) == pytest.approx(S.distance(b, a))
    assert S.distance(a, c) <= S.distance(a, b) + S.distance(b, c) + 1e-12
    assert S.distance(a, a) == 0.0


def test_space_validation_errors():
    good = S.BlockSpec((3,), (1.0,), (2,), (1,), (0, 0, 0, 0), 8)
    with pytest.raises(S.SpaceError):
        S.BlockSpec((3, 3), (1.0,), (2,), (1,), (0, 0, 0, 0), 8)
    with pytest.raises(S.SpaceError):
        S.BlockSpec((3,), (1.0,), (2,), (1,), (1, 0, 0, 0), 8)
    with pytest.raises(S.SpaceError):
        S.SearchSpaceSpec((good,), (16,), 0, (8,), 0, (2,), (8, 8, 1), 10)
    with pytest.raises(S.SpaceError):
        S.LayerSpec("residual_add", stride=2, in_channels=4, out_channels=4, skip_from=0)


def test_parse_rejects_seed_outside_choices():
    text = """
[space]
input_shape = 8, 8, 1
num_classes = 10
conv2_filters = 16
conv2_filters_seed = 32
bitwidth = 8
bitwidth_seed = 8
[block.1]
base_width = 8
kernel_size = 3
kernel_size_seed = 3
width_multiplier = 1.0
width_multiplier_seed = 1.0
expansion = 1
expansion_seed = 1
repetitions = 1
repetitions_seed = 1
"""
    with pytest.raises(S.SpaceError):
        S.parse_space(text)


def test_cifar100_variant_differs_only_in_width(table1):
    c100 = S.load_space("table1_cifar100")
    assert c100.num_classes == 100
    assert c100.blocks[0].width_multiplier_choices == (0.25, 0.5, 0.75, 1.0, 1.3)
    assert S.seed_genome(c100).blocks[0].width_multiplier == 0.75
    assert S.cardinality(c100) == S.cardinality(table1)


def test_toy_space_seed_never_collapses(toy):
    layers = S.materialize(S.seed_genome(toy), toy)
    assert S.final_spatial_size(layers) == (2, 2)
    assert math.prod(S.final_spatial_size(layers)) >= 1
