from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from treenet import cost
from treenet.blocks import BlockSpec, build_tree_block_basic
from treenet.layers import Conv2d, Module, skip_init
from treenet.zoo import build_model, treenet_spec, tree_reference_spec


class _Single(Module):
    def __init__(self, conv):
        super().__init__()
        self.conv = conv

    def forward(self, x):
        return self.conv(x)


def test_osa_params_examples():
    assert cost.osa_params(128, 128, 3, 256) == 573_440
    assert cost.osa_params(256, 128, 3, 256) == 753_664
    assert cost.osa_params(96, 40, 1, 72) == 9 * 96 * 40 + (96 + 40) * 72


def test_tree_params_examples():
    assert cost.tree_params(128, 128, 128, 3, 256) == 622_592
    assert cost.tree_params(256, 128, 128, 3, 256) == 786_432
    k_in, k, kp, kc = 40, 24, 16, 64
    assert cost.tree_params(k_in, k, kp, 2, kc) == k_in * (k + 9 * kp) + 10 * k * kp + 3 * k * kc
    with pytest.raises(ValueError):
        cost.tree_params(8, 8, 8, 1, 8)


def test_param_diff_examples():
    assert cost.param_diff(128, 128, 3) == -32_768
    assert cost.param_diff(256, 128, 5) == 2_080_768
    for l in (3, 5):
        for k in (18, 36, 180, 720):
            assert cost.param_diff(k, 17 * k // 18, l) > 0


@given(k=st.integers(1, 1024), kp=st.integers(1, 1024), l=st.integers(2, 8))
def test_param_diff_is_subtraction(k, kp, l):
    assert cost.param_diff(k, kp, l) == cost.osa_params(2 * k, k, l, 2 * k) - cost.tree_params(2 * k, k, kp, l, 2 * k)


def test_mac_examples():
    assert cost.mac_standard(56, 56, 128, 128) == 950_272
    assert cost.mac_group(56, 56, 128, 128, 1) == cost.mac_standard(56, 56, 128, 128)
    assert cost.mac_increment(56, 56, 128, 128, 32) == 1_075_200
    assert cost.mac_increment(7, 9, 64, 16, 4) == 3 * 16 * 63
    with pytest.raises(ValueError):
        cost.mac_group(8, 8, 16, 30, 4)


def test_mac_standard_matches_layer_walk():
    with skip_init():
        rep = cost.analyze_graph(_Single(Conv2d(128, 128, 3)), (128, 56, 56))
    (row,) = rep.rows
    assert row.mac == cost.mac_standard(56, 56, 128, 128)


@given(
    hw=st.integers(1, 64),
    c=st.integers(1, 512),
    k=st.integers(1, 256),
    g=st.sampled_from([1, 2, 3, 4, 6, 8, 16, 32]),
)
def test_mac_increment_identity(hw, c, k, g):
    assume(4 * k % g == 0)
    inc = cost.mac_increment(hw, hw, c, k, g)
    assert Fraction(inc) == Fraction(cost.mac_group(hw, hw, c, 4 * k, g)) - cost.mac_standard(hw, hw, c, k)
    if hw * hw > 3 * c and g >= 4:
        assert inc > 0
    if g == 4:
        assert inc == 3 * k * hw * hw


def test_single_1x1_conv_cost():
    with skip_init():
        rep = cost.analyze_graph(_Single(Conv2d(24, 40, 1)), (24, 9, 7))
    (row,) = rep.rows
    assert row.flops == 63 * 24 * 40
    assert row.mac == 63 * (24 + 40) + 24 * 40
    assert row.params == 24 * 40


def test_report_totals_are_row_sums():
    with skip_init():
        rep = cost.analyze_graph(build_model(treenet_spec(20)), (3, 224, 224))
    assert rep.flops == sum(r.flops for r in rep.rows) == rep.dense_flops + rep.elementwise_flops
    assert rep.params == sum(r.params for r in rep.rows)
    assert rep.params == cost.enumerate_weights(build_model(treenet_spec(20, width_divisor=1)))


def test_tree_block_report_params_equal_closed_form():
    spec = BlockSpec(l=4, k=24, kp=20, k_cat=48, k_in=32)
    with skip_init():
        rep = cost.analyze_graph(build_tree_block_basic(spec), (32, 14, 14))
    assert rep.params == cost.tree_params(32, 24, 20, 4, 48)


def test_flops_scale_by_four():
    with skip_init():
        block = build_model(tree_reference_spec(3, 16, 16, 32, 32))
        net = build_model(treenet_spec(40))
    small, big = cost.analyze_graph(block, (32, 14, 14)), cost.analyze_graph(block, (32, 28, 28))
    assert big.dense_flops == 4 * small.dense_flops
    conv = lambda rep: sum(r.flops for r in rep.rows if r.kind == "conv")
    assert conv(cost.analyze_graph(net, (3, 448, 448))) == 4 * conv(cost.analyze_graph(net, (3, 224, 224)))


def test_treenet20_gflops_near_table():
    with skip_init():
        rep = cost.analyze_graph(build_model(treenet_spec(20)), (3, 224, 224))
    assert rep.gflop_units == pytest.approx(4.20, rel=0.05)
    assert rep.params_excluding("classifier", with_bn=True) / 1e6 == pytest.approx(8.37, rel=0.03)


def test_csv_round_trip():
    with skip_init():
        rep = cost.analyze_graph(build_model(treenet_spec(20, width_divisor=4, num_classes=4)), (3, 64, 64))
    rows, totals = cost.parse_cost_csv(rep.to_csv())
    assert totals == {"params": rep.params, "params_with_bn": rep.params_with_bn, "flops": rep.flops, "mac": rep.mac}
    assert [r["layer"] for r in rows] == [r.layer for r in rep.rows]
    assert sum(r["flops"] for r in rows) == totals["flops"]


def test_text_report_header():
    with skip_init():
        rep = cost.analyze_graph(_Single(Conv2d(4, 4, 3)), (4, 8, 8))
    text = rep.to_text()
    assert "multiply-accumulate counted as 1 unit" in text
    assert "params[weights+bn-classifier]" in text


def test_analyze_graph_restores_training_mode():
    model = build_model(treenet_spec(20, width_divisor=8, num_classes=2))
    model.train()
    cost.analyze_graph(model, (3, 32, 32))
    assert all(m.training for _, m in model.named_modules())


def test_analyze_graph_needs_a_model():
    with pytest.raises(TypeError):
        cost.analyze_graph(np.zeros(3), (3, 8, 8))
