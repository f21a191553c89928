import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treenet import ops
from treenet.tensor import Tensor, no_grad

import oracles

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


# -- conv2d ---------------------------------------------------------------


def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    out = ops.conv2d(Tensor(x), Tensor(w))
    assert np.array_equal(out.data, x)


def test_conv_ramp_neighbourhood_sum():
    x = np.arange(16, dtype=F64).reshape(1, 1, 4, 4)
    out = ops.conv2d(t64(x), t64(np.ones((1, 1, 3, 3))), padding=1).data
    expected = oracles.conv2d_loops(x, np.ones((1, 1, 3, 3)), pad=1)
    # corner pixel: 0 + 1 + 4 + 5
    assert expected[0, 0, 0, 0] == 10
    assert np.array_equal(out, expected)


def test_conv_zero_input():
    w = np.random.default_rng(1).standard_normal((4, 2, 3, 3))
    out = ops.conv2d(t64(np.zeros((1, 2, 2, 2))), t64(w), t64(np.zeros(4)), padding=1)
    assert not out.data.any()


@given(
    n=st.integers(1, 2),
    cin=st.integers(1, 4),
    cout=st.integers(1, 4),
    k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2),
    size=st.integers(3, 6),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_loop_oracle(n, cin, cout, k, stride, size, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin, size, size))
    w = r.standard_normal((cout, cin, k, k))
    b = r.standard_normal(cout)
    pad = (k - 1) // 2
    out = ops.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, oracles.conv2d_loops(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("groups", [2, 4])
def test_grouped_conv_equals_sliced_convs(groups, rng):
    x = rng.standard_normal((2, 8, 6, 6))
    w = rng.standard_normal((8, 8 // groups, 3, 3))
    out = ops.conv2d(t64(x), t64(w), padding=1, groups=groups).data
    cg = 8 // groups
    parts = [
        ops.conv2d(t64(x[:, g * cg : (g + 1) * cg]), t64(w[g * cg : (g + 1) * cg]), padding=1).data
        for g in range(groups)
    ]
    np.testing.assert_allclose(out, np.concatenate(parts, axis=1), rtol=1e-12)
    np.testing.assert_allclose(out, oracles.conv2d_loops(x, w, pad=1, groups=groups), rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_groups():
    with pytest.raises(ValueError):
        ops.conv2d(t64(np.zeros((1, 6, 4, 4))), t64(np.zeros((4, 3, 3, 3))), groups=4)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((4, 2, 3, 3))))


def test_conv_deterministic():
    r = np.random.default_rng(5)
    x = r.standard_normal((2, 8, 9, 9)).astype(np.float32)
    w = r.standard_normal((16, 8, 3, 3)).astype(np.float32)
    a = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


# -- batch norm -------------------------------------------------------------


def _bn(x, training, rm=None, rv=None):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return ops.batch_norm(t64(x), t64(np.ones(c)), t64(np.zeros(c)), rm, rv, training), rm, rv


def test_bn_eval_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out, _, _ = _bn(x, False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_bn_train_constant_input_gives_beta():
    x = np.full((4, 2, 3, 3), 7.5)
    out, _, _ = _bn(x, True)
    assert np.abs(out.data).max() < 1e-6


def test_bn_train_normalizes(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    out, rm, rv = _bn(x, True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    # running stats moved 10% towards the batch statistics (unbiased variance)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


# -- elementwise ----------------------------------------------------------


def test_relu_values():
    assert ops.relu(t64([[-1.0, 0.0, 2.0]])).data.tolist() == [[0.0, 0.0, 2.0]]
    assert not ops.relu(t64(-np.ones((2, 3)))).data.any()


def test_relu_backward_mask():
    x = t64([[-1.0, 0.5, 2.0, -0.1]], grad=True)
    ops.sum_all(ops.relu(x)).backward()
    assert x.grad.tolist() == [[0.0, 1.0, 1.0, 0.0]]


def test_sigmoid_zero_and_extremes():
    out = ops.sigmoid(t64([[0.0, -800.0, 800.0]])).data
    assert out[0, 0] == 0.5
    assert 0 <= out[0, 1] < 1e-300 and out[0, 2] == 1.0


def test_add_and_channelwise_identities(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(ops.add(t64(x), t64(np.zeros_like(x))).data, x)
    assert np.array_equal(ops.multiply_channelwise(t64(x), t64(np.ones((2, 3, 1, 1)))).data, x)


def test_add_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        ops.add(t64(np.zeros((1, 2))), t64(np.zeros((2, 2))))


# -- pooling ----------------------------------------------------------------


def test_max_pool_halves():
    assert ops.max_pool2d(Tensor(np.zeros((1, 1, 56, 56)))).shape == (1, 1, 28, 28)


def test_max_pool_constant():
    out = ops.max_pool2d(t64(np.full((1, 2, 8, 8), -3.0))).data
    assert (out == -3.0).all()


def test_max_pool_window_scan():
    x = np.random.default_rng(3).permutation(16).astype(F64).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ops.max_pool2d(t64(x)).data, oracles.max_pool_scan(x))


@given(size=st.integers(1, 9), seed=st.integers(0, 2**16))
def test_max_pool_scan_property(size, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, size, size))
    np.testing.assert_array_equal(ops.max_pool2d(t64(x)).data, oracles.max_pool_scan(x))


def test_gap_values(rng):
    assert ops.global_avg_pool(t64(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 2.5
    np.testing.assert_allclose(ops.global_avg_pool(t64(np.full((1, 3, 5, 5), 0.7))).data, 0.7, rtol=1e-15)
    x = rng.standard_normal((3, 4, 7, 7)) * 1e3
    np.testing.assert_allclose(ops.global_avg_pool(t64(x)).data[:, :, 0, 0], oracles.mean_compensated(x), rtol=1e-12)


# -- concat / slice ---------------------------------------------------------


def test_concat_single_identity(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    assert np.array_equal(ops.concat_channels([t64(x)]).data, x)


def test_concat_then_slice_bitwise(rng):
    parts = [rng.standard_normal((2, c, 3, 3)) for c in (1, 4, 2)]
    cat = ops.concat_channels([t64(p) for p in parts])
    start = 0
    for p in parts:
        got = ops.slice_channels(cat, start, start + p.shape[1]).data
        assert np.array_equal(got, p)
        start += p.shape[1]


def test_concat_backward_routes_slices():
    a, b = t64(np.ones((1, 2, 2, 2)), grad=True), t64(np.ones((1, 3, 2, 2)), grad=True)
    out = ops.concat_channels([a, b])
    w = t64(np.arange(5, dtype=F64).reshape(1, 5, 1, 1) * np.ones((1, 5, 2, 2)))
    ops.sum_all(ops.mul(out, w)).backward()
    assert np.array_equal(a.grad, w.data[:, :2])
    assert np.array_equal(b.grad, w.data[:, 2:])


# -- conv1d over channels ----------------------------------------------------


def test_conv1d_identity_kernel(rng):
    v = rng.standard_normal((2, 6))
    assert np.array_equal(ops.conv1d_channels(t64(v), t64([0.0, 1.0, 0.0])).data, v)


def test_conv1d_box_kernel():
    out = ops.conv1d_channels(t64([[1.0, 2.0, 3.0, 4.0]]), t64(np.full(3, 1 / 3))).data[0]
    np.testing.assert_allclose(out, [1.0, 2.0, 3.0, 7 / 3], rtol=1e-14)
    np.testing.assert_allclose(out, oracles.conv1d_sliding([1, 2, 3, 4], [1 / 3] * 3), rtol=1e-14)


@given(c=st.integers(2, 12), k=st.sampled_from([1, 3, 5, 7]), seed=st.integers(0, 2**16))
def test_conv1d_sliding_oracle(c, k, seed):
    r = np.random.default_rng(seed)
    v, w = r.standard_normal(c), r.standard_normal(k)
    got = ops.conv1d_channels(t64(v[None]), t64(w)).data[0]
    np.testing.assert_allclose(got, oracles.conv1d_sliding(v.tolist(), w.tolist()), rtol=1e-12, atol=1e-12)


def test_conv1d_rejects_even_kernel():
    with pytest.raises(ValueError):
        ops.conv1d_channels(t64(np.zeros((1, 4))), t64(np.zeros(2)))


# -- fc / softmax ------------------------------------------------------------


def test_fc_values(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(ops.fully_connected(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)
    out = ops.fully_connected(t64([[1.0, 1.0]]), t64([[1.0, 2.0], [3.0, 4.0]])).data
    assert out.tolist() == [[4.0, 6.0]]


def test_cross_entropy_uniform_is_log_k():
    loss, probs = ops.softmax_cross_entropy(t64(np.zeros((3, 7))), np.array([0, 3, 6]))
    assert loss.data == pytest.approx(math.log(7), rel=1e-14)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-12)


def test_cross_entropy_stable_large_logit():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1000.0
    loss, _ = ops.softmax_cross_entropy(t64(logits), np.array([2]))
    assert np.isfinite(loss.data) and loss.data < 1e-12


def test_cross_entropy_log_sum_exp_oracle(rng):
    logits = rng.standard_normal((4, 10)) * 5
    labels = rng.integers(0, 10, 4)
    loss, _ = ops.softmax_cross_entropy(t64(logits), labels)
    assert loss.data == pytest.approx(oracles.log_sum_exp_loss(logits.tolist(), labels.tolist()), rel=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(row):
    p = ops.softmax(np.array([row]))
    assert abs(p.sum() - 1) <= 1e-6
    assert (p >= 0).all()


# -- engine ------------------------------------------------------------------


def test_sum_backward_all_ones(rng):
    x = t64(rng.standard_normal((2, 3)), grad=True)
    ops.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_disconnected_param_grad_zero(rng):
    x, y = t64(rng.standard_normal((2, 3)), grad=True), t64(rng.standard_normal((2, 3)), grad=True)
    ops.sum_all(x).backward()
    assert y.grad is None or not y.grad.any()


def test_graph_reuse_raises(rng):
    x = t64(rng.standard_normal((2, 3)), grad=True)
    loss = ops.sum_all(ops.relu(x))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_non_scalar_backward_raises(rng):
    x = t64(rng.standard_normal((2, 3)), grad=True)
    with pytest.raises((RuntimeError, ValueError)):
        ops.relu(x).backward()


def test_nonfinite_forward_raises():
    x = t64([[1e308, 1e308]])
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        ops.add(x, x)


def test_no_grad_records_nothing(rng):
    x = t64(rng.standard_normal((2, 3)), grad=True)
    with no_grad():
        out = ops.relu(x)
    assert out.ctx is None and not out.requires_grad


def test_shared_input_grads_accumulate():
    x = t64([[1.0, 2.0]], grad=True)
    ops.sum_all(ops.add(x, x)).backward()
    assert x.grad.tolist() == [[2.0, 2.0]]
