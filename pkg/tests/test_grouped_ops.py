import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupbert_kit import tensor as T
from groupbert_kit.grouped_ops import (ConfigError, ConvWeight, GroupedWeight, check_grouping, expand_dense, glu,
                                       grouped_conv1d, grouped_linear)
from groupbert_kit.tensor import ShapeError, Tensor, grad_check


def conv_loop(x, kernels, bias=None):
    """Direct sliding-window convolution, zero 'same' padding, contiguous channel groups."""
    batch, length, d = x.shape
    ng, k, s, _ = kernels.shape
    half = (k - 1) // 2
    out = np.zeros_like(x)
    for b in range(batch):
        for l in range(length):
            for g in range(ng):
                for o in range(s):
                    acc = 0.0
                    for t in range(k):
                        src = l + t - half
                        if 0 <= src < length:
                            for i in range(s):
                                acc += x[b, src, g * s + i] * kernels[g, t, i, o]
                    out[b, l, g * s + o] = acc
    if bias is not None:
        out += bias
    return out


def test_grouped_linear_block_scaling():
    blocks = Tensor(np.stack([np.eye(2), 2 * np.eye(2)]))
    out = grouped_linear(Tensor([[1.0, 2.0, 3.0, 4.0]]), GroupedWeight(blocks))
    assert out.data.tolist() == [[1.0, 2.0, 6.0, 8.0]]


def test_single_group_is_dense():
    rng = np.random.default_rng(0)
    h, w = rng.standard_normal((4, 6)), rng.standard_normal((6, 6))
    out = grouped_linear(Tensor(h), GroupedWeight(Tensor(w[None])))
    assert np.array_equal(out.data, h @ w)


@pytest.mark.parametrize("groups", [2, 3])
def test_grouped_linear_against_dense_expansion(groups):
    rng = np.random.default_rng(groups)
    w = GroupedWeight.create(6, 6, groups, rng=rng, std=1.0)
    h = Tensor(rng.standard_normal((3, 6)))
    ref = h.data @ expand_dense(w).data
    assert np.max(np.abs(grouped_linear(h, w).data - ref)) < 1e-12


def test_expand_dense_ones_blocks():
    dense = expand_dense(GroupedWeight(Tensor(np.ones((2, 2, 2))))).data
    ref = np.zeros((4, 4))
    ref[:2, :2] = ref[2:, 2:] = 1
    assert np.array_equal(dense, ref)


def test_expand_dense_single_group_is_block():
    block = np.arange(12.0).reshape(1, 3, 4)
    assert np.array_equal(expand_dense(GroupedWeight(Tensor(block))).data, block[0])


@pytest.mark.parametrize("groups", [2, 4, 8])
def test_expand_dense_sparsity(groups):
    w = GroupedWeight.create(64, 64, groups, rng=np.random.default_rng(0), std=1.0)
    dense = expand_dense(w).data
    assert np.count_nonzero(dense == 0) / dense.size == 1 - 1 / groups
    assert w.num_weight_params == 64 * 64 // groups


def test_grouped_gradients_equal_dense_gradients_on_blocks():
    rng = np.random.default_rng(7)
    groups, b, c = 3, 6, 9
    w = GroupedWeight.create(b, c, groups, rng=rng, std=1.0, bias=False, requires_grad=True)
    h = Tensor(rng.standard_normal((5, b)), requires_grad=True)
    up = rng.standard_normal((5, c))
    T.backward(T.sum(T.mul(grouped_linear(h, w), Tensor(up))))
    dense = Tensor(expand_dense(w).data, requires_grad=True)
    h2 = Tensor(h.data.copy(), requires_grad=True)
    T.backward(T.sum(T.mul(T.matmul(h2, dense), Tensor(up))))
    np.testing.assert_allclose(h.grad, h2.grad, atol=1e-12)
    bi, ci = b // groups, c // groups
    for g in range(groups):
        np.testing.assert_allclose(w.blocks.grad[g], dense.grad[g * bi:(g + 1) * bi, g * ci:(g + 1) * ci], atol=1e-12)


def test_grouping_errors_name_the_field():
    with pytest.raises(ConfigError, match="in_features"):
        check_grouping(7, 8, 2)
    with pytest.raises(ConfigError, match="out_features"):
        check_grouping(8, 7, 2)


@settings(max_examples=50, deadline=None)
@given(groups=st.integers(1, 4), bm=st.integers(1, 3), cm=st.integers(1, 3), rows=st.integers(1, 4),
       seed=st.integers(0, 1000))
def test_grouped_linear_equivalence_property(groups, bm, cm, rows, seed):
    rng = np.random.default_rng(seed)
    w = GroupedWeight.create(groups * bm, groups * cm, groups, rng=rng, std=1.0)
    h = Tensor(rng.standard_normal((rows, groups * bm)))
    assert np.max(np.abs(grouped_linear(h, w).data - h.data @ expand_dense(w).data - w.bias.data)) < 1e-12


# ---------------------------------------------------------------------------
# convolution


def test_pointwise_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 5, 3))
    w = ConvWeight(Tensor(np.ones((3, 1, 1, 1))))
    assert np.array_equal(grouped_conv1d(Tensor(x), w).data, x)


def test_shift_kernels():
    x = np.arange(1.0, 6.0).reshape(1, 5, 1)
    centre = ConvWeight(Tensor(np.array([0.0, 1.0, 0.0]).reshape(1, 3, 1, 1)))
    assert np.array_equal(grouped_conv1d(Tensor(x), centre).data, x)
    left_tap = ConvWeight(Tensor(np.array([1.0, 0.0, 0.0]).reshape(1, 3, 1, 1)))
    assert grouped_conv1d(Tensor(x), left_tap).data.ravel().tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_conv_against_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 9, 8))
    w = ConvWeight.create(8, kernel_size=3, group_size=4, rng=rng, std=1.0)
    w.bias.data[:] = rng.standard_normal(8)
    ref = conv_loop(x, w.kernels.data, w.bias.data)
    assert np.max(np.abs(grouped_conv1d(Tensor(x), w).data - ref)) < 1e-12


def test_full_group_conv_is_dense_conv():
    rng = np.random.default_rng(2)
    d, k, length = 6, 5, 7
    x = rng.standard_normal((1, length, d))
    kern = rng.standard_normal((k, d, d))
    out = grouped_conv1d(Tensor(x), ConvWeight(Tensor(kern[None]))).data
    pad = np.pad(x[0], ((2, 2), (0, 0)))
    ref = np.stack([sum(pad[l + t] @ kern[t] for t in range(k)) for l in range(length)])
    np.testing.assert_allclose(out[0], ref, atol=1e-12)


def test_conv_param_count_and_validation():
    w = ConvWeight.create(64, kernel_size=7, group_size=16, rng=np.random.default_rng(0))
    assert w.kernels.size == 7 * 16 * 64
    with pytest.raises(ConfigError):
        ConvWeight.create(64, kernel_size=4, group_size=16)
    with pytest.raises(ConfigError):
        ConvWeight.create(60, kernel_size=7, group_size=16)


def test_conv_mask_zeroes_padded_inputs():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 6, 4))
    mask = np.array([[True] * 4 + [False] * 2])
    w = ConvWeight.create(4, kernel_size=3, group_size=2, rng=rng, std=1.0)
    a = grouped_conv1d(Tensor(x), w, mask).data
    x2 = x.copy()
    x2[0, 4:] = 1e3
    b = grouped_conv1d(Tensor(x2), w, mask).data
    assert np.array_equal(a[0, :4], b[0, :4])
    assert np.all(a[0, 4:] == 0)


def test_conv_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    w = ConvWeight.create(4, kernel_size=3, group_size=2, rng=rng, std=1.0, requires_grad=True)
    up = Tensor(rng.standard_normal((2, 5, 4)))
    err = grad_check(lambda: T.sum(T.mul(grouped_conv1d(x, w, np.array([[1, 1, 1, 1, 0], [1] * 5], bool)), up)),
                     [x, w.kernels, w.bias])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# GLU


def test_glu_half_gate():
    assert glu(Tensor([[1.0, 0.0]])).data.tolist() == [[0.5]]


def test_glu_saturated_gate():
    assert abs(glu(Tensor([[0.37, 1000.0]])).data[0, 0] - 0.37) < 1e-12


def test_glu_odd_width_rejected():
    with pytest.raises(ShapeError):
        glu(Tensor(np.zeros((2, 3))))


def test_glu_gradient():
    x = Tensor(np.random.default_rng(5).standard_normal((3, 8)), requires_grad=True)
    up = Tensor(np.random.default_rng(6).standard_normal((3, 4)))
    assert grad_check(lambda: T.sum(T.mul(glu(x), up)), x) < 1e-6
