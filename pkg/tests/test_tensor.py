import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ctrcl import reference as ref
from ctrcl import tensor as T
from ctrcl.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- elementwise ----------------------------------------------------------


def test_log_exp_roundtrip():
    x = Tensor([0.5, 1.0, 2.0])
    np.testing.assert_allclose(T.log(T.exp(x)).data, [0.5, 1.0, 2.0], rtol=0, atol=1e-15)


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_clamp_floor():
    assert T.clamp(Tensor([1e-12]), 1e-8).data.tolist() == [1e-8]


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))


def test_safe_log_handles_zero():
    assert T.safe_log(Tensor([0.0])).item() == pytest.approx(math.log(1e-8))


def test_broadcast_mismatch_raises():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_broadcast_gradient_is_reduced():
    a, b = leaf(np.ones((3, 4))), leaf(np.arange(4.0))
    T.backward((a * b).sum())
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, [3.0] * 4)
    np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_gelu_matches_tanh_form():
    x = np.linspace(-3, 3, 13)
    want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, want, atol=1e-15)


# -- matmul / conv --------------------------------------------------------


def test_matmul_identity():
    b = np.random.default_rng(0).normal(size=(2, 5))
    np.testing.assert_array_equal(T.matmul(np.eye(2), b).data, b)


def test_matmul_matches_loop_oracle():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[1.0, 0.0], [0.0, 1.0]]
    np.testing.assert_array_equal(T.matmul(a, np.array(b).T).data, ref.matmul(a, np.array(b).T.tolist()))
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(a, b).data, ref.matmul(a.tolist(), b.tolist()), atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_fd():
    rng = np.random.default_rng(2)
    b = rng.normal(size=(4, 3))
    err = T.finite_diff_check(lambda a: T.matmul(a, b).sum(), rng.normal(size=(2, 4)))
    assert err < 1e-4


def test_conv_identity_kernel():
    x = np.random.default_rng(3).normal(size=(2, 1, 5, 5))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv_ones_kernel_hand_sums():
    out = T.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), stride=1, pad=1).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6
    np.testing.assert_array_equal(out, ref.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), 1, 1)[0, 0])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_naive(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(x, w, stride, pad).data, ref.conv2d(x, w, stride, pad), atol=1e-12)


def test_conv_weight_grad_fd():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 5, 5))
    err = T.finite_diff_check(lambda w: T.conv2d(x, w, 2, 1).sum(), rng.normal(size=(3, 2, 3, 3)))
    assert err < 1e-4


@pytest.mark.parametrize("bad", [dict(stride=0), dict(pad=-1)])
def test_conv_rejects_bad_geometry(bad):
    with pytest.raises(ValueError):
        T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), **{"stride": 1, "pad": 0, **bad})


def test_conv_rejects_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


# -- softmax / reductions -------------------------------------------------


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x), axis=1).data, T.softmax(Tensor(x + c), axis=1).data, atol=1e-12)


def test_softmax_mask_gives_exact_zero():
    mask = np.array([[True, False, True]])
    y = T.softmax(Tensor([[1.0, 5.0, 1.0]]), axis=1, mask=mask).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y, [[0.5, 0.0, 0.5]])


def test_sum_mean():
    assert T.reduce(Tensor([1.0, 2.0, 3.0]), "sum").item() == 6
    assert Tensor(np.ones((2, 2))).mean().item() == 1


def test_mean_grad_quarter():
    x = leaf(np.random.default_rng(5).normal(size=(2, 2)))
    T.backward(x.mean())
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 0.25))
    assert T.finite_diff_check(lambda t: t.mean(), x.data) < 1e-10


def test_reduce_bad_axis():
    with pytest.raises(T.ShapeError):
        T.reduce(Tensor(np.ones((2, 2))), "sum", axis=3)


# -- resampling -----------------------------------------------------------


def test_nearest_same_size_and_blocks():
    rng = np.random.default_rng(6)
    lab = rng.integers(0, 4, size=(5, 7))
    np.testing.assert_array_equal(T.nearest_downsample(lab, 5, 7), lab)
    blocks = np.kron(np.array([[1, 2], [3, 0]]), np.ones((2, 2), int))
    np.testing.assert_array_equal(T.nearest_downsample(blocks, 2, 2), [[1, 2], [3, 0]])


def test_nearest_matches_reference():
    lab = np.random.default_rng(7).integers(0, 5, size=(8, 8))
    np.testing.assert_array_equal(T.nearest_downsample(lab, 3, 3), ref.nearest_downsample(lab, 3, 3))


@given(st.integers(1, 40), st.integers(1, 40))
def test_nearest_index_formula(n_in, n_out):
    want = [ref.nearest_index(i, n_in, n_out) for i in range(n_out)]
    assert T.nearest_indices(n_in, n_out).tolist() == want


def test_nearest_downsample_refuses_enlarging():
    with pytest.raises(ValueError):
        T.nearest_downsample(np.zeros((2, 2)), 4, 4)


def test_bilinear_identity_and_constant():
    x = np.random.default_rng(8).normal(size=(1, 2, 3, 4))
    np.testing.assert_array_equal(T.bilinear_upsample(x, 3, 4).data, x)
    np.testing.assert_allclose(T.bilinear_upsample(np.full((1, 1, 2, 3), 2.5), 5, 7).data, 2.5, atol=1e-15)


def test_bilinear_matches_reference():
    x = np.random.default_rng(9).normal(size=(2, 2))
    np.testing.assert_allclose(T.bilinear_upsample(x[None, None], 4, 4).data[0, 0], ref.bilinear(x, 4, 4), atol=1e-14)
    y = np.random.default_rng(10).normal(size=(3, 5))
    np.testing.assert_allclose(T.bilinear_upsample(y[None, None], 8, 11).data[0, 0], ref.bilinear(y, 8, 11), atol=1e-14)


def test_bilinear_refuses_shrinking():
    with pytest.raises(ValueError):
        T.bilinear_upsample(np.zeros((1, 1, 4, 4)), 2, 2)


# -- tape -----------------------------------------------------------------


def test_detach_values_and_no_grad():
    x = leaf([1.0, 2.0, 3.0])
    d = T.detach(x)
    np.testing.assert_array_equal(d.data, x.data)
    y = leaf([1.0, 1.0, 1.0])
    T.backward((y * d).sum())
    assert x.grad is None


def test_detach_functional_form():
    x = leaf([0.5, -1.5, 2.0])
    T.backward((x * T.detach(x)).sum())
    np.testing.assert_array_equal(x.grad, x.data)
    err = T.finite_diff_check(lambda t: (t * Tensor([0.5, -1.5, 2.0])).sum(), x.data)
    assert err < 1e-10


def test_backward_basic_grads():
    x = leaf(np.arange(4.0))
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(4))
    x = leaf(np.arange(4.0))
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_shared_nodes():
    x = leaf([2.0])
    y = x * x
    T.backward((y + y * 3.0).sum())
    np.testing.assert_allclose(x.grad, [16.0])


def test_backward_errors():
    with pytest.raises(RuntimeError):
        T.backward(Tensor(1.0))
    with pytest.raises(T.ShapeError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_tape_is_topological():
    x = leaf([1.0, 2.0])
    a = x * 2.0
    b = T.exp(a) + a
    loss = (b * a).sum()
    tape = T.Tape.from_root(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        if n._ctx is not None:
            for p in n._ctx.inputs:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert y._ctx is None and not y.requires_grad


def test_grad_shape_matches_data():
    x = leaf(np.ones((2, 3, 4)))
    T.backward(x.transpose(2, 0, 1).reshape(4, 6)[1:, ::2].sum())
    assert x.grad.shape == x.shape


def test_fd_helper_trivial_cases():
    x = np.random.default_rng(11).normal(size=(3, 4))
    assert T.finite_diff_check(lambda t: t.sum(), x) < 1e-10
    assert T.finite_diff_check(lambda t: T.softmax(t, axis=1).sum(), x) < 1e-10


def test_fd_kl_pipeline():
    from ctrcl.rlcl import kl_map_loss

    rng = np.random.default_rng(12)
    peer = rng.dirichlet(np.ones(4), size=(1, 3, 3)).transpose(0, 3, 1, 2)
    err = T.finite_diff_check(lambda t: kl_map_loss(T.softmax(t, axis=1), peer), rng.normal(size=(1, 4, 3, 3)), h=1e-5)
    assert err < 1e-4
