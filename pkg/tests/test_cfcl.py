import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrcl import reference as ref
from ctrcl import tensor as T
from ctrcl.cfcl import (
    ClassAwareRep,
    cfcl_loss,
    class_aware_rep,
    compute_prototypes,
    cosine_distance,
    cpm,
    downsample_labels,
)


def labels_with(rng, n, h, w, K):
    return rng.integers(0, K, size=(n, h, w))


def test_prototypes_only_for_present_classes():
    Y = np.zeros((2, 4, 4), int)
    Y[0, :2] = 3
    protos = compute_prototypes(T.Tensor(np.ones((2, 2, 4, 4))), Y)
    assert protos.classes == [0, 3]
    assert protos.present.tolist() == [[True, True], [True, False]]
    assert protos.counts.tolist() == [2, 1]


def test_constant_region_prototype():
    v = np.array([0.5, -2.0, 3.0])
    F = np.broadcast_to(v[None, :, None, None], (1, 3, 4, 4)).copy()
    p = compute_prototypes(T.Tensor(F), np.zeros((1, 4, 4), int)).vector(0)
    np.testing.assert_allclose(p, v * 16 / (16 + 1e-8), rtol=1e-15)
    np.testing.assert_allclose(p, v, rtol=1e-9)


def test_prototype_is_mean_over_holding_samples():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(2, 3, 4, 4))
    Y = np.zeros((2, 4, 4), int)
    Y[0, :2] = 1
    Y[1, :, :1] = 1
    m1 = F[0][:, Y[0] == 1].mean(axis=1)
    m2 = F[1][:, Y[1] == 1].mean(axis=1)
    np.testing.assert_allclose(compute_prototypes(T.Tensor(F), Y).vector(1), (m1 + m2) / 2, rtol=1e-7)


def test_cosine_distance_cases():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance(v, -v) == pytest.approx(2.0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 1]) == 1.0


def test_single_present_class_gives_one():
    rng = np.random.default_rng(1)
    R = cpm(T.Tensor(rng.normal(size=(2, 3, 4, 4))), np.full((2, 8, 8), 2)).R.data
    np.testing.assert_array_equal(R, 1.0)


def test_pixel_at_prototype_closed_form():
    # pixel feature equals p_0, the other prototypes are orthogonal (distance 1)
    K = 3
    F = np.zeros((1, K, 1, K))
    for j in range(K):
        F[0, j, 0, j] = 1.0
    Y = np.arange(K).reshape(1, 1, K)
    R = cpm(T.Tensor(F), Y).R.data[0, :, 0, 0]
    want = 1.0 / (1.0 + (K - 1) * math.exp(-20.0))
    assert R[0] == pytest.approx(want, abs=1e-15)


def test_orthogonal_regions_nearly_one_hot():
    F = np.zeros((1, 2, 4, 4))
    F[0, 0, :, :2] = 1.0
    F[0, 1, :, 2:] = 1.0
    Y = np.zeros((1, 4, 4), int)
    Y[0, :, 2:] = 1
    R = cpm(T.Tensor(F), Y).R.data[0]
    off = np.where(Y[0] == 0, R[1], R[0])
    assert off.max() < 1e-8


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_rows_sum_to_one_and_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(2, 4, 3, 3))
    Y = labels_with(rng, 2, 6, 6, 4)
    R = cpm(T.Tensor(F), Y)
    slots = R.R.data
    np.testing.assert_allclose(slots.sum(axis=1), 1.0, atol=1e-9)
    for c in (0.1, 7.0):
        np.testing.assert_allclose(cpm(T.Tensor(c * F), Y).R.data, slots, atol=1e-9)
    live = np.broadcast_to(R.present[:, :, None, None], slots.shape)
    assert ((slots[live] > 0) & (slots[live] <= 1)).all()
    assert (slots[~live] == 0).all()


def test_cpm_matches_reference():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(2, 4, 4, 4))
    Y = labels_with(rng, 2, 8, 8, 3)
    got = cpm(T.Tensor(F), Y)
    want = ref.cpm(F, Y)
    for b in range(2):
        for k, cls in enumerate(got.classes):
            if cls in want[b]:
                np.testing.assert_allclose(got.R.data[b, k], want[b][cls], atol=1e-12)


def test_cpm_gradient_fd():
    rng = np.random.default_rng(3)
    Y = labels_with(rng, 1, 8, 8, 3)
    w = rng.normal(size=(1, 3, 4, 4))
    err = T.finite_diff_check(lambda t: (cpm(t, Y).R * w).sum(), rng.normal(size=(1, 4, 4, 4)))
    assert err < 1e-4


def test_downsample_labels_identity():
    Y = np.arange(16).reshape(1, 4, 4)
    assert downsample_labels(Y, 4, 4) is Y


def test_cfcl_loss_cases():
    rng = np.random.default_rng(4)
    R = cpm(T.Tensor(rng.normal(size=(2, 3, 4, 4))), labels_with(rng, 2, 8, 8, 3))
    assert abs(cfcl_loss(R, R.detach()).item()) < 1e-10
    a = np.zeros((1, 2, 2, 2))
    a[:, 0] = 1.0
    present = np.ones((1, 2), bool)
    loss = cfcl_loss(ClassAwareRep(T.Tensor(a), [0, 1], present), ClassAwareRep(T.Tensor(np.full_like(a, 0.5)), [0, 1], present))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_cfcl_loss_non_negative_and_learner_only_grad():
    rng = np.random.default_rng(5)
    for _ in range(20):
        Y = labels_with(rng, 2, 8, 8, 3)
        F = T.Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        G = T.Tensor(rng.normal(size=(2, 5, 4, 4)), requires_grad=True)
        loss = cfcl_loss(cpm(F, Y), cpm(G, Y).detach())
        assert loss.item() >= 0
    T.backward(loss)
    assert F.grad is not None and G.grad is None


def test_cfcl_loss_mismatch_errors():
    rng = np.random.default_rng(6)
    Y = labels_with(rng, 1, 8, 8, 3)
    a = cpm(T.Tensor(rng.normal(size=(1, 3, 4, 4))), Y)
    b = cpm(T.Tensor(rng.normal(size=(1, 3, 2, 2))), Y)
    with pytest.raises(T.ShapeError):
        cfcl_loss(a, b)
    if a.classes == b.classes and np.array_equal(a.present, b.present):
        assert cfcl_loss(a, b, resample=True).item() >= 0
    Y2 = np.zeros((1, 8, 8), int)
    with pytest.raises(ValueError):
        cfcl_loss(a, cpm(T.Tensor(rng.normal(size=(1, 3, 4, 4))), Y2))


def test_alpha_must_be_positive():
    F = T.Tensor(np.ones((1, 2, 2, 2)))
    Y = np.zeros((1, 2, 2), int)
    with pytest.raises(ValueError):
        class_aware_rep(F, compute_prototypes(F, Y), alpha=0)
