import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fetalplane import functional as F
from fetalplane.gradcheck import grad_check
from fetalplane.rng import key_rng
from fetalplane.tensor import Tensor, default_dtype, get_dtype, matmul, no_grad, set_dtype, stack, concatenate

finite = st.floats(-5, 5, allow_nan=False, width=64)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity(f64):
    a = T([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(T(np.eye(2)), a).data, a.data)


def test_matmul_hand_value(f64):
    assert matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_zero(f64, rng):
    assert not matmul(T(np.zeros((3, 4))), T(rng.normal(size=(4, 5)))).data.any()


def test_matmul_shape_mismatch(f64):
    with pytest.raises(ValueError):
        matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


# -- conv --------------------------------------------------------------------

def test_conv_identity_1x1(f64, rng):
    x = T(rng.normal(size=(2, 3, 5, 5)))
    w = T(np.eye(3)[:, :, None, None])
    np.testing.assert_array_equal(F.conv2d(x, w).data, x.data)


def test_conv_all_ones_valid(f64):
    out = F.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), padding="valid")
    assert out.data.tolist() == [[[[9.0]]]]


def test_conv_zero_kernel(f64, rng):
    out = F.conv2d(T(rng.normal(size=(1, 2, 4, 4))), T(np.zeros((3, 2, 3, 3))))
    assert out.shape == (1, 3, 4, 4) and not out.data.any()


@pytest.mark.parametrize("H,k,s,pad", [(7, 3, 1, "valid"), (7, 3, 2, "valid"), (8, 5, 2, "same"), (9, 3, 2, "same"), (6, 1, 2, 0)])
def test_conv_output_size(f64, rng, H, k, s, pad):
    out = F.conv2d(T(rng.normal(size=(1, 2, H, H))), T(rng.normal(size=(4, 2, k, k))), stride=s, padding=pad)
    expect = (H - k) // s + 1 if pad in ("valid", 0) else math.ceil(H / s)
    assert out.shape == (1, 4, expect, expect)


def test_conv_matches_direct_loop(f64, rng):
    # direct sliding-window sum as an independent oracle
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = F.conv2d(T(x), T(w), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 6))
    for i in range(6):
        for j in range(6):
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", xp[:, :, i : i + 3, j : j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_errors(f64):
    with pytest.raises(ValueError):
        F.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        F.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 2, 2))))


def test_depthwise_identity_and_mask(f64, rng):
    x = T(rng.normal(size=(1, 2, 4, 4)))
    np.testing.assert_array_equal(F.depthwise_conv2d(x, T(np.ones((2, 1, 1, 1)))).data, x.data)
    w = np.zeros((2, 1, 3, 3))
    w[1, 0, 1, 1] = 1.0
    out = F.depthwise_conv2d(x, T(w)).data
    assert not out[:, 0].any()
    np.testing.assert_array_equal(out[:, 1], x.data[:, 1])


def test_depthwise_mean_kernel_constant(f64):
    out = F.depthwise_conv2d(T(np.full((1, 1, 5, 5), 2.5)), T(np.full((1, 1, 3, 3), 1 / 9))).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 2.5, rtol=1e-12)


# -- batchnorm ---------------------------------------------------------------

def test_batchnorm_eval_identity(f64, rng):
    x = T(rng.normal(size=(2, 3, 4, 4)))
    out = F.batchnorm2d(x, T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3), training=False, eps=0.0)
    np.testing.assert_array_equal(out.data, x.data)


def test_batchnorm_eval_gamma_zero(f64, rng):
    out = F.batchnorm2d(T(rng.normal(size=(2, 3, 2, 2))), T(np.zeros(3)), T([1.0, 2.0, 3.0]), np.zeros(3), np.ones(3), False)
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, 2.0, 3.0])[None, :, None, None], (2, 3, 2, 2)))


def test_batchnorm_train_formula(f64):
    x = np.array([3.0, 7.0, 3.0, 7.0]).reshape(1, 1, 2, 2)  # mean 5, var 4
    rm, rv = np.zeros(1), np.ones(1)
    out = F.batchnorm2d(T(x), T(np.ones(1)), T(np.zeros(1)), rm, rv, training=True)
    np.testing.assert_allclose(out.data, (x - 5) / np.sqrt(4 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(rm, [0.5])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 4])


# -- activations / softmax ---------------------------------------------------

def test_activation_values(f64):
    assert F.relu(T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert F.silu(T([0.0])).data[0] == 0.0
    assert F.sigmoid(T([0.0])).data[0] == 0.5
    assert abs(F.silu(T([1.0])).data[0] - 0.731059) < 1e-6
    assert abs(F.activation(T([1.0]), "silu").data[0] - 1 / (1 + math.exp(-1))) < 1e-15
    with pytest.raises(ValueError):
        F.activation(T([1.0]), "gelu")


def test_softmax_values(f64):
    np.testing.assert_array_equal(F.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    with mpmath.workdps(40):
        e = [mpmath.exp(v) for v in (1, 2, 3)]
        ref = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(F.softmax(T([1.0, 2.0, 3.0])).data, ref, rtol=1e-14)
    np.testing.assert_allclose(ref, [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_softmax_large_logits_stable(f64):
    p = F.softmax(T([1000.0, 1000.0, -1000.0])).data
    assert np.isfinite(p).all() and abs(p[0] - 0.5) < 1e-12


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    with default_dtype("float64"):
        p = F.softmax(T(x), axis=-1).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(F.softmax(T(x + c), axis=-1).data, p, atol=1e-6)


# -- pooling / dropout / upsample -------------------------------------------

def test_pooling(f64):
    assert F.global_avg_pool2d(T(np.full((1, 2, 3, 3), 4.0))).data.tolist() == [[4.0, 4.0]]
    assert F.max_pool2d(T([[[[1.0, 5.0], [3.0, 2.0]]]]), 2).data.item() == 5.0
    assert F.global_avg_pool2d(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 2.5
    with pytest.raises(ValueError):
        F.max_pool2d(T(np.ones((1, 1, 2, 2))), 3)


def test_dropout_identities(f64, rng):
    x = T(rng.normal(size=(4, 5)))
    assert F.dropout(x, 0.5, training=False) is x
    assert F.dropout(x, 0.0, training=True, rng=rng) is x
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, training=True, rng=rng)


def test_dropout_rate_and_determinism(f64):
    x = T(np.ones(100_000))
    a = F.dropout(x, 0.1, True, key_rng(0, "dropout")).data
    b = F.dropout(x, 0.1, True, key_rng(0, "dropout")).data
    np.testing.assert_array_equal(a, b)
    assert abs((a == 0).mean() - 0.1) < 0.005
    np.testing.assert_allclose(a[a != 0], 1 / 0.9)


def test_upsample(f64):
    x = T(np.arange(6.0).reshape(1, 2, 3))
    assert F.upsample_bilinear(x, 2, 3) is x
    np.testing.assert_allclose(F.upsample_bilinear(T(np.full((1, 2, 2), 3.0)), 7, 5).data, 3.0)
    np.testing.assert_allclose(F.upsample_bilinear(T([[[0.0, 1.0]]]), 1, 4).data, [[[0.0, 0.25, 0.75, 1.0]]])


# -- backward ----------------------------------------------------------------

def test_backward_sum_and_product(f64):
    x = T(np.arange(4.0), grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))
    a, b = T(3.0, grad=True), T(4.0, grad=True)
    (a * b).backward()
    assert (a.grad, b.grad) == (4.0, 3.0)


def test_backward_needs_scalar(f64):
    with pytest.raises(ValueError):
        T(np.ones(3), grad=True).backward()


def test_backward_accumulates_until_reset(f64):
    x = T(2.0, grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == 8.0
    x.zero_grad()
    (x * x).backward()
    assert x.grad == 4.0


def test_shared_subexpression_matches_tree(f64, rng):
    v = rng.normal(size=5)
    x = T(v, grad=True)
    s = (x * x).exp()
    (s * s + s).sum().backward()
    dag = x.grad
    x2 = T(v, grad=True)
    ((x2 * x2).exp() * (x2 * x2).exp() + (x2 * x2).exp()).sum().backward()
    np.testing.assert_allclose(dag, x2.grad, rtol=1e-13)


def test_no_grad_records_nothing(f64):
    x = T(1.0, grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y.op == "leaf"


def test_cce_softmax_finite_difference(f64, rng):
    W = T(rng.normal(size=(4, 3)), grad=True)
    x = T(rng.normal(size=(5, 4)))
    onehot = np.eye(3)[rng.integers(0, 3, 5)]
    f = lambda: -(T(onehot) * F.softmax(matmul(x, W), axis=-1).log()).sum() / 5
    assert grad_check(f, [W], eps=1e-6) < 1e-4


# -- grad_check harness ------------------------------------------------------

def test_gradcheck_quadratic(f64):
    x = T([1.0], grad=True)
    assert grad_check(lambda: (x * x).sum(), [x], eps=1e-5) < 1e-8


def test_gradcheck_conv_relu(f64, rng):
    x = T(rng.normal(size=(1, 2, 5, 5)))
    w = T(rng.normal(size=(3, 2, 3, 3)), grad=True)
    assert grad_check(lambda: F.relu(F.conv2d(x, w)).sum(), [w]) < 1e-4


def test_gradcheck_negative_control(f64, rng):
    x = T(rng.normal(size=4), grad=True)
    f = lambda: (x * x).sum()
    corrupted = [2 * x.data + 0.5]
    assert grad_check(f, [x], analytic=corrupted) > 1e-2


def test_gradcheck_refuses_float32():
    with default_dtype("float32"):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(RuntimeError):
            grad_check(lambda: x.sum(), [x])


# -- dtype switch ------------------------------------------------------------

def test_dtype_switch():
    before = get_dtype()
    with default_dtype("f64"):
        assert Tensor([1.0]).dtype == np.float64
    assert get_dtype() == before
    with pytest.raises(ValueError):
        set_dtype("int8")


def test_stack_concatenate_grads(f64):
    a, b = T([1.0, 2.0], grad=True), T([3.0], grad=True)
    (concatenate([a, b]) * T([1.0, 2.0, 3.0])).sum().backward()
    assert a.grad.tolist() == [1.0, 2.0] and b.grad.tolist() == [3.0]
    c = T([1.0, 1.0], grad=True)
    stack([c, c]).sum().backward()
    assert c.grad.tolist() == [2.0, 2.0]
