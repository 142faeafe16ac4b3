import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fetalplane import functional as F
from fetalplane.gradcheck import grad_check
from fetalplane.model import ModelConfig, build_model
from fetalplane.rng import key_rng
from fetalplane.tensor import Tensor
from fetalplane.training import (
    Adam,
    TrainConfig,
    TrainingError,
    adam_step,
    augment,
    cce_loss,
    one_hot,
    patient_split_indices,
    rotate,
    split_counts,
    stratified_split_indices,
    train_loop,
)

# per-class image totals and train/test sizes of the benchmark dataset
CLASS_SPLITS = [(711, 569, 142), (3092, 2474, 618), (1040, 832, 208), (1718, 1374, 344), (1626, 1301, 325), (4213, 3370, 843)]

STILL = dict(rotation=0.0, zoom=0.0, resize_jitter=0.0, hflip=False, vflip=False)


# -- loss --------------------------------------------------------------------

def test_cce_values(f64):
    assert cce_loss(Tensor([[0.0, 1.0]]), one_hot([1], 2)).item() == 0.0
    assert cce_loss(Tensor(np.full((3, 6), 1 / 6)), one_hot([0, 3, 5], 6)).item() == pytest.approx(math.log(6), abs=1e-12)
    assert cce_loss(Tensor([[0.7, 0.2, 0.1]]), one_hot([1], 3)).item() == pytest.approx(1.609438, abs=1e-6)
    assert np.isfinite(cce_loss(Tensor([[1.0, 0.0]]), one_hot([1], 2)).item())
    with pytest.raises(ValueError):
        cce_loss(Tensor(np.ones((2, 3)) / 3), one_hot([0], 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_cce_softmax_gradient_is_p_minus_y_over_n(seed):
    from fetalplane.tensor import default_dtype

    rng = np.random.default_rng(seed)
    with default_dtype("float64"):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        z = Tensor(rng.normal(size=(n, k)), requires_grad=True)
        y = one_hot(rng.integers(0, k, n), k)
        loss = cce_loss(F.softmax(z, axis=-1), y)
        assert loss.item() >= 0
        loss.backward()
        p = F.softmax(Tensor(z.data), axis=-1).data
        np.testing.assert_allclose(z.grad, (p - y) / n, atol=1e-14)
        z.grad = None
        assert grad_check(lambda: cce_loss(F.softmax(z, axis=-1), y), [z]) < 1e-6


# -- Adam --------------------------------------------------------------------

def adam_oracle(p0, grads, lr, b1, b2, eps):
    """Textbook Adam in 50-digit arithmetic."""
    with mpmath.workdps(50):
        p = [mpmath.mpf(v) for v in p0]
        m = [mpmath.mpf(0)] * len(p)
        v = [mpmath.mpf(0)] * len(p)
        b1, b2, lr, eps = (mpmath.mpf(x) for x in (b1, b2, lr, eps))
        trajectory = []
        for t, g in enumerate(grads, 1):
            g = [mpmath.mpf(x) for x in g]
            m = [b1 * mi + (1 - b1) * gi for mi, gi in zip(m, g)]
            v = [b2 * vi + (1 - b2) * gi**2 for vi, gi in zip(v, g)]
            p = [pi - lr * (mi / (1 - b1**t)) / (mpmath.sqrt(vi / (1 - b2**t)) + eps) for pi, mi, vi in zip(p, m, v)]
            trajectory.append([float(x) for x in p])
        return trajectory


def test_adam_matches_high_precision_oracle():
    p0 = np.array([0.3, -1.2])
    grads = [np.array([1.0, 0.5]), np.array([1.0, 0.5])]
    expect = adam_oracle(p0, grads, 0.1, 0.9, 0.999, 1e-8)
    params, state = [p0], {}
    for g, ref in zip(grads, expect):
        params, state = adam_step(params, [g], state, 0.1, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(params[0], ref, atol=1e-12, rtol=0)
    assert state["t"] == 2


def test_adam_zero_gradient_and_step_one_magnitude():
    p = np.array([1.0, 2.0, 3.0])
    new, _ = adam_step([p], [np.zeros(3)], {}, 0.01)
    np.testing.assert_array_equal(new[0], p)
    for scale in (1e-3, 1.0, 1e3):
        g = np.array([1.0, -2.0, 0.5]) * scale
        new, _ = adam_step([p], [g], {}, 0.01)
        np.testing.assert_allclose(new[0] - p, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_class_steps():
    w = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([w], lr=0.1)
    w.grad = np.array([1.0, 1.0])
    opt.step()
    assert opt.steps == 1 and np.all(w.data < 1)


# -- augmentation ------------------------------------------------------------

def test_augment_identity_when_disabled(rng):
    img = rng.random((1, 8, 8))
    np.testing.assert_array_equal(augment(img, key_rng(0, "a"), TrainConfig(**STILL)), img)


def test_flip_involution(rng):
    img = rng.random((1, 5, 6))
    once = img[..., ::-1]
    np.testing.assert_array_equal(once[..., ::-1], img)


def test_rotate_quarter_turn_permutes_pixels():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    # counter-clockwise: the top-right pixel moves to the top-left
    np.testing.assert_array_equal(rotate(img, 90.0), [[[2.0, 4.0], [1.0, 3.0]]])
    np.testing.assert_array_equal(rotate(img, 360.0), img)


def test_augment_deterministic_and_shape(rng):
    img = rng.random((1, 16, 16))
    cfg = TrainConfig()
    a = augment(img, key_rng(3, "augment", 0, 1), cfg)
    b = augment(img, key_rng(3, "augment", 0, 1), cfg)
    assert a.shape == img.shape
    np.testing.assert_array_equal(a, b)


# -- splitting ---------------------------------------------------------------

@pytest.mark.parametrize("n,train,test", CLASS_SPLITS)
def test_split_counts_reproduce_reference(n, train, test):
    assert split_counts(n, 0.8) == (train, test)


def test_stratified_split_reference_sizes():
    labels = np.concatenate([np.full(n, c) for c, (n, _, _) in enumerate(CLASS_SPLITS)])
    tr, te = stratified_split_indices(labels, 0.8, seed=0)
    assert [int((labels[tr] == c).sum()) for c in range(6)] == [t for _, t, _ in CLASS_SPLITS]
    assert [int((labels[te] == c).sum()) for c in range(6)] == [t for _, _, t in CLASS_SPLITS]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60), st.integers(0, 99))
def test_split_is_a_partition(labels, seed):
    labels = np.array(labels)
    tr, te = stratified_split_indices(labels, 0.8, seed)
    assert sorted(tr.tolist() + te.tolist()) == list(range(len(labels)))
    for c in set(labels.tolist()):
        n = int((labels == c).sum())
        assert abs(int((labels[tr] == c).sum()) - 0.8 * n) <= 1


def test_split_ten_and_seed_determinism():
    labels = np.zeros(10, int)
    for seed in range(5):
        tr, te = stratified_split_indices(labels, 0.8, seed)
        assert (len(tr), len(te)) == (8, 2)
    a, b = stratified_split_indices(labels, 0.8, 4), stratified_split_indices(labels, 0.8, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_patient_split_keeps_patients_whole():
    groups = np.repeat([f"p{i}" for i in range(20)], 5)
    tr, te = patient_split_indices(groups, 0.8, 0)
    assert not set(groups[tr]) & set(groups[te])
    assert len(te) == 20


# -- loop --------------------------------------------------------------------

def _tiny_data(n=10):
    rng = np.random.default_rng(0)
    return rng.random((n, 1, 64, 64)).astype(np.float32), rng.integers(0, 6, n)


def test_step_count_and_history():
    x, y = _tiny_data(10)
    m = build_model(ModelConfig(), 0)
    seen = []
    _, hist = train_loop(m, x, y, TrainConfig(epochs=1, batch_size=4, **STILL), [seen.append])
    assert hist[-1]["steps"] == 3 and seen == hist
    assert set(hist[0]) == {"epoch", "loss", "accuracy", "seconds", "steps"}
    assert not m.training


def test_zero_learning_rate_keeps_parameters():
    x, y = _tiny_data(6)
    m = build_model(ModelConfig(), 0)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    train_loop(m, x, y, TrainConfig(epochs=1, batch_size=3, learning_rate=0.0))
    assert all(np.array_equal(before[n], p.data) for n, p in m.named_parameters())


def test_training_is_bitwise_reproducible():
    x, y = _tiny_data(8)
    runs = []
    for _ in range(2):
        m = build_model(ModelConfig(), 3)
        _, hist = train_loop(m, x, y, TrainConfig(epochs=2, batch_size=4, seed=3))
        runs.append((m.state_dict(), [h["loss"] for h in hist]))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_non_finite_loss_is_reported():
    x, y = _tiny_data(4)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, step 1"):
        train_loop(build_model(ModelConfig(), 0), x, y, TrainConfig(epochs=1, batch_size=4, **STILL))


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(train_fraction=1.0), dict(batch_size=0), dict(split_mode="x")])
def test_invalid_train_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()
