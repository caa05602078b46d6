import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raysurrogate import autodiff as ad
from raysurrogate.autodiff import Tensor, grad_check

RNG = np.random.default_rng(0)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_forward_examples():
    A = rand(4, 3)
    np.testing.assert_array_equal(ad.matmul(Tensor(A), Tensor(np.eye(3))).data, A)
    s = ad.softmax(Tensor(np.zeros((1, 2)))).data
    np.testing.assert_array_equal(s, [[0.5, 0.5]])
    assert np.allclose(ad.softmax(Tensor(rand(5, 7))).data.sum(axis=1), 1.0)
    assert ad.cross_entropy(Tensor(np.zeros((1, 3))), [1]).item() == pytest.approx(math.log(3))


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2, 4, 6])
    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (ad.tsum(y * 0.0) + 5.0).backward()
    np.testing.assert_array_equal(y.grad, [0, 0])


def test_grads_accumulate_on_shared_leaf():
    x = Tensor(np.array([2.0]), requires_grad=True)
    ad.tsum(x * x + x * 3.0).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_grad_check_square_is_exact():
    assert grad_check(lambda x: ad.tsum(x * x), Tensor(np.array([3.0]))) < 1e-8


W1, W2 = rand(5, 8, seed=1), rand(8, 3, seed=2)
LABELS = np.array([0, 2, 1, 1])

PRIMITIVES = {
    "add_broadcast": (lambda x: ad.tsum(ad.square(x + Tensor(rand(1, 3, seed=9)))), (4, 3)),
    "mul_broadcast": (lambda x: ad.tsum(x * Tensor(rand(4, 1, seed=8)) * x), (4, 3)),
    "div": (lambda x: ad.tsum(Tensor(rand(3, seed=3)) / (ad.square(x) + 1.0)), (3,)),
    "exp_log": (lambda x: ad.tsum(ad.log(ad.exp(x) + 2.0)), (2, 3)),
    "sqrt": (lambda x: ad.tsum(ad.sqrt(ad.square(x) + 0.5)), (5,)),
    "tanh_sigmoid": (lambda x: ad.tsum(ad.tanh(x) * ad.sigmoid(x)), (6,)),
    "gelu": (lambda x: ad.tsum(ad.gelu(x) * Tensor(rand(3, 4, seed=4))), (3, 4)),
    "matmul_batched": (lambda x: ad.tsum(ad.square(ad.matmul(x, Tensor(W1)))), (2, 3, 5)),
    "matmul_both": (lambda x: ad.tsum(ad.matmul(x, ad.swap_last(x))), (2, 3, 4)),
    "linear": (lambda x: ad.tsum(ad.gelu(ad.linear(x, Tensor(W1), Tensor(rand(8, seed=5))))), (4, 5)),
    "transpose_reshape": (lambda x: ad.tsum(ad.reshape(ad.transpose(x, (1, 0, 2)), (3, 8)) * Tensor(rand(3, 8))), (2, 3, 4)),
    "slice": (lambda x: ad.tsum(ad.square(x[:, 1:3])), (4, 5)),
    "fancy_index": (lambda x: ad.tsum(ad.square(ad.index(x, (np.array([0, 0, 2]), np.array([1, 1, 3]))))), (4, 5)),
    "concat_stack": (lambda x: ad.tsum(ad.square(ad.concat([x, ad.stack([x[0], x[1]], 0)], 0))), (2, 3)),
    "mean_axis": (lambda x: ad.tsum(ad.square(ad.mean(x, axis=1))), (3, 4)),
    "tmin": (lambda x: ad.tsum(ad.tmin(x, axis=1)), (3, 4)),
    "softmax": (lambda x: ad.tsum(ad.softmax(x) * Tensor(rand(3, 4, seed=6))), (3, 4)),
    "log_softmax": (lambda x: ad.tsum(ad.log_softmax(x) * Tensor(rand(3, 4, seed=7))), (3, 4)),
    "layer_norm_mse": (lambda x: ad.mse(ad.layer_norm(x, Tensor(rand(6, seed=2)), Tensor(rand(6, seed=3))), rand(4, 6)), (4, 6)),
    "embedding": (lambda x: ad.tsum(ad.square(ad.embedding(x, np.array([[0, 2], [2, 1]])))), (3, 4)),
    "cross_entropy_masked": (lambda x: ad.cross_entropy(x, LABELS, mask=np.array([1, 1, 0, 1.0])), (4, 3)),
    "l2_normalize": (lambda x: ad.tsum(ad.l2_normalize(x) * Tensor(rand(4, 3, seed=5))), (4, 3)),
    "angle_between": (lambda x: ad.tsum(ad.angle_between(ad.l2_normalize(x), rand(4, 3, seed=11) / 2)), (4, 3)),
    "clamp_where": (lambda x: ad.tsum(ad.where(x.data > 0, ad.clamp_min(x, 0.3), ad.square(x))), (5,)),
    "mlp": (lambda x: ad.cross_entropy(ad.matmul(ad.tanh(ad.matmul(x, Tensor(W1))), Tensor(W2)), LABELS), (4, 5)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    f, shape = PRIMITIVES[name]
    x = Tensor(rand(*shape, seed=hash(name) % 1000))
    if name == "tmin":
        x.data = np.arange(12, dtype=float).reshape(3, 4)[:, ::-1] * 0.37  # no ties
    if name == "clamp_where":
        x.data = np.array([-1.2, -0.4, 0.1, 0.8, 1.5])
    assert grad_check(f, x) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_composite_gradients_property(n, m, seed):
    w = rand(m, 3, seed=seed)
    c = rand(n, 3, seed=seed + 2)
    # a weighted readout: the plain sum of squares of a normalized row is constant
    f = lambda x: ad.tsum(ad.layer_norm(ad.matmul(ad.gelu(x), Tensor(w))) * Tensor(c))  # noqa: E731
    assert grad_check(f, Tensor(rand(n, m, seed=seed + 1))) < 1e-4


def test_layer_norm_then_mse_grad():
    f = lambda x: ad.mse(ad.layer_norm(x), rand(3, 5, seed=1))  # noqa: E731
    assert grad_check(f, Tensor(rand(3, 5))) < 1e-4


def test_adam_first_step_is_sign_scaled():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    st = ad.AdamState(lr=0.01)
    ad.adam_step(p, g, st)
    np.testing.assert_allclose(p["w"].data - np.array([1.0, -2.0, 0.5]), -0.01 * np.sign(g["w"]), rtol=1e-4)


def test_adam_zero_grad_barely_moves():
    p = {"w": Tensor(np.array([1.0, 2.0]))}
    st = ad.AdamState(lr=0.01)
    ad.adam_step(p, {"w": np.array([1.0, 1.0])}, st)
    before = p["w"].data.copy()
    m_before = st.m["w"].copy()
    ad.adam_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_allclose(st.m["w"], 0.9 * m_before)
    # the step is driven by the decayed first moment only; with no gradient it keeps decaying
    for _ in range(200):
        ad.adam_step(p, {"w": np.zeros(2)}, st)
    last = p["w"].data.copy()
    ad.adam_step(p, {"w": np.zeros(2)}, st)
    assert np.all(np.abs(p["w"].data - last) < 0.01 * 1e-6)
    assert np.all(np.abs(before - last) > 0)


def test_adam_reproducible():
    def run():
        p = {"w": Tensor(rand(4))}
        st = ad.AdamState(lr=0.1)
        for k in range(2):
            ad.adam_step(p, {"w": rand(4, seed=k)}, st)
        return p["w"].data

    assert np.array_equal(run(), run())


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 4.0])}
    assert ad.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(g["a"]) == pytest.approx(1.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(x * 2.0)
    assert not y.requires_grad


def test_shape_mismatch_raises():
    with pytest.raises((ad.ShapeError, ValueError)):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
