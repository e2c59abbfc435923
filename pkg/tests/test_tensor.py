import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tess import tensor as T
from tess.tensor import Tensor, finite_diff_check

from gradcases import encoder_errors, primitive_cases


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_hand_example():
    a = Tensor([[1, 2], [3, 4]])
    b = Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 3)))
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(3))).data, a.data)
    z = T.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.normal(size=(3, 4))))
    np.testing.assert_array_equal(z.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_agrees_with_triple_loop_on_100_shapes():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m, k, n = rng.integers(1, 7, size=3)
        a = rng.normal(size=(m, k)).astype(np.float32)
        b = rng.normal(size=(k, n)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-5, atol=1e-6)


def test_batched_matmul_broadcasts_weight():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 5)))
    out = T.matmul(x, w).data
    for i in range(2):
        np.testing.assert_allclose(out[i], naive_matmul(x.data[i], w.data), rtol=1e-5)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75],
                               rtol=1e-6)
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_sums_to_one_on_1000_random_inputs():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        scale = 1e3 if rng.random() < 0.5 else 1.0
        x = rng.normal(size=n) * scale
        out = T.softmax(Tensor(x)).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-6


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariant(xs, c):
    x = np.array(xs, dtype=np.float64)
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data,
                               atol=1e-9)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_slice_is_zero():
    x = Tensor(np.full((2, 5), 3.0))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_unit_slice_passes_through():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)


def test_layer_norm_statistics_on_768_slice(float64):
    x = np.random.default_rng(4).normal(3.0, 5.0, size=768)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(768)), Tensor(np.zeros(768))).data
    assert abs(out.mean()) <= 1e-6
    assert abs(out.var() - 1.0) < 1e-4


def test_layer_norm_rejects_bad_gamma():
    with pytest.raises(T.ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- gelu

GELU_ONE = 0.841191990608276704781995777045  # 30-digit mpmath evaluation of the tanh form


def test_gelu_values(float64):
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    assert abs(T.gelu(Tensor([1.0])).data[0] - GELU_ONE) < 1e-12


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_is_log_v():
    v = 7
    loss = T.cross_entropy(Tensor(np.zeros((3, v))), [0, 3, 6])
    assert abs(loss.item() - math.log(v)) < 1e-6


def test_cross_entropy_confident_is_near_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 100.0
    assert T.cross_entropy(Tensor(logits), [2]).item() < 1e-12


def test_cross_entropy_ignore_matches_single_position():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 5))
    both = T.cross_entropy(Tensor(logits), [3, -100]).item()
    single = T.cross_entropy(Tensor(logits[:1]), [3]).item()
    assert both == pytest.approx(single, rel=1e-7)


def test_cross_entropy_all_ignored_flags_and_returns_zero():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with pytest.warns(RuntimeWarning):
        loss = T.cross_entropy(x, [-100, -100])
    assert loss.item() == 0.0 and loss.all_ignored
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))


def test_cross_entropy_out_of_range_label():
    with pytest.raises(ValueError, match="label 5"):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [5])


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_accumulates_two_references():
    x = Tensor([1.5, -2.0, 0.5], requires_grad=True)
    a = x  # two references to one tensor
    b = x
    T.backward(T.mul(a, b).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar_and_repeat():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0)
    loss = (x * x).sum()
    T.backward(loss)
    with pytest.raises(RuntimeError, match="already"):
        T.backward(loss)


def test_non_participating_tensor_has_no_grad():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([2.0], requires_grad=True)
    T.backward((x * 3.0).sum())
    assert unused.grad is None


def test_grad_tape_visits_each_node_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + y).sum()
    tape = T.GradTape(z)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids)) == 4  # x, y, y+y, sum


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


# ---------------------------------------------------------------- finite differences

def test_fd_linear_is_exact(float64):
    x = Tensor(np.random.default_rng(6).normal(size=10))
    assert finite_diff_check(lambda t: t.sum(), x) < 1e-10


def test_fd_softmax_pick(float64):
    x = Tensor(np.random.default_rng(7).normal(size=8))
    assert finite_diff_check(lambda t: T.softmax(t)[3], x) < 1e-6


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_fd_every_primitive(name, float64):
    shape, f = primitive_cases()[name]
    x = Tensor(np.random.default_rng(8).normal(size=shape))
    assert finite_diff_check(f, x) < 1e-4


def test_fd_end_to_end_encoder(float64):
    errors = encoder_errors(seed=3)
    assert max(errors.values()) < 1e-4, max(errors, key=errors.get)


def test_fd_catches_wrong_backward(float64):
    def bad_square(t):
        # claims d(t^2)/dt = 2.001 t
        return T._make(t.data ** 2, (t,), lambda g: (g * 2.001 * t.data,), "bad_square")

    x = Tensor(np.array([0.3, -1.2, 2.0]))
    assert finite_diff_check(lambda t: bad_square(t).sum(), x) > 1e-4
    tiny = Tensor(np.array([1e-3]))
    assert finite_diff_check(lambda t: bad_square(t).sum(), tiny) > 1e-4


def test_dropout_scales_and_masks():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((1000,)), requires_grad=True)
    y = T.dropout(x, 0.1, rng, training=True)
    kept = y.data > 0
    np.testing.assert_allclose(y.data[kept], 1 / 0.9, rtol=1e-6)
    assert 0.85 < kept.mean() < 0.95
    assert T.dropout(x, 0.1, None, training=False) is x


def test_float32_default_and_float64_mode():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() is np.float32
