import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foleyflow import gradcheck
from foleyflow import tensor as T
from foleyflow.errors import ContractError, EmptyInputError, NumericError, ShapeError
from foleyflow.rng import Rng
from foleyflow.tensor import Tensor


def test_matmul_identity_and_scalar():
    b = Rng(1).normal((3, 5))
    assert np.array_equal(T.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b)).data, b)
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = Rng(2)
    a, b = rng.normal((7, 5)), rng.normal((5, 4))
    ref = np.zeros((7, 4))
    for i in range(7):
        for j in range(4):
            for k in range(5):
                ref[i, j] += float(a[i, k]) * float(b[k, j])
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - ref)) < 1e-6


def test_matmul_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_attention_single_key_returns_v():
    rng = Rng(3)
    q, k, v = rng.normal((2, 1, 3)), rng.normal((2, 1, 3)), rng.normal((2, 1, 3))
    assert np.array_equal(T.attention(Tensor(q), Tensor(k), Tensor(v)).data, v)


def test_attention_uniform_scores_give_mean_of_v():
    v = Rng(4).normal((1, 5, 3))
    q = np.zeros((1, 5, 3), np.float32)
    out = T.attention(Tensor(q), Tensor(Rng(5).normal((1, 5, 3))), Tensor(v)).data
    assert np.allclose(out, v.mean(axis=1, keepdims=True).repeat(5, axis=1), atol=1e-6)


def test_attention_matches_explicit_softmax():
    rng = Rng(6)
    q, k, v = (rng.normal((2, 4, 3)).astype(np.float64) for _ in range(3))
    s = q @ k.transpose(0, 2, 1) / math.sqrt(3)
    e = np.exp(s)
    ref = (e / e.sum(-1, keepdims=True)) @ v
    out = T.attention(Tensor(q.astype(np.float32)), Tensor(k.astype(np.float32)), Tensor(v.astype(np.float32)))
    assert np.max(np.abs(out.data - ref)) < 1e-6


def test_attention_rejects_empty():
    with pytest.raises(EmptyInputError):
        T.attention(Tensor(np.zeros((1, 3, 0))), Tensor(np.zeros((1, 3, 0))), Tensor(np.zeros((1, 3, 0))))
    with pytest.raises(EmptyInputError):
        T.attention(Tensor(np.zeros((1, 0, 2))), Tensor(np.zeros((1, 0, 2))), Tensor(np.zeros((1, 0, 2))))


def test_attention_is_stable_for_large_scores():
    q = np.full((1, 2, 2), 1e4, np.float32)
    out = T.attention(Tensor(q), Tensor(q), Tensor(np.ones((1, 2, 2), np.float32)))
    assert np.all(np.isfinite(out.data))


def test_modulated_layer_norm_zero_modulation_is_layer_norm():
    x = Rng(7).normal((5, 6)) * 3 + 2
    out = T.modulated_layer_norm(Tensor(x), np.zeros(6, np.float32), np.zeros(6, np.float32)).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)


def test_modulated_layer_norm_constant_row_gives_shift():
    shift = Rng(8).normal((4,))
    out = T.modulated_layer_norm(Tensor(np.full((2, 4), 3.5, np.float32)), Rng(9).normal((4,)), shift).data
    assert np.array_equal(out, np.broadcast_to(shift, (2, 4)))


def test_layer_norm_variance_matches_two_pass_oracle():
    x = Rng(10).normal((3, 64)).astype(np.float64) * 2.5 + 1
    out = T.layer_norm(Tensor(x)).data
    for row in out:
        m = sum(row) / len(row)
        var = sum((r - m) ** 2 for r in row) / len(row)
        assert abs(var - 1) < 1e-4


def test_backward_sum_of_squares():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x * x))
    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_backward_product_rule():
    a, b = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
    T.backward(a * b)
    assert (float(a.grad), float(b.grad)) == (3.0, 2.0)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2)


def test_backward_accumulates_over_shared_inputs():
    x = Tensor([1.5], requires_grad=True)
    y = x * x + x * 3.0 + T.exp(x)
    T.backward(T.sum(y))
    assert np.allclose(x.grad, 2 * 1.5 + 3 + math.exp(1.5))


def test_backward_grads_match_value_shapes():
    a = Tensor(Rng(11).normal((2, 3, 4)), requires_grad=True)
    w = Tensor(Rng(12).normal((4, 5)), requires_grad=True)
    h = T.gelu(T.linear(a, w, Tensor(np.zeros(5, np.float32), requires_grad=True)))
    loss = T.mean(T.softmax(h) * h)
    grads = T.backward(loss)
    for node in (a, w, h, loss):
        assert grads[node.id].shape == node.shape


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad and y.parents == ()


@pytest.mark.parametrize("name", gradcheck.PRIMITIVES)
def test_primitive_gradients_match_finite_differences(name):
    assert gradcheck.check_primitive(name, seeds=20) < gradcheck.PRIMITIVE_TOL


def test_fault_injection_is_detected():
    assert gradcheck.check_primitive("matmul", seeds=2, fault=1.01) > gradcheck.PRIMITIVE_TOL


def test_first_nonfinite_reports_index():
    x = np.zeros((2, 3), np.float32)
    assert T.first_nonfinite(x) is None
    x[1, 1] = np.nan
    assert T.first_nonfinite(x) == 4
    with pytest.raises(NumericError, match="index 4"):
        T.assert_finite(Tensor(x), "x")


def test_identical_ops_are_bit_identical():
    def run():
        rng = Rng(13)
        a = Tensor(rng.normal((6, 6)), requires_grad=True)
        T.backward(T.sum(T.tanh(T.matmul(a, a)) * 1.5))
        return a.grad.tobytes()

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 32))
def test_sum_gradient_is_ones(shape, seed):
    x = Tensor(Rng(seed).normal(tuple(shape)), requires_grad=True)
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, np.ones(shape, np.float32))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    out = T.softmax(Tensor(Rng(seed).normal((rows, cols)) * 30)).data
    assert np.allclose(out.sum(axis=-1), 1, atol=1e-6)
