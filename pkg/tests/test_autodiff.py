import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from punctr import autodiff as ad
from punctr.autodiff import Tape, Tensor, backward, check_gradients, forward_primitive
from punctr.errors import ContractError, NumericError, ShapeError


def rng(seed=0):
    return np.random.default_rng(seed)


# --- forward values ---------------------------------------------------------


def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tape(), Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.values, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_logsumexp_direct_evaluation():
    # independent oracle: plain math on the same numbers
    expect = math.log(sum(math.exp(v) for v in (1.0, 2.0, 3.0)))
    out = ad.logsumexp(Tape(), Tensor([1.0, 2.0, 3.0]))
    assert out.item() == pytest.approx(expect, abs=1e-12)
    assert out.item() == pytest.approx(3.40760596, abs=1e-8)


def test_relu_definition():
    out = ad.relu(Tape(), Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.values, [0.0, 0.0, 2.0])


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6).map(np.array))
def test_softmax_rows_sum_to_one(row):
    mat = np.stack([row, row * 0.5 + 1.0])
    out = ad.softmax(Tape(), Tensor(mat))
    np.testing.assert_allclose(out.values.sum(axis=-1), 1.0, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_log_softmax_matches_log_of_softmax(seed):
    x = rng(seed).normal(size=(3, 5)) * 3
    ls = ad.log_softmax(Tape(), Tensor(x)).values
    sm = ad.softmax(Tape(), Tensor(x)).values
    np.testing.assert_allclose(ls, np.log(sm), atol=1e-10)


def test_layer_norm_centers_and_scales():
    # rows are scaled well above the 1e-6 epsilon floor so the unit-variance
    # check is not dominated by it
    x = rng(1).normal(size=(6, 16)) * 100.0
    out = ad.layer_norm(Tape(), Tensor(x)).values
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-8


def test_dropout_eval_is_identity():
    x = Tensor(rng(2).normal(size=(4, 3)))
    out = ad.dropout(Tape(), x, rate=0.5, train=False)
    assert out is x


def test_dropout_train_masks_and_rescales():
    x = Tensor(np.ones((2000,)))
    out = ad.dropout(Tape(seed=7), x, rate=0.25, train=True)
    kept = out.values != 0
    assert 0.6 < kept.mean() < 0.9
    np.testing.assert_allclose(out.values[kept], 1.0 / 0.75)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ContractError):
        ad.dropout(Tape(), Tensor([1.0]), rate=1.0, train=True)


def test_max_over_time_respects_mask():
    x = Tensor(np.array([[9.0, 9.0], [1.0, 1.0]]))
    out = ad.max_over_time(Tape(), x, np.array([False, True]))
    np.testing.assert_array_equal(out.values, [1.0, 1.0])
    with pytest.raises(ContractError):
        ad.max_over_time(Tape(), x, np.array([False, False]))


def test_embedding_lookup_and_range_error():
    table = Tensor(np.arange(12, dtype=float).reshape(4, 3))
    out = ad.embedding_lookup(Tape(), table, [2, 0])
    np.testing.assert_array_equal(out.values, [[6, 7, 8], [0, 1, 2]])
    with pytest.raises(ShapeError):
        ad.embedding_lookup(Tape(), table, [4])


def test_clip_values():
    out = ad.clip(Tape(), Tensor([-80.0, 3.0, 80.0]), -50.0, 50.0)
    np.testing.assert_array_equal(out.values, [-50.0, 3.0, 50.0])


# --- contracts and errors ---------------------------------------------------


def test_degenerate_shape_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match="3, 2"):
        ad.matmul(Tape(), Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))))


def test_nonfinite_output_raises_numeric_error():
    with pytest.raises(NumericError):
        ad.mul(Tape(), Tensor([1e300]), Tensor([1e300]))


def test_backward_requires_scalar_loss():
    tape = Tape()
    out = ad.add(tape, Tensor([1.0, 2.0], requires_grad=True), 1.0)
    with pytest.raises(ContractError):
        backward(tape, out)


def test_tape_reuse_rejected():
    tape = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(tape, ad.mul(tape, x, x))
    backward(tape, loss)
    with pytest.raises(ContractError):
        backward(tape, loss)


def test_forward_primitive_dispatch():
    out = forward_primitive(Tape(), "relu", [Tensor([-2.0, 2.0])])
    np.testing.assert_array_equal(out.values, [0.0, 2.0])
    with pytest.raises(ContractError):
        forward_primitive(Tape(), "conv2d", [Tensor([1.0])])


# --- backward ---------------------------------------------------------------


def test_backward_square_sum():
    tape = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(tape, ad.mul(tape, x, x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_logsumexp_of_zeros():
    tape = Tape()
    x = Tensor([0.0, 0.0], requires_grad=True)
    backward(tape, ad.logsumexp(tape, x))
    np.testing.assert_allclose(x.grad, [0.5, 0.5], atol=1e-15)


def test_unreachable_tensor_reads_zero_grad():
    tape = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    backward(tape, ad.sum_(tape, x))
    np.testing.assert_array_equal(y.grad, [0.0])


def test_backward_bitwise_repeatable():
    def run():
        tape = Tape(seed=11)
        x = Tensor(rng(3).normal(size=(4, 5)), requires_grad=True)
        h = ad.dropout(tape, ad.tanh(tape, x), rate=0.2, train=True)
        backward(tape, ad.sum_(tape, ad.mul(tape, h, h)))
        return x.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


# --- gradient checks --------------------------------------------------------


def test_check_gradients_linear_function_is_exact():
    err = check_gradients(lambda tape, t: ad.sum_(tape, t), Tensor(rng(4).uniform(-1, 1, size=4)))
    assert err < 1e-10


GRAD_CASES = {
    "add": lambda tape, t: ad.sum_(tape, ad.mul(tape, ad.add(tape, t, Tensor(rng(10).normal(size=(3, 4)))), t)),
    "add_broadcast": lambda tape, t: ad.sum_(tape, ad.mul(tape, ad.add(tape, t, Tensor(rng(11).normal(size=(4,)))), t)),
    "mul": lambda tape, t: ad.sum_(tape, ad.mul(tape, t, Tensor(rng(12).normal(size=(3, 4))))),
    "matmul": lambda tape, t: ad.sum_(tape, ad.matmul(tape, t, Tensor(rng(13).normal(size=(4, 2))))),
    "matmul_tb": lambda tape, t: ad.sum_(tape, ad.matmul(tape, t, Tensor(rng(14).normal(size=(5, 4))), transpose_b=True)),
    "matmul_batched": lambda tape, t: ad.sum_(
        tape, ad.matmul(tape, ad.reshape(tape, t, (2, 3, 2)), Tensor(rng(15).normal(size=(2, 2, 3))))
    ),
    "concat": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.concat(tape, t, Tensor(rng(16).normal(size=(3, 4))), axis=0),
                     Tensor(rng(17).normal(size=(6, 4))))
    ),
    "slice": lambda tape, t: ad.sum_(tape, ad.mul(tape, ad.slice_(tape, t, (slice(1, 3), slice(None))), 2.0)),
    "tanh": lambda tape, t: ad.sum_(tape, ad.tanh(tape, t)),
    "sigmoid": lambda tape, t: ad.sum_(tape, ad.mul(tape, ad.sigmoid(tape, t), Tensor(rng(18).normal(size=(3, 4))))),
    "relu": lambda tape, t: ad.sum_(tape, ad.mul(tape, ad.relu(tape, t), Tensor(rng(19).normal(size=(3, 4))))),
    "softmax": lambda tape, t: ad.sum_(tape, ad.mul(tape, ad.softmax(tape, t), Tensor(rng(20).normal(size=(3, 4))))),
    "log_softmax": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.log_softmax(tape, t), Tensor(rng(21).normal(size=(3, 4))))
    ),
    "logsumexp_axis": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.logsumexp(tape, t, axis=1), Tensor(rng(22).normal(size=(3,))))
    ),
    "logsumexp_all": lambda tape, t: ad.logsumexp(tape, t),
    "sum_axis": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.sum_(tape, t, axis=0), Tensor(rng(23).normal(size=(4,))))
    ),
    "max_over_time": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.max_over_time(tape, t, np.array([True, True, False])),
                     Tensor(rng(24).normal(size=(4,))))
    ),
    "dropout_frozen": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.dropout(tape, t, rate=0.3, train=True), Tensor(rng(25).normal(size=(3, 4))))
    ),
    "layer_norm": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.layer_norm(tape, t), Tensor(rng(26).normal(size=(3, 4))))
    ),
    "embedding_lookup": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.embedding_lookup(tape, t, np.array([0, 2, 2])),
                     Tensor(rng(27).normal(size=(3, 4))))
    ),
    "clip_inactive": lambda tape, t: ad.sum_(tape, ad.clip(tape, t, -50.0, 50.0)),
    "transpose": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.transpose(tape, t, (1, 0)), Tensor(rng(28).normal(size=(4, 3))))
    ),
    "take_time": lambda tape, t: ad.sum_(
        tape, ad.mul(tape, ad.take_time(tape, ad.reshape(tape, t, (2, 3, 2)),
                                        np.array([[2, 1, 0], [0, 0, 1]])),
                     Tensor(rng(29).normal(size=(2, 3, 2))))
    ),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients_match_finite_differences(name):
    x = Tensor(rng(5).normal(size=(3, 4)))
    err = check_gradients(GRAD_CASES[name], x, seed=99)
    assert err < 1e-6, f"{name}: max relative error {err}"


def test_composed_graph_gradient():
    def f(tape, t):
        h = ad.tanh(tape, ad.matmul(tape, t, Tensor(rng(30).normal(size=(4, 4)))))
        h = ad.layer_norm(tape, ad.add(tape, h, t))
        p = ad.softmax(tape, ad.matmul(tape, h, Tensor(rng(31).normal(size=(4, 3)))))
        return ad.sum_(tape, ad.mul(tape, p, Tensor(rng(32).normal(size=(3, 3)))))

    err = check_gradients(f, Tensor(rng(6).normal(size=(3, 4))))
    assert err < 1e-6
