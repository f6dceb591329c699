import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnistage import tensor as T
from omnistage.errors import NumericError, ShapeError, TokenIndexError
from omnistage.gradcheck import finite_difference_check, relative_error
from omnistage.optim import SGD, Adam, clip_grad_norm
from omnistage.tensor import Buffer, Param, Tape, Tensor, backward

from conftest import GRAD_TOL


def p64(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return Param(np.abs(x) + 0.5 if positive else x, dtype=np.float64)


UNARY = {
    "neg": T.neg, "square": T.square, "exp": T.exp, "tanh": T.tanh, "gelu": T.gelu,
    "log_softmax": lambda a: T.log_softmax(a, axis=-1), "softmax": lambda a: T.softmax(a, axis=0),
    "transpose": T.transpose, "reshape": lambda a: T.reshape(a, (-1,)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    a = p64(rng, 3, 4)
    w = rng.standard_normal(12)
    op = UNARY[name]
    err = finite_difference_check(lambda: T.tsum(T.reshape(op(a), (-1,)) * w), [a])
    assert err < GRAD_TOL


def test_log_and_relu_gradients(rng):
    a = p64(rng, 5, positive=True)
    assert finite_difference_check(lambda: T.tsum(T.log(a) * 1.3), [a]) < GRAD_TOL
    b = Param(np.array([-1.2, -0.3, 0.4, 2.0]), dtype=np.float64)
    assert finite_difference_check(lambda: T.tsum(T.square(T.relu(b))), [b]) < GRAD_TOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op, rng):
    a = p64(rng, 3, 4)
    b = p64(rng, 1, 4, positive=True)
    fn = getattr(T, op)
    w = rng.standard_normal((3, 4))
    assert finite_difference_check(lambda: T.tsum(fn(a, b) * w), [a, b]) < GRAD_TOL


def test_reduction_and_indexing_gradients(rng):
    a = p64(rng, 4, 5)
    w = rng.standard_normal((2, 5))

    def f():
        picked = T.take_rows(a, [3, 0, 3])
        top = T.getitem(a, slice(1, 3))
        return T.mean(picked) + T.tsum(top * w) + T.tsum(T.mean(a, axis=1, keepdims=True))

    assert finite_difference_check(f, [a]) < GRAD_TOL


def test_concat_pad_gradients(rng):
    a, b = p64(rng, 2, 3), p64(rng, 1, 3)
    w = rng.standard_normal((6, 3))
    assert finite_difference_check(lambda: T.tsum(T.pad_rows(T.concat([a, b]), 1, 2) * w), [a, b]) < GRAD_TOL


def test_matmul_gradients(rng):
    a, b = p64(rng, 2, 3, 4), p64(rng, 2, 4, 5)
    c = p64(rng, 4, 2)
    assert finite_difference_check(lambda: T.tsum(T.square(T.matmul(a, b))), [a, b]) < GRAD_TOL
    assert finite_difference_check(lambda: T.tsum(T.tanh(T.matmul(a, c))), [a, c]) < GRAD_TOL


def test_layer_norm_gradient(rng):
    x, g, b = p64(rng, 3, 6), p64(rng, 6), p64(rng, 6)
    w = rng.standard_normal((3, 6))
    assert finite_difference_check(lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b]) < GRAD_TOL


def test_cross_entropy_gradient_and_weights(rng):
    logits = p64(rng, 5, 7)
    targets = rng.integers(0, 7, 5)
    weights = np.array([1.0, 0.0, 2.0, 1.0, 0.5])
    assert finite_difference_check(lambda: T.softmax_cross_entropy(logits, targets, weights), [logits]) < GRAD_TOL
    # oracle: weighted mean of -log p
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect = -(weights * lp[np.arange(5), targets]).sum() / weights.sum()
    assert float(T.softmax_cross_entropy(logits, targets, weights).data) == pytest.approx(expect, abs=1e-12)


def test_cross_entropy_rejects_bad_ids(rng):
    with pytest.raises(TokenIndexError):
        T.softmax_cross_entropy(p64(rng, 2, 3), [0, 3])


def test_take_rows_out_of_range(rng):
    with pytest.raises(TokenIndexError):
        T.take_rows(p64(rng, 3, 2), [3])


def test_matmul_shape_error_names_shapes(rng):
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(p64(rng, 2, 3), p64(rng, 4, 5))


def test_straight_through_copies_gradient(rng):
    x = p64(rng, 4)
    value = np.round(x.data)
    with Tape() as tape:
        y = T.straight_through(x, value)
        loss = T.tsum(y * np.arange(4.0))
    np.testing.assert_array_equal(y.data, value)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.arange(4.0))


def test_stop_gradient_blocks(rng):
    x = p64(rng, 3)
    with Tape() as tape:
        loss = T.tsum(T.stop_gradient(x) * x)
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_needs_scalar(rng):
    x = p64(rng, 3)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_no_tape_records_nothing(rng):
    x = p64(rng, 3)
    y = T.exp(x)
    assert not y.requires_grad
    frozen = Param(np.ones(3), trainable=False)
    with Tape() as tape:
        T.exp(frozen)
    assert len(tape) == 0


def test_finite_check_and_gradcheck_guards(rng):
    with pytest.raises(NumericError):
        T.finite_check(Tensor(np.array([1.0, np.nan])))
    with pytest.raises(TypeError):
        finite_difference_check(lambda: T.tsum(Param(np.ones(2, np.float32))), [Param(np.ones(2, np.float32))])
    assert relative_error(1.0, 1.0) == 0.0


def test_param_assign_shape_and_buffer_frozen():
    p = Param(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        p.assign(np.zeros(3))
    b = Buffer(np.zeros(2))
    b.trainable = True
    assert not b.trainable


def test_frozen_param_unchanged_by_optimizers(rng):
    for cls in (SGD, Adam):
        live, frozen = p64(rng, 3), p64(rng, 3)
        frozen.trainable = False
        before = frozen.data.tobytes()
        opt = cls([live, frozen], lr=0.1)
        for _ in range(3):
            live.grad[:] = 1.0
            frozen.grad[:] = 1.0
            opt.step()
        assert frozen.data.tobytes() == before
        assert live.data.tobytes() != before


def test_sgd_momentum_update_rule():
    p = Param(np.array([1.0]), dtype=np.float64)
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad[:] = 2.0
    opt.step()  # v = 2, p = 1 - 0.2
    p.grad[:] = 2.0
    opt.step()  # v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38
    assert p.data[0] == pytest.approx(0.42, abs=1e-12)


def test_lr_zero_is_bit_identical(rng):
    p = p64(rng, 4)
    before = p.data.tobytes()
    for cls in (SGD, Adam):
        opt = cls([p], lr=0.0)
        p.grad[:] = 3.0
        opt.step()
        assert p.data.tobytes() == before


def test_clip_grad_norm():
    p = Param(np.zeros(2), dtype=np.float64)
    p.grad[:] = [3.0, 4.0]
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.data())
def test_unbroadcast_sums_back_to_shape(shape, data):
    shape = tuple(shape)
    target = tuple(data.draw(st.sampled_from([1, n])) for n in shape)
    g = np.ones((2,) + shape)
    out = T._unbroadcast(g, target)
    assert out.shape == target
    assert out.sum() == g.sum()
