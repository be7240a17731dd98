"""Tests for the tensor core: backward rules, tape lifecycle, loss and optimiser."""

import numpy as np
import pytest

from app.services.errors import InvalidInputError, NumericFailureError
from app.services.numerics import (
    AdamState,
    MissingGradError,
    Module,
    NoTapeError,
    ShapeMismatchError,
    Tape,
    TapeConsumedError,
    Tensor,
    adam_step,
    adaptive_maxpool2d,
    backward,
    batchnorm2d,
    bce_loss,
    concat,
    conv2d,
    global_avgpool,
    gradient_check,
    layernorm,
    linear,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    sigmoid,
    softmax,
    split,
    sum as tsum,
    transpose,
)

TOL = 1e-5


def param(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights); random weights keep symmetric ops honest."""
    return tsum(mul(out, Tensor(weights)))


# ============================================================================
# Backward rules against finite differences
# ============================================================================

def test_square_sum_gradient_is_2x():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape():
        loss = tsum(mul(x, x))
    backward(loss)
    assert np.allclose(x.grad, [2.0, -4.0, 6.0])


def test_elementwise_and_matmul_gradients(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 5)
    c = param(rng, 5)
    w = rng.standard_normal((3, 5))
    err = gradient_check(lambda: weighted(sigmoid(matmul(a, b) + c), w), [a, b, c])
    assert err <= TOL


def test_broadcast_gradients_are_summed(rng):
    a, b = param(rng, 2, 3), param(rng, 1, 3)
    w = rng.standard_normal((2, 3))
    assert gradient_check(lambda: weighted(mul(a, b) - b, w), [a, b]) <= TOL


def test_softmax_gradient(rng):
    x = param(rng, 4, 6)
    w = rng.standard_normal((4, 6))
    assert gradient_check(lambda: weighted(softmax(x, axis=-1), w), [x]) <= TOL
    assert np.allclose(softmax(x).data.sum(axis=-1), 1.0)


def test_softmax_is_stable_for_large_logits():
    y = softmax(Tensor([[1000.0, 1000.0, -1000.0]])).data
    assert np.all(np.isfinite(y))
    assert np.allclose(y, [[0.5, 0.5, 0.0]])


def test_shape_op_gradients(rng):
    x = param(rng, 2, 3, 4)
    w = rng.standard_normal((4, 2, 3))

    def fn():
        pieces = split(x, [1, 2], axis=1)
        joined = concat([pieces[1], pieces[0]], axis=1)
        return weighted(transpose(relu(joined), (2, 0, 1)), w)

    assert gradient_check(fn, [x]) <= TOL


def test_linear_gradient(rng):
    x, weight, bias = param(rng, 5, 3), param(rng, 3, 2), param(rng, 2)
    w = rng.standard_normal((5, 2))
    assert gradient_check(lambda: weighted(linear(x, weight, bias), w), [x, weight, bias]) <= TOL


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradient(rng, stride, padding):
    x, weight, bias = param(rng, 2, 3, 6, 5), param(rng, 4, 3, 3, 3), param(rng, 4)
    out_shape = conv2d(x, weight, bias, stride, padding).shape
    w = rng.standard_normal(out_shape)
    fn = lambda: weighted(conv2d(x, weight, bias, stride, padding), w)  # noqa: E731
    assert gradient_check(fn, [x, weight, bias], max_coords=40) <= TOL


def test_conv2d_matches_direct_loop(rng):
    x, weight = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(weight), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                expected[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * weight[o])
    assert np.allclose(out, expected, atol=1e-12)


def test_pooling_gradients(rng):
    x = param(rng, 2, 3, 7, 6)
    w1 = rng.standard_normal((2, 3, 3, 3))
    w2 = rng.standard_normal((2, 3, 3, 4))
    w3 = rng.standard_normal((2, 3))
    assert gradient_check(lambda: weighted(maxpool2d(x, 2), w1), [x]) <= TOL
    assert gradient_check(lambda: weighted(adaptive_maxpool2d(x, (3, 4)), w2), [x]) <= TOL
    assert gradient_check(lambda: weighted(global_avgpool(x), w3), [x]) <= TOL


def test_adaptive_maxpool_covers_every_row_and_column():
    x = Tensor(np.arange(5 * 7, dtype=float).reshape(1, 1, 5, 7))
    out = adaptive_maxpool2d(x, (2, 3)).data
    assert out.shape == (1, 1, 2, 3)
    assert out[0, 0, -1, -1] == 34.0


def test_batchnorm_training_gradient_and_running_stats(rng):
    x, gamma, beta = param(rng, 4, 3, 2, 2), param(rng, 3), param(rng, 3)
    w = rng.standard_normal((4, 3, 2, 2))

    def fn():
        return weighted(batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=True), w)

    assert gradient_check(fn, [x, gamma, beta]) <= 1e-5

    running_mean, running_var = np.zeros(3), np.ones(3)
    batchnorm2d(x, gamma, beta, running_mean, running_var, training=True)
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3), ddof=1)
    assert np.allclose(running_mean, 0.1 * mu)
    assert np.allclose(running_var, 0.9 + 0.1 * var)


def test_batchnorm_eval_uses_running_stats(rng):
    x = Tensor(rng.standard_normal((2, 2, 3, 3)))
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = batchnorm2d(x, gamma, beta, np.array([1.0, -1.0]), np.array([4.0, 1.0]), training=False, eps=0.0)
    assert np.allclose(out.data[:, 0], (x.data[:, 0] - 1.0) / 2.0)
    assert np.allclose(out.data[:, 1], x.data[:, 1] + 1.0)


def test_layernorm_gradient(rng):
    x, gamma, beta = param(rng, 3, 4, 2), param(rng, 4), param(rng, 4)
    w = rng.standard_normal((3, 4, 2))
    assert gradient_check(lambda: weighted(layernorm(x, gamma, beta), w), [x, gamma, beta]) <= 1e-5


def test_shape_mismatch_is_invalid_input():
    with pytest.raises(ShapeMismatchError) as info:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert isinstance(info.value, InvalidInputError)
    with pytest.raises(ShapeMismatchError):
        mul(Tensor(np.ones(3)), Tensor(np.ones(4)))


# ============================================================================
# Tape lifecycle
# ============================================================================

def test_backward_twice_on_one_tape_fails():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    backward(loss)
    with pytest.raises(TapeConsumedError) as info:
        backward(loss)
    assert isinstance(info.value, NumericFailureError)
    assert tape.consumed


def test_backward_without_tape_fails():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tsum(x)
    with pytest.raises(NoTapeError):
        backward(loss)


def test_ops_outside_a_tape_do_not_record():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        pass
    tsum(x)
    assert len(tape) == 0


def test_leaf_gradients_accumulate_across_uses():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = tsum(x + x + mul(x, 2.0))
    backward(loss)
    assert np.allclose(x.grad, [4.0])


def test_backward_needs_a_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = mul(x, x)
    with pytest.raises(ShapeMismatchError):
        backward(y)


# ============================================================================
# Loss and optimiser
# ============================================================================

def test_bce_values():
    assert bce_loss(Tensor([0.0]), [1]).item() == pytest.approx(np.log(2.0))
    assert bce_loss(Tensor([20.0]), [1]).item() == pytest.approx(2.06e-9, rel=0.01)
    assert np.isfinite(bce_loss(Tensor([-1000.0, 1000.0]), [1, 0]).item())


def test_bce_gradient_and_label_check(rng):
    z = param(rng, 6)
    y = np.array([0, 1, 1, 0, 1, 0])
    assert gradient_check(lambda: bce_loss(z, y), [z]) <= TOL
    with pytest.raises(InvalidInputError):
        bce_loss(Tensor([0.0, 0.0]), [0, 2])
    with pytest.raises(ShapeMismatchError):
        bce_loss(Tensor([0.0, 0.0]), [0])


def test_adam_first_step_moves_by_lr():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([1.0])
    adam_step({"w": w}, AdamState(lr=0.1, weight_decay=0.0))
    assert w.data[0] == pytest.approx(0.9, abs=1e-6)
    assert np.array_equal(w.grad, [0.0])


def test_adam_weight_decay_shrinks_before_the_step():
    w = Tensor([2.0], requires_grad=True)
    w.grad = np.array([0.0])
    adam_step({"w": w}, AdamState(lr=0.1, weight_decay=0.5))
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_requires_gradients():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(MissingGradError):
        adam_step({"w": w}, AdamState())


def test_adam_minimises_a_quadratic():
    w = Tensor([5.0, -3.0], requires_grad=True)
    state = AdamState(lr=0.1, weight_decay=0.0)
    for _ in range(300):
        with Tape():
            loss = tsum(mul(w, w))
        backward(loss)
        adam_step({"w": w}, state)
    assert np.all(np.abs(w.data) < 0.05)


# ============================================================================
# Module container
# ============================================================================

class _Pair(Module):
    def __init__(self):
        super().__init__()
        self.weight = Tensor(np.ones((2, 2)), requires_grad=True)
        self.register_buffer("count", np.zeros(1))


class _Outer(Module):
    def __init__(self):
        super().__init__()
        self.first = _Pair()
        self.scale = Tensor(np.ones(1), requires_grad=True)


def test_module_names_state_and_modes():
    m = _Outer()
    assert list(m.parameters()) == ["scale", "first.weight"]
    assert set(m.state_dict()) == {"scale", "first.weight", "first.count"}

    m.load_state_dict({"scale": [2.0], "first.weight": np.full((2, 2), 3.0), "first.count": [7.0]})
    assert m.scale.data[0] == 2.0
    assert m.first.count[0] == 7.0

    with pytest.raises(ShapeMismatchError):
        m.load_state_dict({"scale": [2.0], "first.weight": np.ones((3, 2)), "first.count": [0.0]})
    with pytest.raises(ShapeMismatchError):
        m.load_state_dict({"scale": [2.0]})

    m.eval()
    assert not m.first.training
    m.train()
    assert m.first.training


def test_mean_over_axes():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        loss = tsum(mean(x, axis=1))
    backward(loss)
    assert np.allclose(x.grad, np.full((2, 3), 1.0 / 3.0))


def test_concat_then_split_is_exact(rng):
    parts = [Tensor(rng.standard_normal((2, k, 3))) for k in (1, 4, 2)]
    back = split(concat(parts, axis=1), [1, 4, 2], axis=1)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(parts, back))
