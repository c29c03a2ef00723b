import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dilam.core import SGD, Parameter, Tensor, backward, default_dtype, ops, sgd_step
from dilam.errors import DimensionError, GraphError, NonFiniteError

from helpers import gradcheck, naive_conv2d, naive_linear, numeric_grad, primitive_instances


def rng(seed=0):
    return np.random.default_rng(seed)


# ----------------------------------------------------------------- conv / linear


def test_conv_identity_kernel():
    x = rng().random((1, 1, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv_zero_weight_gives_zero():
    x = rng().normal(size=(2, 3, 5, 5))
    out = ops.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_naive_loops(stride, pad):
    r = rng(1)
    x = r.normal(size=(1, 2, 5, 5)) if stride == 2 else r.normal(size=(1, 2, 4, 4))
    w = r.normal(size=(3, 2, 3, 3))
    b = r.normal(size=3)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride, pad), atol=1e-5)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)


def test_linear_identity_and_bias():
    x = rng().normal(size=(4, 3))
    out = ops.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))
    b = np.array([1.0, -2.0])
    out = ops.linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)).astype(np.float32))


def test_linear_matches_naive_and_rejects_mismatch():
    r = rng(2)
    x, w, b = r.normal(size=(5, 7)), r.normal(size=(3, 7)), r.normal(size=3)
    np.testing.assert_allclose(ops.linear(Tensor(x), Tensor(w), Tensor(b)).data, naive_linear(x, w, b), atol=1e-5)
    with pytest.raises(DimensionError):
        ops.linear(Tensor(x), Tensor(np.zeros((3, 6))), Tensor(b))


# ----------------------------------------------------------------- pointwise / losses


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_cross_entropy_uniform_logits():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.item() == pytest.approx(np.log(4), abs=1e-6)


def test_cross_entropy_errors():
    with pytest.raises(DimensionError):
        ops.softmax_cross_entropy(Tensor(np.zeros((0, 4))), [])
    with pytest.raises(IndexError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_is_stable_for_large_logits():
    loss = ops.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-6)


def test_softmax_gradient_matches_finite_differences():
    with default_dtype(np.float64):
        logits = rng(3).normal(size=(4, 5))
        labels = np.array([0, 2, 4, 1])
        t = Tensor(logits.copy(), requires_grad=True)
        backward(ops.softmax_cross_entropy(t, labels))
        (num,) = numeric_grad(lambda a: ops.softmax_cross_entropy(Tensor(a), labels).item(), [logits])
    np.testing.assert_allclose(t.grad, num, rtol=1e-4, atol=1e-9)


# ----------------------------------------------------------------- normalization


def test_norm_frozen_identity():
    x = rng().normal(size=(2, 3, 4, 4))
    out = ops.norm_forward(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), "frozen", np.zeros(3), np.ones(3))
    np.testing.assert_allclose(out.data, x, atol=1e-5 * np.abs(x).max() + 1e-6)


def test_norm_zero_gamma_gives_beta():
    beta = np.array([0.5, -1.0])
    out = ops.norm_forward(Tensor(rng().normal(size=(2, 2, 3, 3))), Tensor(np.zeros(2)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_norm_batch_mode_matches_direct_summation():
    with default_dtype(np.float64):
        x = rng(4).normal(size=(2, 2, 3, 3))
        gamma, beta = np.array([1.5, 0.5]), np.array([0.1, -0.2])
        out = ops.norm_forward(Tensor(x), Tensor(gamma), Tensor(beta), "batch", eps=1e-5).data
    expected = np.empty_like(x)
    for c in range(2):
        vals = x[:, c].ravel()
        m = sum(vals) / len(vals)
        v = sum((vals - m) ** 2) / len(vals)
        expected[:, c] = gamma[c] * (x[:, c] - m) / np.sqrt(v + 1e-5) + beta[c]
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_norm_rejects_negative_variance():
    with pytest.raises(ValueError):
        ops.norm_forward(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), "frozen",
                         np.zeros(1), -np.ones(1))


# ----------------------------------------------------------------- gradient sweep


@pytest.mark.parametrize("name", sorted(primitive_instances(0)))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(20):
        op, arrays = primitive_instances(seed)[name]
        assert gradcheck(op, arrays) < 1e-4, f"{name} seed {seed}"


# ----------------------------------------------------------------- backward contract


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(ops.sum(ops.power(x, 2)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ops.sum(ops.mul(x, x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_needs_scalar_and_finite():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(ops.mul(x, x))
    with pytest.raises(NonFiniteError):
        backward(ops.sum(ops.mul(x, Tensor([np.inf, 1.0]))))


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([3.0], requires_grad=True)
    backward(ops.sum(x))
    backward(ops.sum(ops.mul(x, 2.0)))
    np.testing.assert_array_equal(x.grad, [3.0])


# ----------------------------------------------------------------- optimizer


def test_sgd_plain_step():
    p = Parameter("w", Tensor([1.0], requires_grad=True))
    p.tensor.grad = np.array([2.0], dtype=np.float32)
    sgd_step([p], lr=0.1, momentum=0.0)
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad is None


def test_sgd_momentum_accumulates_velocity():
    with default_dtype(np.float64):
        p = Parameter("w", Tensor([1.0], requires_grad=True))
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.tensor.grad = np.array([2.0])
    opt.step()
    assert 1.0 - p.data[0] == pytest.approx(0.1 * 2)
    p.tensor.grad = np.array([2.0])
    opt.step()
    assert 1.0 - p.data[0] == pytest.approx(0.1 * 2 + 0.1 * (2 + 0.9 * 2))


def test_sgd_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        SGD([], lr=0.0)


def test_frozen_parameter_unchanged_after_many_steps():
    r = rng(5)
    frozen = Parameter("frozen", Tensor(r.normal(size=(3, 4))))
    live = Parameter("live", Tensor(r.normal(size=(3, 4)), requires_grad=True))
    before = frozen.data.copy()
    opt = SGD([frozen, live], lr=0.05, momentum=0.9)
    for _ in range(100):
        backward(ops.sum(ops.power(ops.mul(frozen.tensor, live.tensor), 2)))
        opt.step()
    assert frozen.grad is None
    assert frozen.data.tobytes() == before.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 5))
def test_masking_holds_for_arbitrary_losses(seed, steps):
    r = rng(seed)
    x = Tensor(r.normal(size=(2, 2, 4, 4)))
    w = Parameter("w", Tensor(r.normal(size=(2, 2, 3, 3))))
    g = Parameter("g", Tensor(r.normal(size=2), requires_grad=True))
    b = Parameter("b", Tensor(r.normal(size=2), requires_grad=True))
    before = w.data.tobytes()
    opt = SGD([w, g, b], lr=0.01, momentum=0.9)
    for _ in range(steps):
        h = ops.norm_forward(ops.conv2d(x, w.tensor, None, 1, 1), g.tensor, b.tensor, "batch")
        backward(ops.mean(ops.abs(ops.relu(h))))
        opt.step()
    assert w.data.tobytes() == before


def test_determinism_bitwise():
    def run():
        r = rng(7)
        w = Parameter("w", Tensor(r.normal(size=(4, 3, 3, 3)), requires_grad=True))
        x = Tensor(r.normal(size=(4, 3, 6, 6)))
        opt = SGD([w], lr=0.01, momentum=0.9)
        for _ in range(5):
            backward(ops.mean(ops.power(ops.conv2d(x, w.tensor, None, 1, 1), 2)))
            opt.step()
        return w.data.tobytes()

    assert run() == run()
