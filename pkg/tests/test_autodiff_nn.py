import numpy as np
import pytest

from qpwgan.autodiff import Tensor, backward, concat, grad, no_grad
from qpwgan.checks import check_autodiff
from qpwgan.nn import (
    AdamState,
    Layer,
    MlpNetwork,
    adam_step,
    build_mlp,
    clip_weights,
    forward,
    grad_wrt_input,
    load_checkpoint,
    mnist_critic,
    mnist_generator,
    save_checkpoint,
    toy_mlp,
)
from qpwgan.rng import make_rng


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def linear_net(a, b=0.0):
    a = np.asarray(a, dtype=float)
    return MlpNetwork([Layer(Tensor(a[:, None], True), Tensor(np.array([b]), True))])


def test_sum_of_squares_gradient():
    w = Tensor(np.array([1.0, -2.0, 3.0]), True)
    (g,) = grad((w * w).sum(), [w])
    np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])


def test_constant_loss_has_zero_gradients():
    w = Tensor(np.ones(3), True)
    (g,) = grad(Tensor(4.0) + 0.0 * w.sum() * 0.0, [w])
    np.testing.assert_array_equal(g, 0.0)
    (g,) = grad(Tensor(4.0), [w])
    np.testing.assert_array_equal(g, 0.0)


def test_non_scalar_loss_rejected():
    w = Tensor(np.ones(3), True)
    with pytest.raises(ValueError):
        grad(w * 2.0, [w])


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: (a * b + a / (b * b + 1.0)).sum(),
        lambda a, b: (a - b).abs_pow(1.7).sum(),
        lambda a, b: (a @ b.T).tanh().sum(),
        lambda a, b: (a.leaky_relu(0.1) * b).mean(),
        lambda a, b: concat([a, b], axis=0).sum(axis=0).abs().sum(),
        lambda a, b: (a[1:, :] * b[:2, ::-1]).sum(),
        lambda a, b: (a.reshape(-1) ** 2).sum() + (b.T * b.T).sum(),
        lambda a, b: (a - b).min(axis=0)[0].sum() + (a * 2).sum(axis=1, keepdims=True).sum(),
    ],
)
def test_ops_match_finite_differences(fn):
    rng = make_rng(1)
    a_data = rng.normal(size=(3, 2)) + 0.1
    b_data = rng.normal(size=(3, 2)) + 0.3
    a, b = Tensor(a_data, True), Tensor(b_data, True)
    ga, gb = grad(fn(a, b), [a, b])

    def f():
        with no_grad():
            return fn(Tensor(a_data), Tensor(b_data)).item()

    np.testing.assert_allclose(ga, numeric_grad(f, a_data), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(f, b_data), rtol=1e-6, atol=1e-8)


def test_second_order_gradient():
    rng = make_rng(2)
    x_data = rng.normal(size=(4, 2))
    net = toy_mlp(2, 1, rng, hidden=5)
    net.layers[0].activation = "tanh"
    net.layers[1].activation = "tanh"

    def penalty():
        x = Tensor(x_data, True)
        (g,) = grad(forward(net, x).sum(), [x], create_graph=True)
        return ((g * g).sum(axis=1).abs_pow(0.5) - 1.0).abs_pow(2).mean()

    params = net.parameters()
    analytic = grad(penalty(), params)
    for p, g in zip(params, analytic):
        fd = numeric_grad(lambda: penalty().item(), p.data)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_subgradient_conventions():
    x = Tensor(np.array([0.0, 1.0, -1.0]), True)
    (g,) = grad(x.relu().sum(), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])
    (g,) = grad(x.abs().sum(), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, -1.0])
    (g,) = grad(x.abs_pow(0.5).sum(), [x])
    assert g[0] == 0.0 and np.all(np.isfinite(g))


def test_min_gradient_goes_to_first_minimizer():
    x = Tensor(np.array([[1.0, 2.0], [1.0, 0.5]]), True)
    vals, idx = x.min(axis=0)
    assert idx.tolist() == [0, 1]
    (g,) = grad(vals.sum(), [x])
    np.testing.assert_array_equal(g, [[1.0, 0.0], [0.0, 1.0]])


def test_backward_sets_grad():
    w = Tensor(np.array([3.0]), True)
    backward((w * w).sum(), [w])
    np.testing.assert_array_equal(w.grad, [6.0])


def test_random_mlp_gradients():
    result = check_autodiff(10, make_rng(3))
    assert result.passed, result.failures


def test_forward_examples():
    rng = make_rng(4)
    net = build_mlp([3, 4, 2], ["relu", "identity"], rng)
    for p in net.parameters():
        p.data[:] = 0.0
    np.testing.assert_array_equal(forward(net, rng.normal(size=(5, 3))).data, 0.0)
    ident = MlpNetwork([Layer(Tensor(np.eye(3), True), Tensor(np.zeros(3), True))])
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(forward(ident, x).data, x)
    net = toy_mlp(3, 1, rng)
    np.testing.assert_array_equal(forward(net, x, "train", rng).data, forward(net, x, "eval").data)


def test_forward_errors():
    rng = make_rng(5)
    net = toy_mlp(3, 1, rng)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 3)), mode="test")
    with pytest.raises(ValueError):
        build_mlp([2, 3], ["relu"], rng, dropouts=[1.0])
    with pytest.raises(ValueError):
        MlpNetwork([Layer(Tensor(np.ones((2, 3))), Tensor(np.ones(3))), Layer(Tensor(np.ones((4, 1))), Tensor(np.ones(1)))])


def test_dropout_expectation():
    rng = make_rng(6)
    net = build_mlp([2, 16, 1], ["relu", "identity"], rng, dropouts=[0.3, 0.0])
    x = rng.normal(size=(1, 2))
    draws = np.array([forward(net, x, "train", rng).data[0, 0] for _ in range(10_000)])
    expected = forward(net, x, "eval").data[0, 0]
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - expected) <= 3 * se


def test_dropout_train_needs_rng():
    net = build_mlp([2, 3, 1], ["relu", "identity"], make_rng(0), dropouts=[0.5, 0.0])
    with pytest.raises(ValueError):
        forward(net, np.zeros((1, 2)), "train")


def test_grad_wrt_input_examples():
    a = np.array([0.5, -2.0, 1.0])
    g = grad_wrt_input(linear_net(a, 3.0), make_rng(0).normal(size=(4, 3)))
    np.testing.assert_allclose(g, np.tile(a, (4, 1)))
    x = make_rng(1).normal(size=(5, 2))
    xt = Tensor(x, True)
    (g,) = grad(((xt * xt).sum(axis=1) * 0.5).sum(), [xt])
    np.testing.assert_allclose(g, x)
    with pytest.raises(ValueError):
        grad_wrt_input(toy_mlp(2, 2, make_rng(0)), x)


def test_grad_wrt_input_random_mlp():
    rng = make_rng(7)
    net = build_mlp([3, 8, 8, 1], ["tanh", "leaky_relu", "identity"], rng)
    x = rng.normal(size=(6, 3))
    g = grad_wrt_input(net, x)
    fd = numeric_grad(lambda: float(forward(net, x).data.sum()), x)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_adam_first_step_is_signed_lr():
    p = np.array([1.0, -1.0, 0.5])
    g = np.array([0.3, -2.0, 1e-3])
    state = AdamState.zeros_like([p])
    before = p.copy()
    adam_step([p], [g], state, lr=0.01)
    np.testing.assert_allclose(before - p, 0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, 2.0])
    state = AdamState.zeros_like([p])
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_second_step_not_larger():
    p = np.array([1.0, 2.0, -3.0])
    g = np.array([0.1, -0.5, 2.0])
    state = AdamState.zeros_like([p])
    x0 = p.copy()
    adam_step([p], [g], state, lr=0.01)
    x1 = p.copy()
    adam_step([p], [g], state, lr=0.01)
    assert np.all(np.abs(p - x1) <= np.abs(x1 - x0) + 1e-12)


def test_adam_scale_invariance():
    g = np.array([0.2, -0.7, 1.3])
    a, b = np.zeros(3), np.zeros(3)
    adam_step([a], [g], AdamState.zeros_like([a]), lr=1e-3)
    adam_step([b], [10 * g], AdamState.zeros_like([b]), lr=1e-3)
    assert np.max(np.abs(a - b)) < 1e-3 * 1e-6


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], AdamState.zeros_like([p]), lr=0.1)


def test_clip_weights():
    c = 0.01
    net = MlpNetwork([Layer(Tensor(np.array([[2 * c], [-3 * c], [0.5 * c]]), True), Tensor(np.array([0.0]), True))])
    clip_weights(net, c)
    np.testing.assert_allclose(net.layers[0].weight.data.ravel(), [c, -c, 0.5 * c])
    with pytest.raises(ValueError):
        clip_weights(net, 0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = make_rng(8)
    net = build_mlp([3, 5, 2], ["leaky_relu", "tanh"], rng, dropouts=[0.3, 0.0], slope=0.1)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    again = load_checkpoint(path)
    np.testing.assert_array_equal(again.get_flat(), net.get_flat())
    assert [(l.activation, l.slope, l.dropout) for l in again.layers] == [
        (l.activation, l.slope, l.dropout) for l in net.layers
    ]
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(forward(again, x).data, forward(net, x).data)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_mnist_architectures_shapes():
    rng = make_rng(9)
    critic = mnist_critic(rng)
    gen = mnist_generator(rng)
    assert [l.n_out for l in critic.layers] == [1024, 512, 256, 1]
    assert [l.dropout for l in critic.layers] == [0.3, 0.3, 0.3, 0.0]
    assert [l.n_out for l in gen.layers] == [256, 512, 1024, 784]
    assert forward(gen, rng.normal(size=(2, 128))).shape == (2, 784)


def test_determinism_same_seed():
    a = toy_mlp(2, 1, make_rng(10))
    b = toy_mlp(2, 1, make_rng(10))
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())
