import numpy as np
import pytest

from pqkd.errors import ConfigurationError, DataError, UsageError
from pqkd.models import build_teacher
from pqkd.nn import (
    AdamState,
    Tensor,
    adam_step,
    check_gradients,
    conv2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    kernel_contract,
    linear,
    log_softmax,
    maxpool2x2,
    relu,
)

SEEDS = range(20)
TOL = 1e-4


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(out, rng_seed=1234):
    # a random linear functional makes every output entry matter
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * w).sum()


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_reduction_grads(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 4), param(rng, 4)
    p = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    assert check_gradients(lambda: weighted_sum(a * b + a - b), [a, b]) <= TOL
    assert check_gradients(lambda: weighted_sum(p**1.5), [p]) <= TOL
    assert check_gradients(lambda: weighted_sum(a.sum(axis=0)) + a.mean(), [a]) <= TOL
    assert check_gradients(lambda: weighted_sum(a.reshape(2, 6)), [a]) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_linear_grads(seed):
    rng = np.random.default_rng(seed)
    a, b, v = param(rng, 3, 5), param(rng, 5, 2), param(rng, 5)
    assert check_gradients(lambda: weighted_sum(a @ b), [a, b]) <= TOL
    assert check_gradients(lambda: weighted_sum(a @ v), [a, v]) <= TOL
    x, w, bias = param(rng, 4, 5), param(rng, 3, 5), param(rng, 3)
    assert check_gradients(lambda: weighted_sum(linear(x, w, bias)), [x, w, bias]) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grads(seed):
    rng = np.random.default_rng(seed)
    k = (1, 3, 5)[seed % 3]
    x, w, b = param(rng, 2, 2, 6, 6), param(rng, 3, 2, k, k), param(rng, 3)
    pad = seed % 3
    assert check_gradients(lambda: weighted_sum(conv2d(x, w, b, padding=pad)), [x, w, b]) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_activation_pool_grads(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 3, 5, 4)
    assert check_gradients(lambda: weighted_sum(relu(x)), [x]) <= TOL
    assert check_gradients(lambda: weighted_sum(maxpool2x2(x)), [x]) <= TOL
    assert check_gradients(lambda: weighted_sum(global_avg_pool(x)), [x]) <= TOL
    assert check_gradients(
        lambda: weighted_sum(dropout(x, 0.25, np.random.default_rng(seed), train=True)), [x]
    ) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_ce_grads(seed):
    rng = np.random.default_rng(seed)
    logits = param(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    assert check_gradients(lambda: weighted_sum(log_softmax(logits)), [logits]) <= TOL
    assert check_gradients(lambda: cross_entropy(logits, labels), [logits]) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_kernel_contract_grads(seed):
    rng = np.random.default_rng(seed)
    m, basis = param(rng, 3, 2, 4), param(rng, 4, 3, 3)
    assert check_gradients(lambda: weighted_sum(kernel_contract(m, basis)), [m, basis]) <= TOL


def test_teacher_shapes_and_zero_input():
    net = build_teacher((4, 8, 8), seed=0)
    x = np.zeros((64, 1, 28, 28))
    out = net(x)
    assert out.shape == (64, 10)
    assert np.all(out.data == 0.0)
    # 28 -> 14 -> 7 before global pooling
    h = maxpool2x2(maxpool2x2(Tensor(np.ones((1, 1, 28, 28)))))
    assert h.shape[-2:] == (7, 7)


def test_teacher_rejects_bad_widths():
    with pytest.raises(ConfigurationError):
        build_teacher((4, 8), seed=0)
    with pytest.raises(ConfigurationError):
        build_teacher((4, 0, 8), seed=0)


def test_dropout_expectation():
    x = Tensor(np.full(200_000, 2.0))
    y = dropout(x, 0.25, np.random.default_rng(3), train=True).data
    sd = 2.0 * np.sqrt(0.25 / 0.75) / np.sqrt(y.size)
    assert abs(y.mean() - 2.0) <= 3 * sd
    assert dropout(x, 0.25, None, train=False) is x
    with pytest.raises(ConfigurationError):
        dropout(x, 1.0, np.random.default_rng(0), train=True)


def test_forward_backward_bit_identical():
    def run():
        net = build_teacher((4, 8, 8), seed=7)
        x = np.random.default_rng(1).random((3, 1, 28, 28))
        loss = cross_entropy(net(x, train=True, rng=np.random.default_rng(2)), np.array([0, 4, 9]))
        loss.backward()
        return loss.data, [p.grad.copy() for p in net.parameters()]

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_backward_errors():
    with pytest.raises(UsageError):
        Tensor(np.ones(3), requires_grad=True).backward()
    with pytest.raises(UsageError):
        Tensor(1.0).backward()
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_gradients_accumulate_until_zeroed():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (a * 3.0).sum().backward()
    (a * 3.0).sum().backward()
    assert np.array_equal(a.grad, [6.0, 6.0])
    a.zero_grad()
    assert a.grad is None


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    state = AdamState.for_params([p], lr=0.01)
    adam_step([p], state)
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-7)


def test_adam_requires_gradients():
    p = Tensor(np.ones(2), requires_grad=True, name="w")
    with pytest.raises(UsageError, match="w"):
        adam_step([p], AdamState.for_params([p]))


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = conv2d(x, w, b, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)
