"""Finite-difference checks of every differentiable op, in float64.

Each check perturbs inputs with central differences and compares against the
reverse-mode gradient. ReLU configurations are resampled until no
preactivation sits near the kink, where finite differences are meaningless.
"""

import numpy as np
import pytest

from soupkit import tensor as T

from helpers import (
    numeric_gradient,
    preactivations_near_zero,
    random_tiny_model,
    relative_error,
)

TOL = 2e-6


def check_against_fd(f, *arrays, tol=TOL):
    """f maps Tensors to a scalar Tensor; checks grad of each input."""
    tensors = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = f(*tensors)
    T.backward(loss)
    for i, t in enumerate(tensors):
        def scalar(flat, i=i):
            args = [T.Tensor(a, dtype=np.float64) for a in arrays]
            args[i] = T.Tensor(flat.reshape(arrays[i].shape), dtype=np.float64)
            return f(*args).item()

        fd = numeric_gradient(scalar, arrays[i].copy())
        err = relative_error(t.grad, fd)
        assert err < tol, "input %d: rel err %.3g" % (i, err)


@pytest.fixture(autouse=True)
def _float64():
    with T.using_dtype(np.float64):
        yield


def test_add_gradcheck(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    check_against_fd(lambda x, y: T.mul(T.add(x, y), T.add(x, y)).sum(), a, b)


def test_sub_gradcheck(rng):
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))
    check_against_fd(lambda x, y: T.mul(T.sub(x, y), T.sub(x, y)).mean(), a, b)


def test_mul_broadcast_gradcheck(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((1, 3))
    check_against_fd(lambda x, y: T.mul(x, y).sum(), a, b)


def test_matmul_gradcheck(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    check_against_fd(lambda x, y: T.mul(T.matmul(x, y), T.matmul(x, y)).sum(),
                     a, b)


def test_relu_gradcheck_away_from_kink(rng):
    x = rng.standard_normal(20)
    x[np.abs(x) < 0.05] += 0.1  # keep clear of the kink
    check_against_fd(lambda t: T.mul(T.relu(t), T.relu(t)).sum(), x)


def test_conv2d_gradcheck(rng):
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        check_against_fd(
            lambda a, b: T.mul(T.conv2d(a, b, stride=stride, padding=pad),
                               T.conv2d(a, b, stride=stride, padding=pad)).sum(),
            x, w)


def test_avg_pool_gradcheck(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    check_against_fd(lambda t: T.mul(T.avg_pool2d(t, 2),
                                     T.avg_pool2d(t, 2)).sum(), x)


def test_reshape_flatten_gradcheck(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    check_against_fd(lambda t: T.mul(T.flatten(t), T.flatten(t)).sum(), x)
    check_against_fd(lambda t: T.mul(T.reshape(t, (6, 4)),
                                     T.reshape(t, (6, 4))).mean(), x)


def test_softmax_gradcheck(rng):
    z = rng.standard_normal((4, 5))
    v = rng.standard_normal((4, 5))  # fixed cotangent direction
    check_against_fd(lambda t: T.mul(T.softmax(t), T.Tensor(v)).sum(), z)


def test_log_softmax_gradcheck(rng):
    z = rng.standard_normal((3, 6))
    v = rng.standard_normal((3, 6))
    check_against_fd(lambda t: T.mul(T.log_softmax(t), T.Tensor(v)).sum(), z)


def test_cross_entropy_gradcheck(rng):
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, size=5)
    for reduction in ("mean", "sum"):
        check_against_fd(
            lambda t: T.cross_entropy(t, y, reduction=reduction), z)


def test_kl_divergence_gradcheck(rng):
    p = rng.standard_normal((3, 4))
    q = rng.standard_normal((3, 4))
    check_against_fd(lambda a, b: T.kl_divergence(a, b), p, q)


def test_random_tiny_models_end_to_end(rng):
    """Whole-model gradcheck: loss wrt inputs and all parameters."""
    checked = 0
    attempts = 0
    while checked < 6 and attempts < 60:
        attempts += 1
        model, shape, n_classes = random_tiny_model(rng)
        n = 3
        x = rng.uniform(-1.0, 1.0, size=(n,) + shape)
        y = rng.integers(0, n_classes, size=n)
        if preactivations_near_zero(model, x.astype(np.float64)):
            continue
        checked += 1

        params = list(model.named_parameters())
        for p_name, p in params:
            p.data = p.data.astype(np.float64)

        xt = T.Tensor(x, requires_grad=True, dtype=np.float64)
        loss = T.cross_entropy(model(xt), y)
        T.backward(loss)

        def loss_at_x(flat):
            return T.cross_entropy(
                model(T.Tensor(flat.reshape(x.shape), dtype=np.float64)),
                y).item()

        err = relative_error(xt.grad, numeric_gradient(loss_at_x, x.copy()))
        assert err < 5e-6, "input grad rel err %.3g" % err

        for p_name, p in params:
            base = p.data.copy()

            def loss_at_p(flat, p=p, base=base):
                p.data = flat.reshape(base.shape)
                try:
                    return T.cross_entropy(
                        model(T.Tensor(x, dtype=np.float64)), y).item()
                finally:
                    p.data = base

            fd = numeric_gradient(loss_at_p, base.copy())
            err = relative_error(p.grad, fd)
            assert err < 5e-6, "%s grad rel err %.3g" % (p_name, err)
            model.zero_grad()
            xt = T.Tensor(x, requires_grad=True, dtype=np.float64)
            loss = T.cross_entropy(model(xt), y)
            T.backward(loss)
    assert checked == 6, "only %d usable models in %d draws" % (checked, attempts)
