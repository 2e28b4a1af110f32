"""Analytic gradients against central differences of the float64 oracles."""

import numpy as np
import pytest

from ddnn.model import ChannelProjection, FloatLinear
from ddnn.tensor import (
    BatchNormParams,
    Tensor,
    batch_norm,
    binarize,
    concat,
    conv2d,
    maxpool,
    softmax_cross_entropy,
    stack_max,
    stack_mean,
)

import oracles

INSTANCES = 20
TOL = 1e-3


def _analytic(build, *inputs, probe):
    ts = [Tensor(a, requires_grad=True) for a in inputs]
    out = build(*ts)
    out.backward(probe.astype(np.float32))
    return [t.grad for t in ts]


def _check(fd_fn, analytic, arrays):
    for k, (arr, got) in enumerate(zip(arrays, analytic)):

        def f(v, k=k):
            args = list(arrays)
            args[k] = v
            return fd_fn(*args)

        num = oracles.numeric_grad(f, arr)
        assert oracles.rel_err(got, num) < TOL, f"input {k}"


def test_conv2d_gradients(backend):
    rng = np.random.default_rng(20)
    for _ in range(INSTANCES):
        n, c, f = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        h, w = rng.integers(2, 5), rng.integers(2, 5)
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((f, c, 3, 3)).astype(np.float32)
        probe = rng.standard_normal((n, f, h, w))
        got = _analytic(conv2d, x, wt, probe=probe)
        _check(lambda a, b: float((oracles.conv3x3(a, b) * probe).sum()), got, [x, wt])


def test_maxpool_gradient(backend):
    rng = np.random.default_rng(21)
    for _ in range(INSTANCES):
        x = rng.standard_normal((1, 2, rng.integers(2, 7), rng.integers(2, 7))).astype(np.float32)
        probe = rng.standard_normal(oracles.maxpool3x3s2(x)[0].shape)
        got = _analytic(maxpool, x, probe=probe)
        _check(lambda a: float((oracles.maxpool3x3s2(a)[0] * probe).sum()), got, [x])


def test_float_linear_gradients():
    rng = np.random.default_rng(22)
    for _ in range(INSTANCES):
        n, d, k = rng.integers(1, 4), rng.integers(1, 8), rng.integers(2, 5)
        layer = FloatLinear(d, k, rng)
        layer.bias.data = rng.standard_normal(k).astype(np.float32)
        x = rng.standard_normal((n, d)).astype(np.float32)
        probe = rng.standard_normal((n, k))
        xt = Tensor(x, requires_grad=True)
        layer(xt).backward(probe.astype(np.float32))
        w, b = layer.weight.data.copy(), layer.bias.data.copy()
        got = [xt.grad, layer.weight.grad, layer.bias.grad]
        _check(lambda a, ww, bb: float((oracles.fully_connected(a, ww, bb) * probe).sum()), got, [x, w, b])


def test_channel_projection_gradients():
    rng = np.random.default_rng(23)
    for _ in range(INSTANCES):
        n, c, f = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 4)
        layer = ChannelProjection(c, f, rng)
        x = rng.standard_normal((n, c, 3, 3)).astype(np.float32)
        probe = rng.standard_normal((n, f, 3, 3))
        xt = Tensor(x, requires_grad=True)
        layer(xt).backward(probe.astype(np.float32))
        w = layer.weight.data.copy()
        got = [xt.grad, layer.weight.grad]
        _check(lambda a, ww: float((oracles.channel_mix(a, ww) * probe).sum()), got, [x, w])


@pytest.mark.parametrize("ndim", [2, 4])
def test_batch_norm_train_gradients(ndim):
    rng = np.random.default_rng(24 + ndim)
    for _ in range(INSTANCES):
        c = int(rng.integers(1, 4))
        shape = (int(rng.integers(3, 6)), c) + ((2, 3) if ndim == 4 else ())
        x = (rng.standard_normal(shape) * 2 + 0.5).astype(np.float32)
        bn = BatchNormParams(c)
        bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
        bn.beta.data = rng.standard_normal(c).astype(np.float32)
        probe = rng.standard_normal(shape)
        xt = Tensor(x, requires_grad=True)
        batch_norm(xt, bn, "train").backward(probe.astype(np.float32))
        got = [xt.grad, bn.gamma.grad, bn.beta.grad]
        g0, b0 = bn.gamma.data.astype(np.float64), bn.beta.data.astype(np.float64)
        _check(lambda a, g, b: float((oracles.batch_norm_train(a, g, b) * probe).sum()), got, [x, g0, b0])


def test_batch_norm_infer_gradients():
    rng = np.random.default_rng(26)
    for _ in range(INSTANCES):
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((4, c, 2, 2)).astype(np.float32)
        bn = BatchNormParams(c)
        bn.running_mean = rng.standard_normal(c).astype(np.float32)
        bn.running_var = rng.uniform(0.5, 2, c).astype(np.float32)
        bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
        probe = rng.standard_normal(x.shape)
        xt = Tensor(x, requires_grad=True)
        batch_norm(xt, bn, "infer").backward(probe.astype(np.float32))
        mu, var = bn.running_mean.reshape(1, c, 1, 1), bn.running_var.reshape(1, c, 1, 1)
        beta = bn.beta.data.reshape(1, c, 1, 1)

        def f(a, g):
            return float(((g.reshape(1, c, 1, 1) * (a - mu) / np.sqrt(var + 1e-5) + beta) * probe).sum())

        _check(f, [xt.grad, bn.gamma.grad], [x, bn.gamma.data.astype(np.float64)])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(27)
    for _ in range(INSTANCES):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        z = (rng.standard_normal((n, c)) * 3).astype(np.float32)
        labels = rng.integers(0, c, n)
        y = np.eye(c)[labels]
        zt = Tensor(z, requires_grad=True)
        loss = softmax_cross_entropy(zt, labels)
        assert float(loss.data) == pytest.approx(oracles.softmax_ce(z.astype(np.float64), y), rel=1e-5)
        loss.backward()
        num = oracles.numeric_grad(lambda a: oracles.softmax_ce(a, y), z)
        assert oracles.rel_err(zt.grad, num) < TOL


def test_aggregation_op_gradients():
    rng = np.random.default_rng(28)
    ops = (
        (lambda *t: stack_mean(list(t)), lambda *a: np.mean(a, axis=0)),
        (lambda *t: stack_max(list(t)), lambda *a: np.max(a, axis=0)),
        (lambda *t: concat(list(t), axis=1), lambda *a: np.concatenate(a, axis=1)),
    )
    for _ in range(INSTANCES):
        k = int(rng.integers(1, 5))
        arrays = [rng.standard_normal((2, 3)).astype(np.float32) for _ in range(k)]
        for op, ref in ops:
            probe = rng.standard_normal(ref(*arrays).shape)
            got = _analytic(op, *arrays, probe=probe)
            _check(lambda *a, probe=probe, ref=ref: float((ref(*a) * probe).sum()), got, arrays)


def test_binarize_straight_through():
    x = Tensor(np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]), requires_grad=True)
    out = binarize(x)
    np.testing.assert_array_equal(out.data, [-1, -1, -1, 1, 1, 1, 1])
    out.backward(np.full(7, 3.0, dtype=np.float32))
    np.testing.assert_array_equal(x.grad, [0, 3, 3, 3, 3, 3, 0])


def test_shared_subexpression_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    from ddnn.tensor import add

    add(a, a).backward(np.ones(1, dtype=np.float32))
    assert a.grad[0] == 2.0
