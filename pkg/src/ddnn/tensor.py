"""A small tape-based autograd engine covering exactly the layers a DDNN needs.

Every op takes and returns :class:`Tensor`. When grad recording is on and an
input requires grad, the result keeps references to its parents plus a
closure that pushes the upstream gradient into them; ``Tensor.backward``
replays those closures in reverse topological order.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate grads are not needed once propagated
                    node.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def scale(a, k):
    k = float(k)

    def backward(g):
        a._accumulate(g * DTYPE(k))

    return _result(a.data * DTYPE(k), (a,), backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def binarize(x):
    """Sign activation, sign(0) = +1, with the clipped straight-through gradient."""
    out = np.where(x.data >= 0, DTYPE(1), DTYPE(-1))

    def backward(g):
        x._accumulate(g * (np.abs(x.data) <= 1))

    return _result(out, (x,), backward)


# --------------------------------------------------------------- aggregation


def _check_same(tensors):
    if not tensors:
        raise ValueError("aggregation needs at least one input")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"aggregation inputs differ in shape: {shape} vs {t.shape}")


def stack_max(tensors):
    """Componentwise max over a list; gradient goes to the first argmax."""
    _check_same(tensors)
    stacked = np.stack([t.data for t in tensors])
    arg = np.argmax(stacked, axis=0)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.where(arg == i, g, DTYPE(0)))

    return _result(np.take_along_axis(stacked, arg[None], 0)[0], tensors, backward)


def stack_mean(tensors):
    _check_same(tensors)
    n = len(tensors)
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    inv = DTYPE(1.0 / n)

    def backward(g):
        for t in tensors:
            if t.requires_grad:
                t._accumulate(g * inv)

    return _result(total * inv, tensors, backward)


# ------------------------------------------------------------------- layers


def _weight_matrix(w):
    # BinaryWeights expose their +-1 view through .signed(); plain tensors pass
    return w.signed() if hasattr(w, "signed") else w


def conv2d(x, weights):
    """3x3 convolution, stride 1, zero padding 1. ``weights`` is (F, C, 3, 3)."""
    w = _weight_matrix(weights)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects NxCxHxW input and Fx Cx3x3 weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has C={x.shape[1]}, weights expect C={w.shape[1]}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"conv2d needs H, W >= 1, got {x.shape}")
    out = kernels.conv3x3_forward(x.data, w.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(kernels.conv3x3_backward_input(g, w.data))
        if w.requires_grad:
            w._accumulate(kernels.conv3x3_backward_weight(x.data, g))

    return _result(out, (x, w), backward)


def maxpool(x):
    """3x3 max pooling, stride 2, padding 1 (padded cells never win)."""
    if x.data.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"maxpool expects NxFxHxW with H, W >= 1, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out, idx = kernels.maxpool3x3s2_forward(x.data)

    def backward(g):
        x._accumulate(kernels.maxpool3x3s2_backward(np.ascontiguousarray(g), idx, h, w))

    return _result(out, (x,), backward)


def channel_mix(x, w):
    """1x1 convolution: (N, C, H, W) x (F, C) -> (N, F, H, W)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel_mix expects {w.shape[1]} input channels, got {x.shape[1]}")
    out = np.einsum("nchw,fc->nfhw", x.data, w.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.einsum("nfhw,fc->nchw", g, w.data))
        if w.requires_grad:
            w._accumulate(np.einsum("nfhw,nchw->fc", g, x.data))

    return _result(out, (x, w), backward)


def fully_connected(x, weights, bias=None):
    """(N, D) @ (D, K) [+ bias]; ``weights`` may be binary or float."""
    w = _weight_matrix(weights)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected shape mismatch: input {x.shape}, weights {w.shape}")
    out = x.data @ w.data
    parents = [x, w]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, backward)


class BatchNormParams:
    """Affine parameters plus running statistics for one batch-norm layer."""

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self):
        return self.gamma.shape[0]

    def parameters(self):
        return [self.gamma, self.beta]


def batch_norm(x, bn, mode="train"):
    """Per-channel normalisation over every axis except axis 1.

    ``train`` uses batch statistics and updates the running estimates;
    ``infer`` uses the running estimates.
    """
    c = x.shape[1]
    if bn.channels != c:
        raise ShapeError(f"batch_norm has {bn.channels} channels, input has {c}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    gamma = bn.gamma.data.reshape(bshape)
    beta = bn.beta.data.reshape(bshape)

    if mode == "infer":
        mean = bn.running_mean.reshape(bshape)
        inv_std = (1.0 / np.sqrt(bn.running_var + bn.eps)).astype(DTYPE).reshape(bshape)
        xhat = (x.data - mean) * inv_std
        out = gamma * xhat + beta

        def backward(g):
            if x.requires_grad:
                x._accumulate(g * gamma * inv_std)
            if bn.gamma.requires_grad:
                bn.gamma._accumulate((g * xhat).sum(axis=axes))
            if bn.beta.requires_grad:
                bn.beta._accumulate(g.sum(axis=axes))

        return _result(out, (x, bn.gamma, bn.beta), backward)

    if mode != "train":
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    m = x.data.size // c
    mean = x.data.mean(axis=axes, keepdims=True, dtype=np.float64).astype(DTYPE)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True, dtype=np.float64).astype(DTYPE)
    inv_std = (1.0 / np.sqrt(var + bn.eps)).astype(DTYPE)
    xhat = centered * inv_std
    out = gamma * xhat + beta
    if _grad_enabled:
        k = DTYPE(bn.momentum)
        bn.running_mean = k * bn.running_mean + (1 - k) * mean.reshape(c)
        bn.running_var = k * bn.running_var + (1 - k) * var.reshape(c)

    def backward(g):
        gsum = g.sum(axis=axes, keepdims=True)
        gxsum = (g * xhat).sum(axis=axes, keepdims=True)
        if x.requires_grad:
            dx = (gamma * inv_std / DTYPE(m)) * (DTYPE(m) * g - gsum - xhat * gxsum)
            x._accumulate(dx)
        if bn.gamma.requires_grad:
            bn.gamma._accumulate(gxsum.reshape(c))
        if bn.beta.requires_grad:
            bn.beta._accumulate(gsum.reshape(c))

    return _result(out, (x, bn.gamma, bn.beta), backward)


# --------------------------------------------------------------------- loss


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax_cross_entropy(logits, labels):
    """Batch mean of ``-(1/|C|) sum_c y_c log softmax(z)_c``.

    ``labels`` is either a one-hot (N, C) array or a vector of class indices.
    """
    n, c = logits.shape
    if c < 2:
        raise ShapeError("softmax_cross_entropy needs at least two classes")
    y = np.asarray(labels)
    if y.ndim == 1:
        y = one_hot(y, c)
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - logsum
    loss = -(y * log_p).sum() / (c * n)

    def backward(g):
        p = np.exp(log_p)
        logits._accumulate((float(g) * (p - y) / (c * n)).astype(DTYPE))

    return _result(np.array(loss, dtype=DTYPE), (logits,), backward)
