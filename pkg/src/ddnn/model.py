"""The partitioned multi-exit network.

Each end device runs a ConvP block (binary 3x3 conv, 3x3/2 max pool, batch
norm, sign) and a binary FC exit head whose batch-normalised float output is
what it sends to the local aggregator. The binarised ConvP activations are
what it sends to the cloud, where they are aggregated and pushed through
more ConvP blocks and a float classifier.
"""

import math
from dataclasses import dataclass

import numpy as np

from .binary import BinaryWeights
from .tensor import (
    BatchNormParams,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    binarize,
    channel_mix,
    concat,
    conv2d,
    fully_connected,
    maxpool,
    reshape,
    scale,
    softmax_cross_entropy,
    stack_max,
    stack_mean,
)

SCHEMES = ("MP", "AP", "CC")
MAX_DEVICES = 16


def pooled_size(n):
    return (n - 1) // 2 + 1


def _uniform(rng, shape, fan_in):
    s = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


class ConvPBlock:
    def __init__(self, in_channels, filters, rng):
        self.in_channels = in_channels
        self.filters = filters
        self.weights = BinaryWeights.init((filters, in_channels, 3, 3), in_channels * 9, rng)
        self.bn = BatchNormParams(filters)

    def __call__(self, x, mode="infer"):
        return binarize(batch_norm(maxpool(conv2d(x, self.weights)), self.bn, mode))

    def parameters(self):
        return [self.weights.latent] + self.bn.parameters()

    def binary_weights(self):
        return [self.weights]

    def batch_norms(self):
        return [self.bn]


class BinaryHead:
    """Binary fully connected layer followed by batch norm; emits floats."""

    def __init__(self, in_features, out_features, rng):
        self.weights = BinaryWeights.init((in_features, out_features), in_features, rng)
        self.bn = BatchNormParams(out_features)

    def __call__(self, x, mode="infer"):
        flat = reshape(x, (x.shape[0], -1))
        return batch_norm(fully_connected(flat, self.weights), self.bn, mode)

    def parameters(self):
        return [self.weights.latent] + self.bn.parameters()

    def binary_weights(self):
        return [self.weights]

    def batch_norms(self):
        return [self.bn]


class FloatLinear:
    def __init__(self, in_features, out_features, rng):
        self.weight = _uniform(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x, mode="infer"):
        flat = reshape(x, (x.shape[0], -1)) if x.data.ndim != 2 else x
        return fully_connected(flat, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ChannelProjection:
    """1x1 float convolution used to fold concatenated feature maps back."""

    def __init__(self, in_channels, out_channels, rng):
        self.weight = _uniform(rng, (out_channels, in_channels), in_channels)

    def __call__(self, x, mode="infer"):
        return channel_mix(x, self.weight)

    def parameters(self):
        return [self.weight]


class DeviceBranch:
    """What one end device runs: a ConvP block and its exit head."""

    def __init__(self, filters, num_classes, rng, in_channels=3, input_size=32):
        self.filters = filters
        self.num_classes = num_classes
        self.input_size = input_size
        self.feature_size = pooled_size(input_size)
        self.conv_block = ConvPBlock(in_channels, filters, rng)
        self.exit_head = BinaryHead(filters * self.feature_size**2, num_classes, rng)

    def __call__(self, x, mode="infer"):
        features = self.conv_block(x, mode)
        return self.exit_head(features, mode), features

    def parameters(self):
        return self.conv_block.parameters() + self.exit_head.parameters()

    def binary_weights(self):
        return self.conv_block.binary_weights() + self.exit_head.binary_weights()

    def batch_norms(self):
        return self.conv_block.batch_norms() + self.exit_head.batch_norms()


# ------------------------------------------------------------- aggregation


@dataclass
class AggregationScheme:
    kind: str
    projection: object = None

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown aggregation scheme {self.kind!r}; expected one of {SCHEMES}")
        if self.kind == "CC" and self.projection is None:
            raise ValueError("CC aggregation needs a projection layer")

    def __call__(self, inputs):
        """Aggregate per-device tensors; ``None`` marks a failed device.

        Failed devices drop out of MP/AP and are zero-filled for CC.
        """
        live = [t for t in inputs if t is not None]
        if not live:
            raise ValueError("cannot aggregate: every device input is missing")
        if self.kind == "MP":
            return stack_max(live)
        if self.kind == "AP":
            return stack_mean(live)
        filled = [t if t is not None else Tensor(np.zeros(live[0].shape)) for t in inputs]
        return self.projection(concat(filled, axis=1))

    def parameters(self):
        return self.projection.parameters() if self.projection is not None else []


def _as_tensors(vectors):
    if len(vectors) == 0:
        raise ValueError("aggregation needs at least one input vector")
    return [Tensor(np.atleast_2d(np.asarray(v, dtype=np.float32))) for v in vectors]


def aggregate_mp(vectors):
    """Componentwise max over a list of equal-length vectors."""
    return stack_max(_as_tensors(vectors)).data[0]


def aggregate_ap(vectors):
    return stack_mean(_as_tensors(vectors)).data[0]


def aggregate_cc(vectors, projection):
    """Concatenate in the given order, then map back with ``projection``.

    ``projection`` is either a :class:`FloatLinear` or an (n*d, d) matrix.
    """
    ts = _as_tensors(vectors)
    if not isinstance(projection, FloatLinear):
        w = np.asarray(projection, dtype=np.float32)
        total = sum(t.shape[1] for t in ts)
        if w.ndim != 2 or w.shape[0] != total:
            raise ShapeError(f"projection expects input dim {w.shape[0] if w.ndim == 2 else '?'}, got {total}")
        return (concat(ts, axis=1).data @ w)[0]
    return projection(concat(ts, axis=1)).data[0]


# ------------------------------------------------------------------- model


class DdnnModel:
    def __init__(
        self,
        n_devices=6,
        filters=4,
        num_classes=3,
        local_scheme="MP",
        cloud_scheme="CC",
        cloud_filters=(16, 32),
        exit_weights=(1.0, 1.0),
        rng=None,
        input_size=32,
    ):
        if not 1 <= n_devices <= MAX_DEVICES:
            raise ValueError(f"n_devices must be in 1..{MAX_DEVICES}, got {n_devices}")
        if filters < 1:
            raise ValueError("filters must be >= 1")
        if len(exit_weights) != 2 or any(w <= 0 for w in exit_weights):
            raise ValueError(f"need two positive exit weights, got {exit_weights}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_devices = n_devices
        self.filters = filters
        self.num_classes = num_classes
        self.input_size = input_size
        self.cloud_filters = tuple(cloud_filters)
        self.exit_weights = tuple(float(w) for w in exit_weights)
        self.branches = [DeviceBranch(filters, num_classes, rng, input_size=input_size) for _ in range(n_devices)]
        self.feature_size = self.branches[0].feature_size

        local_proj = FloatLinear(n_devices * num_classes, num_classes, rng) if local_scheme == "CC" else None
        self.local_agg = AggregationScheme(local_scheme, local_proj)
        cloud_proj = ChannelProjection(n_devices * filters, filters, rng) if cloud_scheme == "CC" else None
        self.cloud_agg = AggregationScheme(cloud_scheme, cloud_proj)

        self.cloud_blocks = []
        ch, size = filters, self.feature_size
        for f in self.cloud_filters:
            self.cloud_blocks.append(ConvPBlock(ch, f, rng))
            ch, size = f, pooled_size(size)
        self.cloud_head = FloatLinear(ch * size * size, num_classes, rng)
        self.cloud_evaluations = 0

    @property
    def local_scheme(self):
        return self.local_agg.kind

    @property
    def cloud_scheme(self):
        return self.cloud_agg.kind

    @property
    def filter_output_size(self):
        return self.feature_size * self.feature_size

    # -- forward pieces, usable one stage at a time by the exit policy

    def _check_input(self, views):
        views = np.asarray(views, dtype=np.float32)
        if views.ndim != 5 or views.shape[1] != self.n_devices:
            raise ShapeError(
                f"expected views shaped (N, {self.n_devices}, 3, H, W), got {views.shape}"
            )
        return views

    def device_pass(self, views, mode="infer", failed=()):
        views = self._check_input(views)
        heads, features = [], []
        for i, branch in enumerate(self.branches):
            if i in failed:
                heads.append(None)
                features.append(None)
                continue
            h, f = branch(Tensor(views[:, i]), mode)
            heads.append(h)
            features.append(f)
        return heads, features

    def local_exit(self, heads):
        return self.local_agg(heads)

    def cloud_exit(self, features, mode="infer"):
        self.cloud_evaluations += 1
        x = self.cloud_agg(features)
        for block in self.cloud_blocks:
            x = block(x, mode)
        return self.cloud_head(x, mode)

    def forward(self, views, mode="infer", failed=()):
        heads, features = self.device_pass(views, mode, failed)
        return self.local_exit(heads), self.cloud_exit(features, mode), features

    __call__ = forward

    # -- parameter bookkeeping

    def _components(self):
        comps = list(self.branches) + [self.local_agg, self.cloud_agg] + self.cloud_blocks + [self.cloud_head]
        return comps

    def parameters(self):
        out = []
        for c in self._components():
            out.extend(c.parameters())
        return out

    def binary_weights(self):
        out = []
        for b in self.branches:
            out.extend(b.binary_weights())
        for blk in self.cloud_blocks:
            out.extend(blk.binary_weights())
        return out

    def batch_norms(self):
        out = []
        for b in self.branches:
            out.extend(b.batch_norms())
        for blk in self.cloud_blocks:
            out.extend(blk.batch_norms())
        return out

    def float_parameters(self):
        """Float (non-binary) trainable arrays in checkpoint order, excluding batch norm."""
        out = []
        for proj in (self.local_agg.projection, self.cloud_agg.projection):
            if proj is not None:
                out.extend(proj.parameters())
        out.extend(self.cloud_head.parameters())
        return out


class IndividualModel:
    """A single device branch trained on its own, the per-device baseline."""

    def __init__(self, filters=4, num_classes=3, rng=None, input_size=32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.branch = DeviceBranch(filters, num_classes, rng, input_size=input_size)
        self.num_classes = num_classes

    def __call__(self, views, mode="infer"):
        views = np.asarray(views, dtype=np.float32)
        if views.ndim != 4:
            raise ShapeError(f"individual model expects (N, 3, H, W) views, got {views.shape}")
        logits, _ = self.branch(Tensor(views), mode)
        return logits

    def parameters(self):
        return self.branch.parameters()

    def binary_weights(self):
        return self.branch.binary_weights()


def joint_loss(local_logits, cloud_logits, labels, exit_weights=(1.0, 1.0)):
    """Weighted sum of the softmax cross entropy at each exit."""
    if len(exit_weights) != 2:
        raise ValueError(f"need one weight per exit (2), got {len(exit_weights)}")
    lo = softmax_cross_entropy(local_logits, labels)
    cl = softmax_cross_entropy(cloud_logits, labels)
    total = add(scale(lo, exit_weights[0]), scale(cl, exit_weights[1]))
    return total, lo, cl


BN_FLOATS = 4  # gamma, beta, running mean, running variance
FLOAT_BYTES = 4


def device_memory_bytes(branch):
    """Bytes needed to store one device's layers.

    Packed binary conv and head weights plus four float32 values per
    batch-norm channel.
    """
    total = 0
    for w in branch.binary_weights():
        total += w.nbytes
    for bn in branch.batch_norms():
        total += bn.channels * BN_FLOATS * FLOAT_BYTES
    return total


def memory_ledger(branch):
    conv, head = branch.binary_weights()
    bn_conv, bn_head = branch.batch_norms()
    return {
        "conv_weight_bytes": conv.nbytes,
        "conv_bn_bytes": bn_conv.channels * BN_FLOATS * FLOAT_BYTES,
        "head_weight_bytes": head.nbytes,
        "head_bn_bytes": bn_head.channels * BN_FLOATS * FLOAT_BYTES,
        "total_bytes": device_memory_bytes(branch),
    }
