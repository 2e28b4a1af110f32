"""Sectioned binary checkpoint for :class:`DdnnModel`.

Layout, all little-endian::

    header   magic "DDNN", u16 version, u16 n_devices, u16 filters,
             u16 num_classes, u16 input_size, u8 local scheme, u8 cloud
             scheme, u8 flags, u8 n_cloud_blocks, u16 cloud filters[...],
             f32 exit weights[2]
    binary   packed sign bits for every binary weight, declared order
    float    f32 arrays: batch-norm (gamma, beta, running mean, running var)
             per block, then projections and the cloud head
    latent   (flag bit 0) f32 latent shadows of every binary weight

Declared order is device branches 0..n-1 (conv, then head), then the cloud
blocks.
"""

import struct
from pathlib import Path

import numpy as np

from .binary import unpack_signs
from .model import SCHEMES, DdnnModel
from .tensor import Tensor

MAGIC = b"DDNN"
VERSION = 1
FLAG_LATENT = 1

_HEAD = struct.Struct("<4sHHHHHBBBB")


class CheckpointError(ValueError):
    pass


def _bn_arrays(model):
    out = []
    for bn in model.batch_norms():
        out.append((bn, "gamma"))
        out.append((bn, "beta"))
        out.append((bn, "running_mean"))
        out.append((bn, "running_var"))
    return out


def _get(bn, attr):
    v = getattr(bn, attr)
    return v.data if isinstance(v, Tensor) else v


def to_bytes(model, include_latent=True):
    parts = [
        _HEAD.pack(
            MAGIC,
            VERSION,
            model.n_devices,
            model.filters,
            model.num_classes,
            model.input_size,
            SCHEMES.index(model.local_scheme),
            SCHEMES.index(model.cloud_scheme),
            FLAG_LATENT if include_latent else 0,
            len(model.cloud_filters),
        ),
        struct.pack(f"<{len(model.cloud_filters)}H", *model.cloud_filters),
        struct.pack("<2f", *model.exit_weights),
    ]
    for w in model.binary_weights():
        parts.append(w.bits)
    for bn, attr in _bn_arrays(model):
        parts.append(np.asarray(_get(bn, attr), dtype="<f4").tobytes())
    for p in model.float_parameters():
        parts.append(p.data.astype("<f4").tobytes())
    if include_latent:
        for w in model.binary_weights():
            parts.append(w.latent.data.astype("<f4").tobytes())
    return b"".join(parts)


def save(model, path, include_latent=True):
    data = to_bytes(model, include_latent)
    Path(path).write_bytes(data)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def floats(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def from_bytes(buf):
    r = _Reader(buf)
    magic, version, n_dev, filters, n_cls, size, ls, cs, flags, n_blocks = _HEAD.unpack(r.take(_HEAD.size))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if ls >= len(SCHEMES) or cs >= len(SCHEMES):
        raise CheckpointError("unknown aggregation scheme code")
    cloud_filters = struct.unpack(f"<{n_blocks}H", r.take(2 * n_blocks))
    exit_weights = struct.unpack("<2f", r.take(8))
    model = DdnnModel(
        n_devices=n_dev,
        filters=filters,
        num_classes=n_cls,
        local_scheme=SCHEMES[ls],
        cloud_scheme=SCHEMES[cs],
        cloud_filters=cloud_filters,
        exit_weights=exit_weights,
        input_size=size,
    )
    binaries = model.binary_weights()
    signs = [unpack_signs(r.take(w.nbytes), w.shape) for w in binaries]
    for bn, attr in _bn_arrays(model):
        arr = r.floats((bn.channels,))
        if attr in ("gamma", "beta"):
            getattr(bn, attr).data = arr
        else:
            setattr(bn, attr, arr)
    for p in model.float_parameters():
        p.data = r.floats(p.shape)
    for w, s in zip(binaries, signs):
        w.latent.data = r.floats(w.shape) if flags & FLAG_LATENT else s
        if not np.array_equal(w.values(), s):
            raise CheckpointError("latent weights disagree with packed sign bits")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint body")
    return model


def load(path):
    return from_bytes(Path(path).read_bytes())
