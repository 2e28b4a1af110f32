"""Binary (+-1) weights: a float latent shadow plus a 1-bit packed view."""

import math

import numpy as np

from .tensor import DTYPE, Tensor, binarize


def pack_signs(values):
    """Pack a +-1 array to bytes, bit 1 for +1 and bit 0 for -1 (MSB first)."""
    v = np.asarray(values).ravel()
    return np.packbits(v >= 0).tobytes()


def unpack_signs(packed, shape):
    n = math.prod(shape)
    expected = math.ceil(n / 8)
    if len(packed) != expected:
        raise ValueError(f"packed length {len(packed)} does not match {expected} bytes for shape {shape}")
    bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=n)
    return (bits.astype(DTYPE) * 2 - 1).reshape(shape)


class BinaryWeights:
    """Weights constrained to {-1, +1} in the forward pass.

    ``latent`` is what the optimiser updates; every forward re-derives the
    sign, so the +-1 values and the packed bits are always views of it.
    """

    def __init__(self, latent):
        self.latent = latent if isinstance(latent, Tensor) else Tensor(latent, requires_grad=True)
        self.latent.requires_grad = True

    @classmethod
    def init(cls, shape, fan_in, rng):
        s = math.sqrt(1.0 / fan_in)
        return cls(Tensor(rng.uniform(-s, s, size=shape), requires_grad=True))

    @property
    def shape(self):
        return self.latent.shape

    @property
    def nbytes(self):
        return math.ceil(self.latent.data.size / 8)

    def signed(self):
        return binarize(self.latent)

    def values(self):
        return np.where(self.latent.data >= 0, DTYPE(1), DTYPE(-1))

    @property
    def bits(self):
        return pack_signs(self.values())

    def clip(self):
        np.clip(self.latent.data, -1.0, 1.0, out=self.latent.data)
