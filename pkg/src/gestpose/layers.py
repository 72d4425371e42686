"""Small neural-network building blocks on top of :mod:`gestpose.tensor`.

Each block registers its parameters in a shared :class:`ParamStore` under a
dotted name prefix, so checkpoints and optimizers see one flat inventory.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T


def xavier(rng, n_in, n_out, gain=1.0):
    std = gain * math.sqrt(2.0 / (n_in + n_out))
    return rng.normal(0.0, std, size=(n_in, n_out))


class Linear:
    def __init__(self, store, name, n_in, n_out, rng, gain=1.0, bias=True):
        self.weight = store.add(f"{name}.weight", xavier(rng, n_in, n_out, gain))
        self.bias = store.add(f"{name}.bias", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return T.add_bias(y, self.bias) if self.bias is not None else y


class LayerNorm:
    def __init__(self, store, name, dim, eps=1e-5):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gain, self.bias, self.eps)


class MLP:
    """``n_in -> hidden -> n_out`` with GELU in between."""

    def __init__(self, store, name, n_in, hidden, n_out, rng, out_gain=1.0):
        self.fc1 = Linear(store, f"{name}.fc1", n_in, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, n_out, rng, gain=out_gain)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class ResidualMLP:
    """Pre-norm residual block: ``x + MLP(LN(x))``."""

    def __init__(self, store, name, dim, rng, expansion=2):
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.mlp = MLP(store, f"{name}.mlp", dim, expansion * dim, dim, rng)

    def __call__(self, x):
        return x + self.mlp(self.norm(x))


class SelfAttention:
    def __init__(self, store, name, dim, n_heads, rng):
        if dim % n_heads:
            raise ValueError(f"d_model {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(store, f"{name}.qkv", dim, 3 * dim, rng)
        self.out = Linear(store, f"{name}.out", dim, dim, rng)

    def __call__(self, x):
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = T.transpose(T.reshape(self.qkv(x), (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(ctx)


class EncoderLayer:
    """Pre-norm Transformer encoder layer."""

    def __init__(self, store, name, dim, n_heads, rng, expansion=2):
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = SelfAttention(store, f"{name}.attn", dim, n_heads, rng)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.mlp = MLP(store, f"{name}.mlp", dim, expansion * dim, dim, rng)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerEncoder:
    def __init__(self, store, name, dim, n_layers, n_heads, rng):
        self.layers = [EncoderLayer(store, f"{name}.layer{i}", dim, n_heads, rng)
                       for i in range(n_layers)]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
