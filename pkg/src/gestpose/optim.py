"""Named parameter storage and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import DTYPE, Tensor


class ParamStore:
    """Insertion-ordered map of parameter name to leaf tensor, plus Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.frozen: set[str] = set()

    def add(self, name, value):
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def num_values(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def freeze(self, prefix):
        """Exclude every parameter whose name starts with ``prefix`` from updates."""
        self.frozen.update(n for n in self.params if n.startswith(prefix))

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, arrays, strict=True):
        """Copy arrays into existing parameters in place; returns names loaded."""
        loaded = []
        for name, arr in arrays.items():
            if name not in self.params:
                if strict:
                    raise ContractError(f"unknown parameter {name!r}")
                continue
            p = self.params[name]
            if p.shape != np.shape(arr):
                raise ContractError(f"{name}: shape {np.shape(arr)} != {p.shape}")
            p.data[...] = arr
            loaded.append(name)
        return loaded


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over ``store``; gradients are zeroed afterwards.

    A parameter without a gradient is treated as having a zero gradient.
    """
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        if name in store.frozen:
            p.grad = None
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in store.m:
            store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / DTYPE(bc1)
        vhat = v / DTYPE(bc2)
        p.data -= (DTYPE(lr) * mhat / (np.sqrt(vhat) + DTYPE(eps))).astype(DTYPE)
        p.grad = None
