"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad, precision


@dataclass
class GradCheckReport:
    max_rel_err: dict = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_err.values())

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    def __str__(self):
        lines = [f"grad_check tol={self.tol:g} {'PASS' if self.passed else 'FAIL'}"]
        lines += [f"  {k}: {v:.3e}" for k, v in self.max_rel_err.items()]
        return "\n".join(lines)


def grad_check(f, inputs, tol=1e-3, step=1e-3, max_probes=None, seed=0, floor=1e-6, dtype=None):
    """Compare backward gradients of scalar ``f()`` with central differences.

    ``inputs`` is a sequence of leaf tensors (or a name -> tensor mapping) that
    ``f`` reads by reference. Each input is perturbed in place. Per input the
    reported error is ``max|analytic - numeric| / max(|analytic|_inf,
    |numeric|_inf, floor)`` over the probed entries. With ``max_probes`` only a
    seeded random subset of entries per input is probed.

    With ``dtype`` (say ``np.float64``) the inputs are cast and every op runs
    at that precision for the duration of the check. Gradients far below the
    f32 resolution of ``f`` need this; the inputs are cast back afterwards.
    """
    if isinstance(inputs, dict):
        named = list(inputs.items())
    else:
        named = [(t.name or f"input{i}", t) for i, t in enumerate(inputs)]
    if dtype is None:
        return _grad_check(f, named, tol, step, max_probes, seed, floor)
    saved = [t.data for _, t in named]
    try:
        with precision(dtype):
            for _, t in named:
                t.data = t.data.astype(dtype)
            return _grad_check(f, named, tol, step, max_probes, seed, floor)
    finally:
        for (_, t), d in zip(named, saved):
            t.data = d


def _grad_check(f, named, tol, step, max_probes, seed, floor):
    rng = np.random.default_rng(seed)

    for _, t in named:
        t.grad = None
    out = f()
    out.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in named}

    report = GradCheckReport(tol=tol)
    for name, t in named:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        num = np.empty(idx.size, dtype=np.float64)
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                # the perturbation actually applied after rounding to the input dtype
                h = float(flat.dtype.type(orig + step)) - float(flat.dtype.type(orig - step))
                num[n] = (fp - fm) / h
        ana = analytic[name].reshape(-1)[idx].astype(np.float64)
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        report.max_rel_err[name] = float(np.abs(ana - num).max(initial=0.0) / denom)
    for _, t in named:
        t.grad = None
    return report


def as_leaf(array, name=None):
    """Float32 leaf tensor that requires grad, for use with :func:`grad_check`."""
    return Tensor(np.array(array, dtype=np.float32), requires_grad=True, name=name)
