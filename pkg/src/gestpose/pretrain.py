"""Gesture-aware pretraining: a small two-scale encoder and coarse/fine heads.

The encoder patchifies the G x G x 3 image into 2 x 2 patches, runs residual
MLP blocks at resolution S (giving F4), average-pools to S/2 and runs more
blocks (giving F5). The global descriptor g is the spatial mean of F5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import stack_batch
from .layers import Linear, ResidualMLP
from .optim import adam_step
from .tensor import Tensor


@dataclass
class EncoderConfig:
    grid_size: int = 16
    in_channels: int = 3
    patch: int = 2
    c4: int = 32
    c5: int = 64
    blocks_per_scale: int = 2

    @property
    def s4(self):
        return self.grid_size // self.patch

    @property
    def s5(self):
        return self.s4 // 2


@dataclass
class EncoderOutput:
    F4: Tensor  # (B, C4, S, S)
    F5: Tensor  # (B, C5, S/2, S/2)
    g: Tensor   # (B, C5)


class GestureEncoder:
    def __init__(self, store, cfg, rng, name="encoder"):
        self.cfg = cfg
        n_patch = cfg.patch * cfg.patch * cfg.in_channels
        self.patch = Linear(store, f"{name}.patch", n_patch, cfg.c4, rng)
        self.pos4 = store.add(f"{name}.pos4", rng.normal(0.0, 0.1, size=(cfg.s4 ** 2, cfg.c4)))
        self.blocks4 = [ResidualMLP(store, f"{name}.block4_{i}", cfg.c4, rng)
                        for i in range(cfg.blocks_per_scale)]
        self.proj5 = Linear(store, f"{name}.proj5", cfg.c4, cfg.c5, rng)
        self.pos5 = store.add(f"{name}.pos5", rng.normal(0.0, 0.1, size=(cfg.s5 ** 2, cfg.c5)))
        self.blocks5 = [ResidualMLP(store, f"{name}.block5_{i}", cfg.c5, rng)
                        for i in range(cfg.blocks_per_scale)]

    def __call__(self, image):
        cfg = self.cfg
        image = T.as_tensor(image)
        g, p, c = cfg.grid_size, cfg.patch, cfg.in_channels
        if image.ndim != 4 or image.shape[1:] != (g, g, c):
            raise T.DimensionError(f"encoder expects [B, {g}, {g}, {c}] images, got {image.shape}")
        b, s4, s5 = image.shape[0], cfg.s4, cfg.s5
        x = T.reshape(image, (b, s4, p, s4, p, c))
        x = T.reshape(T.transpose(x, (0, 1, 3, 2, 4, 5)), (b, s4 * s4, p * p * c))
        x = T.add_bias(self.patch(x), self.pos4)
        for blk in self.blocks4:
            x = blk(x)
        f4 = T.transpose(T.reshape(x, (b, s4, s4, cfg.c4)), (0, 3, 1, 2))
        y = T.avg_pool2d(f4, 2)
        y = T.reshape(T.transpose(y, (0, 2, 3, 1)), (b, s5 * s5, cfg.c4))
        y = T.add_bias(self.proj5(y), self.pos5)
        for blk in self.blocks5:
            y = blk(y)
        f5 = T.transpose(T.reshape(y, (b, s5, s5, cfg.c5)), (0, 3, 1, 2))
        return EncoderOutput(F4=f4, F5=f5, g=global_pool(f5))


def global_pool(f5):
    """``g = Flatten(Pool(F5))``: mean over all spatial positions -> (B, C5)."""
    return T.mean(f5, axis=(2, 3))


class ClassifierHeads:
    """Single linear layers from g to coarse and fine gesture logits."""

    def __init__(self, store, dim, n_coarse, n_fine, rng, name="heads"):
        self.coarse = Linear(store, f"{name}.coarse", dim, n_coarse, rng)
        self.fine = Linear(store, f"{name}.fine", dim, n_fine, rng)

    def __call__(self, g):
        return self.coarse(g), self.fine(g)


def alpha_schedule(epoch):
    """Fine-loss weight: 0.1, raised by 0.12 every 10 epochs, capped at 0.5."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return min(round(0.1 + 0.12 * (epoch // 10), 10), 0.5)


def pretrain_loss(logits_coarse, logits_fine, coarse, fine, alpha):
    return T.add(T.cross_entropy_logits(logits_coarse, coarse),
                 T.scale(T.cross_entropy_logits(logits_fine, fine), alpha))


@dataclass
class EpochMetrics:
    loss: float
    coarse_acc: float
    fine_acc: float


def _batches(n, batch_size, rng):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain_epoch(encoder, heads, store, samples, alpha, lr=1e-3, batch_size=32, rng=None):
    """One pass of shuffled mini-batch Adam on the coarse + alpha * fine loss.

    Accuracies are measured on each batch before its update.
    """
    if not samples:
        raise ValueError("pretrain_epoch needs a non-empty dataset")
    total = correct_c = correct_f = 0.0
    for idx in _batches(len(samples), batch_size, rng):
        batch = stack_batch([samples[i] for i in idx])
        out = encoder(batch["image"])
        gc, gf = heads(out.g)
        loss = pretrain_loss(gc, gf, batch["coarse"], batch["fine"], alpha)
        loss.backward()
        adam_step(store, lr)
        total += loss.item() * len(idx)
        correct_c += np.sum(gc.data.argmax(1) == batch["coarse"])
        correct_f += np.sum(gf.data.argmax(1) == batch["fine"])
    n = len(samples)
    return EpochMetrics(loss=total / n, coarse_acc=correct_c / n, fine_acc=correct_f / n)


def embed(encoder, heads, samples, batch_size=64):
    """Pooled features and logits for every sample, without recording a graph."""
    gs, lc, lf = [], [], []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = stack_batch(samples[i:i + batch_size])
            out = encoder(batch["image"])
            gc, gf = heads(out.g)
            gs.append(out.g.data)
            lc.append(gc.data)
            lf.append(gf.data)
    return np.concatenate(gs), np.concatenate(lc), np.concatenate(lf)


def classification_accuracy(encoder, heads, samples):
    _, lc, lf = embed(encoder, heads, samples)
    coarse = np.array([s.coarse for s in samples])
    fine = np.array([s.fine for s in samples])
    return float(np.mean(lc.argmax(1) == coarse)), float(np.mean(lf.argmax(1) == fine))
