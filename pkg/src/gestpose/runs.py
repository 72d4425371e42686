"""Stage orchestration shared by the command line and the experiment scripts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import build_taxonomy, generate_dataset
from .hand import CameraConvention
from .optim import ParamStore
from .pipeline import GestPoseNet, evaluate, load_stage1, train_epoch
from .pretrain import (ClassifierHeads, GestureEncoder, alpha_schedule, classification_accuracy,
                       pretrain_epoch)

# independent random streams derived from the run seed
_INIT, _PRETRAIN_SHUFFLE, _TRAIN_SHUFFLE = 1, 2, 3

PRETRAIN_COLUMNS = ("epoch", "alpha", "loss", "coarse_acc", "fine_acc", "val_coarse_acc", "val_fine_acc")
TRAIN_COLUMNS = ("epoch", "loss", "val_mpjpe_mm", "val_mpvpe_mm")


def stream(seed, tag):
    return np.random.default_rng([int(seed), tag])


def conventions(cfg):
    image = CameraConvention(grid_size=cfg.grid_size, depth_bins=cfg.depth_bins)
    volume = CameraConvention(grid_size=cfg.encoder_config().s5, depth_bins=cfg.depth_bins,
                              xy_extent_mm=image.xy_extent_mm, z_extent_mm=image.z_extent_mm)
    return image, volume


def taxonomy(cfg):
    return build_taxonomy(seed=cfg.seed, n_coarse=cfg.n_coarse, n_fine=cfg.n_fine)


def make_dataset(cfg):
    image, volume = conventions(cfg)
    return generate_dataset(taxonomy(cfg), n_per_fine=cfg.n_per_fine, split_ratios=cfg.split_ratios,
                            seed=cfg.seed, noise_deg=cfg.noise_deg, image_conv=image,
                            volume_conv=volume, occlusion=cfg.occlusion_aug, max_drop=cfg.max_drop)


@dataclass
class StageResult:
    arrays: dict                      # best-validation parameters
    rows: list = field(default_factory=list)
    best_epoch: int = -1


def snapshot(store):
    return {k: v.data.copy() for k, v in store.items()}


def build_stage1(cfg):
    store = ParamStore()
    rng = stream(cfg.seed, _INIT)
    encoder = GestureEncoder(store, cfg.encoder_config(), rng)
    heads = ClassifierHeads(store, cfg.c5, cfg.n_coarse, cfg.n_fine, rng)
    return store, encoder, heads


def run_pretrain(cfg, train, val, log=None):
    """Stage-1 training with the alpha schedule; keeps the best validation weights.

    Best means highest coarse then fine validation accuracy; ties keep the
    earlier epoch. With zero epochs the initial weights are returned.
    """
    store, encoder, heads = build_stage1(cfg)
    rng = stream(cfg.seed, _PRETRAIN_SHUFFLE)
    result = StageResult(arrays=snapshot(store))
    best = (-1.0, -1.0)
    for epoch in range(cfg.pretrain_epochs):
        alpha = alpha_schedule(epoch)
        m = pretrain_epoch(encoder, heads, store, train, alpha, cfg.lr, cfg.batch_size, rng)
        vc, vf = classification_accuracy(encoder, heads, val) if val else (0.0, 0.0)
        row = (epoch, alpha, m.loss, m.coarse_acc, m.fine_acc, vc, vf)
        result.rows.append(row)
        if log:
            log(row)
        if (vc, vf) > best:
            best = (vc, vf)
            result.arrays, result.best_epoch = snapshot(store), epoch
    return result


def build_model(cfg, stage1_arrays=None):
    """A stage-2 network; encoder and heads come from ``stage1_arrays`` when given."""
    image, volume = conventions(cfg)
    store = ParamStore()
    model = GestPoseNet(store, cfg.n_coarse, cfg.n_fine, stream(cfg.seed, _INIT),
                        enc_cfg=cfg.encoder_config(), cfg=cfg.pipeline_config(),
                        image_conv=image, volume_conv=volume)
    if stage1_arrays is not None:
        load_stage1(model, stage1_arrays)
    if cfg.no_guidance:
        model.disable_guidance()
    if cfg.freeze_encoder:
        store.freeze("encoder.")
    return model


def cosine_lr(base, epoch, total):
    """Half-cosine decay from ``base`` toward zero over ``total`` epochs."""
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(total, 1)))


def run_train(cfg, train, val, stage1_arrays=None, log=None):
    """Stage-2 training on the full objective; keeps the best validation-MPJPE weights."""
    if cfg.no_pretrain:
        stage1_arrays = None
    model = build_model(cfg, stage1_arrays)
    rng = stream(cfg.seed, _TRAIN_SHUFFLE)
    weights = cfg.loss_weights()
    result = StageResult(arrays=snapshot(model.store))
    best = np.inf
    for epoch in range(cfg.train_epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.train_epochs) if cfg.lr_decay else cfg.lr
        loss = train_epoch(model, train, weights, lr, cfg.batch_size, rng)
        ev = evaluate(model, val)
        row = (epoch, loss, ev.mpjpe_mm, ev.mpvpe_mm)
        result.rows.append(row)
        if log:
            log(row)
        if ev.mpjpe_mm < best:
            best = ev.mpjpe_mm
            result.arrays, result.best_epoch = snapshot(model.store), epoch
    for name, t in model.store.items():
        t.data[...] = result.arrays[name]
    return model, result
