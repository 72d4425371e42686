"""Gesture-guided pose network.

Encoder features F4/F5 are projected and concatenated into F, refined by a
global token Transformer into F', decoded by a volumetric head into per-joint
D x H x W heatmaps, and localized by 3D soft-argmax. F' is bilinearly sampled
at each joint's (x, y) to form per-joint tokens U, which a second Transformer
refines together with two gated gesture-guidance tokens. Two MLP heads decode
the refined tokens into 6D joint rotations and shape coefficients, and the
hand model turns those into joints and a skinned mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import stack_batch
from .hand import (IDENTITY_6D, N_JOINTS, N_SHAPE, CameraConvention, default_tree,
                   hand_forward_np, pose_hand, skin_mesh)
from .layers import MLP, Linear, TransformerEncoder
from .losses import LossWeights, compute_losses, mpjpe, mpvpe
from .optim import adam_step
from .pretrain import ClassifierHeads, EncoderConfig, GestureEncoder
from .tensor import DTYPE, Tensor

# a gate parameter at or below this value switches its guidance token off exactly
GATE_OFF = -20.0
N_ROT = 16


@dataclass
class PipelineConfig:
    d_model: int = 128
    n_joints: int = N_JOINTS
    depth_bins: int = 8
    n_layers: int = 2
    n_heads: int = 4
    softargmax_scale: float = 1.0
    gate_init: float = -4.0
    pose_hidden: int = 256
    shape_hidden: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even (two fused halves)")


FULL_SCALE = dict(d_model=1024, depth_bins=16)


def soft_argmax_3d(volume, scale=1.0):
    """Expected (x, y, z) voxel index under ``softmax(scale * volume)``.

    ``volume`` is [..., D, H, W]; x indexes W, y indexes H, z indexes D.
    """
    volume = T.as_tensor(volume)
    *lead, d, h, w = volume.shape
    n = d * h * w
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(DTYPE)
    flat = T.reshape(volume, (-1, n))
    if scale != 1.0:
        flat = T.scale(flat, scale)
    prob = T.softmax(flat, axis=-1)
    return T.reshape(T.matmul(prob, Tensor(coords)), tuple(lead) + (3,))


def sample_joint_tokens(fmap, xy):
    """Bilinear samples of ``fmap`` [B, C, H, W] at ``xy`` [B, J, 2] -> U [B, C, J]."""
    feat = T.transpose(fmap, (0, 2, 3, 1))
    return T.transpose(T.bilinear_sample(feat, xy), (0, 2, 1))


def gate_value(s):
    """Logistic gate; exactly zero (and gradient-free) once ``s <= GATE_OFF``."""
    if float(s.data.reshape(-1)[0]) <= GATE_OFF:
        return Tensor(np.zeros(s.shape, dtype=DTYPE))
    return T.sigmoid(s)


class GestPoseNet:
    """Encoder, classifier heads and the stage-2 pose pipeline sharing one store."""

    def __init__(self, store, n_coarse, n_fine, rng, enc_cfg=None, cfg=None,
                 image_conv=None, volume_conv=None, tree=None):
        self.store = store
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.cfg = cfg = cfg or PipelineConfig()
        self.tree = tree or default_tree()
        self.image_conv = image_conv or CameraConvention(grid_size=self.enc_cfg.grid_size)
        s = self.enc_cfg.s5
        self.volume_conv = volume_conv or CameraConvention(
            grid_size=s, depth_bins=cfg.depth_bins,
            xy_extent_mm=self.image_conv.xy_extent_mm, z_extent_mm=self.image_conv.z_extent_mm)
        if self.volume_conv.grid_size != s or self.volume_conv.depth_bins != cfg.depth_bins:
            raise ValueError("volume convention must match F' extent and depth bins")
        self.debug = False
        d, j = cfg.d_model, cfg.n_joints
        e = self.enc_cfg

        self.encoder = GestureEncoder(store, e, rng)
        self.heads = ClassifierHeads(store, e.c5, n_coarse, n_fine, rng)

        self.proj4 = Linear(store, "fusion.proj4", e.c4, d // 2, rng)
        self.proj5 = Linear(store, "fusion.proj5", e.c5, d // 2, rng)
        self.global_pos = store.add("global.pos", rng.normal(0.0, 0.02, size=(s * s, d)))
        self.global_tf = TransformerEncoder(store, "global.tf", d, cfg.n_layers, cfg.n_heads, rng)
        self.volume_head = Linear(store, "volume.head", d, j * cfg.depth_bins, rng)

        self.phi_coarse = MLP(store, "guide.phi_coarse", n_coarse, d, d, rng)
        self.phi_fine = MLP(store, "guide.phi_fine", n_fine, d, d, rng)
        self.type_coarse = store.add("guide.type_coarse", rng.normal(0.0, 0.02, size=d))
        self.type_fine = store.add("guide.type_fine", rng.normal(0.0, 0.02, size=d))
        self.gate_coarse = store.add("guide.gate_coarse", [cfg.gate_init])
        self.gate_fine = store.add("guide.gate_fine", [cfg.gate_init])

        self.token_proj = Linear(store, "fuse.proj", d, d, rng, bias=False)
        self.joint_pos = store.add("fuse.pos", rng.normal(0.0, 0.02, size=(j, d)))
        self.fuse_tf = TransformerEncoder(store, "fuse.tf", d, cfg.n_layers, cfg.n_heads, rng)
        self.post = Linear(store, "fuse.post", d, d, rng, gain=0.1)

        self.pose_head = MLP(store, "mano.pose", d * j, cfg.pose_hidden, N_ROT * 6, rng, out_gain=0.1)
        self.pose_head.fc2.bias.data[:] = np.tile(IDENTITY_6D, N_ROT)
        self.shape_head = MLP(store, "mano.shape", d * j, cfg.shape_hidden, N_SHAPE, rng, out_gain=0.1)

    # -- guidance switch

    def disable_guidance(self):
        """Pin both gates at GATE_OFF and keep them out of optimizer updates."""
        for g in (self.gate_coarse, self.gate_fine):
            g.data[:] = GATE_OFF
            self.store.frozen.add(g.name)

    # -- stages

    def fuse_multiscale(self, f4, f5):
        """Project F4 (pooled to F5's resolution) and F5 to d/2 channels each -> [B, d, S', S']."""
        b, _, s, _ = f5.shape
        if f4.shape[0] != b or f4.shape[2] % s:
            raise T.DimensionError(f"fuse_multiscale: F4 {f4.shape} vs F5 {f5.shape}")
        p4 = T.avg_pool2d(f4, f4.shape[2] // s)
        t4 = T.reshape(T.transpose(p4, (0, 2, 3, 1)), (b, s * s, f4.shape[1]))
        t5 = T.reshape(T.transpose(f5, (0, 2, 3, 1)), (b, s * s, f5.shape[1]))
        tok = T.concat([self.proj4(t4), self.proj5(t5)], axis=-1)
        return T.transpose(T.reshape(tok, (b, s, s, self.cfg.d_model)), (0, 3, 1, 2))

    def global_token_transform(self, fmap, pos=None):
        """Flatten to S'^2 tokens, add positional codes, run the encoder, reshape back."""
        if not self.global_tf.layers:
            return fmap
        b, d, s, _ = fmap.shape
        tok = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (b, s * s, d))
        tok = self.global_tf(T.add_bias(tok, self.global_pos if pos is None else pos))
        return T.transpose(T.reshape(tok, (b, s, s, d)), (0, 3, 1, 2))

    def volume_logits(self, fmap):
        """Per-cell linear map to J x D depth logits -> [B, J, D, H, W]."""
        b, d, s, _ = fmap.shape
        tok = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (b, s * s, d))
        logits = T.reshape(self.volume_head(tok), (b, s, s, self.cfg.n_joints, self.cfg.depth_bins))
        return T.transpose(logits, (0, 3, 4, 1, 2))

    def build_guidance_tokens(self, logits_coarse, logits_fine):
        c_coarse = T.mul(gate_value(self.gate_coarse),
                         T.add_bias(self.phi_coarse(logits_coarse), self.type_coarse))
        c_fine = T.mul(gate_value(self.gate_fine),
                       T.add_bias(self.phi_fine(logits_fine), self.type_fine))
        return c_coarse, c_fine

    def fuse_transformer(self, u, c_coarse, c_fine):
        """``U + Post(O^T)`` where O is the first J outputs over [Q; c_coarse; c_fine]."""
        b, d, j = u.shape
        q = T.add_bias(self.token_proj(T.transpose(u, (0, 2, 1))), self.joint_pos)
        seq = T.concat([q, T.reshape(c_coarse, (b, 1, d)), T.reshape(c_fine, (b, 1, d))], axis=1)
        o = self.fuse_tf(seq)[:, :j]
        return T.add(u, T.transpose(self.post(o), (0, 2, 1)))

    def regress_mano(self, u_tilde):
        b = u_tilde.shape[0]
        flat = T.reshape(u_tilde, (b, -1))
        theta = T.reshape(self.pose_head(flat), (b, N_ROT, 6))
        beta = self.shape_head(flat)
        return theta, beta

    def forward(self, image, use_gt_logits=None):
        """Full forward pass on a batch of images [B, G, G, 3]."""
        enc = self.encoder(image)
        lc, lf = self.heads(enc.g)
        if use_gt_logits is not None:
            lc, lf = (Tensor(a) for a in use_gt_logits)
        fmap = self.fuse_multiscale(enc.F4, enc.F5)
        fprime = self.global_token_transform(fmap)
        vol = self.volume_logits(fprime)
        xyz = soft_argmax_3d(vol, self.cfg.softargmax_scale)
        if self.debug:
            self._check_volume(xyz)
        u = sample_joint_tokens(fprime, xyz[..., :2])
        c_coarse, c_fine = self.build_guidance_tokens(lc, lf)
        u_tilde = self.fuse_transformer(u, c_coarse, c_fine)
        theta, beta = self.regress_mano(u_tilde)
        posed = pose_hand(self.tree, theta, beta)
        verts = skin_mesh(self.tree, posed.joints, posed.global_rots, posed.rest_joints)
        return {
            "xyz_25d": xyz,
            "joints_cam_mm": self.volume_conv.volume_to_camera(xyz),
            "mano_joints_mm": posed.joints,
            "vertices_mm": verts,
            "theta": theta,
            "beta": beta,
            "logits_coarse": lc,
            "logits_fine": lf,
            "g": enc.g,
        }

    __call__ = full_forward = forward

    def _check_volume(self, xyz):
        s, dz = self.enc_cfg.s5, self.cfg.depth_bins
        hi = np.array([s - 1, s - 1, dz - 1], dtype=DTYPE)
        if np.any(xyz.data < -1e-4) or np.any(xyz.data > hi + 1e-4):
            raise AssertionError("soft-argmax left the volume")


def train_epoch(model, samples, weights=None, lr=1e-3, batch_size=32, rng=None):
    """One shuffled pass of Adam on the total loss; returns the mean total loss."""
    weights = weights or LossWeights()
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    total = 0.0
    for i in range(0, len(order), batch_size):
        batch = stack_batch([samples[k] for k in order[i:i + batch_size]])
        pred = model(batch["image"])
        report = compute_losses(pred, batch, weights, model.volume_conv, model.tree)
        report.total.backward()
        adam_step(model.store, lr)
        total += report.total.item() * len(batch["fine"])
    return total / max(len(samples), 1)


@dataclass
class PoseEval:
    mpjpe_mm: float
    mpvpe_mm: float
    coarse_acc: float
    fine_acc: float
    mpjpe_25d_mm: float
    g: np.ndarray
    logits_coarse: np.ndarray
    logits_fine: np.ndarray


def predict(model, samples, batch_size=64):
    """Numpy outputs of the forward pass for every sample, without a graph."""
    keys = ("mano_joints_mm", "vertices_mm", "joints_cam_mm", "g", "logits_coarse", "logits_fine")
    out = {k: [] for k in keys}
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = stack_batch(samples[i:i + batch_size])
            pred = model(batch["image"])
            for k in keys:
                out[k].append(pred[k].data)
    return {k: np.concatenate(v) for k, v in out.items()}


def ground_truth_mesh(model, samples):
    batch = stack_batch(samples)
    return hand_forward_np(model.tree, batch["gt_pose6d"], batch["gt_shape"])


def evaluate(model, samples, oracle=False):
    """Root-aligned MPJPE/MPVPE of the MANO outputs plus classification accuracy.

    With ``oracle`` the predictions are replaced by ground truth (a check of the
    metric path itself).
    """
    batch = stack_batch(samples)
    gt_joints, gt_verts = ground_truth_mesh(model, samples)
    out = predict(model, samples)
    if oracle:
        out["mano_joints_mm"], out["vertices_mm"] = gt_joints, gt_verts
        out["joints_cam_mm"] = batch["gt_joints_mm"]
    return PoseEval(
        mpjpe_mm=mpjpe(out["mano_joints_mm"], batch["gt_joints_mm"]),
        mpvpe_mm=mpvpe(out["vertices_mm"], gt_verts, out["mano_joints_mm"][:, 0], gt_joints[:, 0]),
        coarse_acc=float(np.mean(out["logits_coarse"].argmax(1) == batch["coarse"])),
        fine_acc=float(np.mean(out["logits_fine"].argmax(1) == batch["fine"])),
        mpjpe_25d_mm=mpjpe(out["joints_cam_mm"], batch["gt_joints_mm"]),
        g=out["g"], logits_coarse=out["logits_coarse"], logits_fine=out["logits_fine"])


STAGE1_PREFIXES = ("encoder.", "heads.")


def load_stage1(model, arrays):
    """Copy pretrained encoder and classifier-head arrays into ``model``.

    Every encoder/head parameter must be present with a matching shape.
    """
    from .errors import ManifestError
    for name, t in model.store.items():
        if not name.startswith(STAGE1_PREFIXES):
            continue
        if name not in arrays:
            raise ManifestError(f"stage-1 checkpoint lacks {name!r}")
        a = np.asarray(arrays[name])
        if a.shape != t.shape:
            raise ManifestError(f"{name}: checkpoint shape {a.shape}, model expects {t.shape}")
        t.data[...] = a
