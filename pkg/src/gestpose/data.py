"""Synthetic single-hand gesture data.

A two-level taxonomy (coarse gestures with fine variants), pose sampling around
each fine label's canonical pose, splat-grid pseudo-images, and a JSON-lines
dataset format with a JSON manifest alongside.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, LabelError, ParseError
from .hand import (N_JOINTS, N_SHAPE, CameraConvention, HandState, default_tree,
                   hand_forward_np, matrix_to_rot6d)
from .tensor import DTYPE

N_ROT = 16
# per-joint pose jitter of generated datasets (degrees)
DEFAULT_NOISE_DEG = 12.0
CURL_STEP_DEG = 35.0
VARIANT_DELTA_DEG = 25.0
MAX_CURL_DEG = 95.0
ROOT_TILT_DEG = 20.0

# local flexion axes: fingers curl about x, the thumb about a tilted axis
_FLEX_AXES = np.array([
    [0.55, 0.25, 0.80],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
])
_FLEX_AXES = _FLEX_AXES / np.linalg.norm(_FLEX_AXES, axis=1, keepdims=True)


@dataclass
class GestureTaxonomy:
    n_coarse: int
    n_fine: int
    fine_to_coarse: np.ndarray   # (n_fine,)
    canonical: list              # HandState per fine label
    curls_deg: np.ndarray        # (n_fine, 5, 3) per-joint flexion used to build each pose
    root_rotvec: np.ndarray      # (n_coarse, 3)
    seed: int = 0

    def coarse_of(self, fine):
        if not 0 <= fine < self.n_fine:
            raise LabelError(f"fine label {fine} outside [0, {self.n_fine})")
        return int(self.fine_to_coarse[fine])

    def fine_labels_of(self, coarse):
        return [int(f) for f in np.flatnonzero(self.fine_to_coarse == coarse)]

    def to_dict(self):
        return {"n_coarse": self.n_coarse, "n_fine": self.n_fine, "seed": self.seed,
                "fine_to_coarse": [int(c) for c in self.fine_to_coarse]}


def _pose_from_curls(curls_deg, root_rotvec):
    """Local rotation matrices (16, 3, 3) from per-finger joint flexions."""
    mats = np.empty((N_ROT, 3, 3))
    mats[0] = Rotation.from_rotvec(root_rotvec).as_matrix()
    for f in range(5):
        for k in range(3):
            angle = np.deg2rad(curls_deg[f, k])
            mats[1 + 3 * f + k] = Rotation.from_rotvec(_FLEX_AXES[f] * angle).as_matrix()
    return mats


def _pick_prototypes(rng, n_coarse):
    states = np.array(np.meshgrid(*[range(3)] * 5, indexing="ij")).reshape(5, -1).T
    states = states[rng.permutation(len(states))]
    for min_dist in (2, 1):
        chosen = []
        for s in states:
            if all(np.sum(s != c) >= min_dist for c in chosen):
                chosen.append(s)
            if len(chosen) == n_coarse:
                return np.array(chosen)
    raise ConfigError(f"cannot build {n_coarse} distinct coarse gestures")


def build_taxonomy(seed=0, n_coarse=6, n_fine=10):
    """Deterministic coarse/fine taxonomy with canonical poses.

    Fine labels ``0..n_coarse-1`` are the coarse prototypes themselves; each
    further fine label is a variant of a coarse prototype (assigned round-robin)
    that re-curls the three articulated joints of one finger.
    """
    if n_coarse < 2 or n_fine < n_coarse:
        raise ConfigError(f"need n_fine >= n_coarse >= 2, got n_coarse={n_coarse}, n_fine={n_fine}")
    rng = np.random.default_rng(seed)
    protos = _pick_prototypes(rng, n_coarse)
    root = np.empty((n_coarse, 3))
    for c in range(n_coarse):
        axis = rng.normal(size=3)
        root[c] = axis / np.linalg.norm(axis) * np.deg2rad(rng.uniform(0.0, ROOT_TILT_DEG))

    fine_to_coarse = np.empty(n_fine, dtype=np.int64)
    curls = np.empty((n_fine, 5, 3))
    used_fingers = {c: [] for c in range(n_coarse)}
    for f in range(n_fine):
        c = f if f < n_coarse else (f - n_coarse) % n_coarse
        fine_to_coarse[f] = c
        base = np.repeat(protos[c][:, None] * CURL_STEP_DEG, 3, axis=1)
        if f >= n_coarse:
            free = [k for k in range(5) if k not in used_fingers[c]] or list(range(5))
            finger = int(rng.choice(free))
            used_fingers[c].append(finger)
            level = protos[c][finger]
            sign = 1.0 if level == 0 else -1.0 if level == 2 else rng.choice([-1.0, 1.0])
            base[finger] = np.clip(base[finger] + sign * VARIANT_DELTA_DEG, 0.0, MAX_CURL_DEG)
        curls[f] = base

    canonical = []
    for f in range(n_fine):
        mats = _pose_from_curls(curls[f], root[fine_to_coarse[f]])
        canonical.append(HandState(pose6d=matrix_to_rot6d(mats), shape=np.zeros(N_SHAPE, DTYPE)))
    return GestureTaxonomy(n_coarse=n_coarse, n_fine=n_fine, fine_to_coarse=fine_to_coarse,
                           canonical=canonical, curls_deg=curls, root_rotvec=root, seed=seed)


def _random_rotations(rng, n, max_deg):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = np.deg2rad(rng.uniform(0.0, max_deg, size=n))
    return Rotation.from_rotvec(axes * angles[:, None]).as_matrix()


def sample_pose(tax, fine_label, noise_deg=5.0, seed=0):
    """Canonical pose of ``fine_label`` with per-joint rotation noise and random shape."""
    if not 0 <= fine_label < tax.n_fine:
        raise LabelError(f"fine label {fine_label} outside [0, {tax.n_fine})")
    if not 0.0 <= noise_deg <= 20.0:
        raise ConfigError(f"noise_deg must lie in [0, 20], got {noise_deg}")
    rng = np.random.default_rng(seed)
    shape = np.clip(rng.normal(size=N_SHAPE), -3.0, 3.0).astype(DTYPE)
    canon = tax.canonical[fine_label]
    if noise_deg == 0.0:
        return HandState(pose6d=canon.pose6d.copy(), shape=shape)
    cols = canon.pose6d.astype(np.float64)
    b1 = cols[:, :3]
    b2 = cols[:, 3:]
    mats = np.stack([b1, b2, np.cross(b1, b2)], axis=-1)
    noisy = mats @ _random_rotations(rng, N_ROT, noise_deg)
    return HandState(pose6d=matrix_to_rot6d(noisy), shape=shape)


_JOINT_CODES = np.random.default_rng(12345).uniform(0.2, 1.0, size=N_JOINTS)


def gaussian_splats(xy, grid_size, sigma=1.5, weights=None):
    """Unnormalized sum of isotropic Gaussians (peak 1 each) on a G x G grid.

    ``xy`` [N, 2] holds (x, y) grid coordinates; x indexes columns.
    """
    xy = np.asarray(xy, dtype=np.float64)
    g = np.arange(grid_size, dtype=np.float64)
    gx = np.exp(-((g[None, :] - xy[:, 0:1]) ** 2) / (2 * sigma ** 2))  # (N, G) columns
    gy = np.exp(-((g[None, :] - xy[:, 1:2]) ** 2) / (2 * sigma ** 2))  # (N, G) rows
    w = np.ones(len(xy)) if weights is None else np.asarray(weights, dtype=np.float64)
    return np.einsum("n,ny,nx->yx", w, gy, gx)


def render_image_grid(joints_mm, conv, sigma=1.5, drop=()):
    """G x G x 3 pseudo-image of projected joints, each channel scaled into [0, 1].

    Channel 0 splats every joint with unit peak, channel 1 weights splats by
    nearness (small z is bright), channel 2 by a fixed per-joint code. Joints in
    ``drop`` are left out (occlusion).
    """
    joints_mm = np.asarray(joints_mm, dtype=np.float64)
    keep = np.array([j not in set(drop) for j in range(len(joints_mm))])
    xy, _ = conv.project_orthographic(joints_mm)
    xy, z = xy[keep], joints_mm[keep, 2]
    near = np.clip(0.5 - z / conv.z_extent_mm, 0.0, 1.0)
    chans = [
        gaussian_splats(xy, conv.grid_size, sigma),
        gaussian_splats(xy, conv.grid_size, sigma, near),
        gaussian_splats(xy, conv.grid_size, sigma, _JOINT_CODES[:len(joints_mm)][keep]),
    ]
    img = np.stack([c / max(1.0, c.max()) for c in chans], axis=-1)
    return img.astype(DTYPE)


@dataclass
class Sample:
    image: np.ndarray         # (G, G, 3)
    coarse: int
    fine: int
    gt_25d: np.ndarray        # (21, 3) volume coordinates
    gt_joints_mm: np.ndarray  # (21, 3) wrist-relative
    gt_pose6d: np.ndarray     # (16, 6)
    gt_shape: np.ndarray      # (10,)


ARRAY_FIELDS = ("image", "gt_25d", "gt_joints_mm", "gt_pose6d", "gt_shape")


def stack_batch(samples):
    """Dict of stacked arrays (and label vectors) for a list of samples."""
    out = {k: np.stack([getattr(s, k) for s in samples]).astype(DTYPE) for k in ARRAY_FIELDS}
    out["coarse"] = np.array([s.coarse for s in samples], dtype=np.int64)
    out["fine"] = np.array([s.fine for s in samples], dtype=np.int64)
    return out


def split_counts(n_total, split_ratios):
    ratios = np.asarray(split_ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must be three nonnegative values summing to 1, "
                          f"got {tuple(split_ratios)}")
    n_train = int(round(ratios[0] * n_total))
    n_val = int(round(ratios[1] * n_total))
    return n_train, n_val, n_total - n_train - n_val


def generate_dataset(tax, n_per_fine=50, split_ratios=(0.7, 0.15, 0.15), seed=0,
                     noise_deg=DEFAULT_NOISE_DEG, image_conv=None, volume_conv=None, tree=None,
                     occlusion=False, max_drop=5):
    """Stratified train/val/test lists of :class:`Sample`.

    Samples are laid out round-robin over fine labels, so contiguous splits are
    stratified to within one sample per label.
    """
    image_conv = image_conv or CameraConvention(grid_size=16)
    volume_conv = volume_conv or CameraConvention(grid_size=4)
    tree = tree or default_tree()
    n_total = n_per_fine * tax.n_fine
    counts = split_counts(n_total, split_ratios)
    seeds = np.random.SeedSequence(seed).spawn(n_total)

    labels, states, drops = [], [], []
    for i in range(n_total):
        fine = i % tax.n_fine
        rng = np.random.default_rng(seeds[i])
        st = sample_pose(tax, fine, noise_deg, rng)
        k = int(rng.integers(0, max_drop + 1)) if occlusion else 0
        drops.append(tuple(rng.choice(N_JOINTS, size=k, replace=False)) if k else ())
        labels.append(fine)
        states.append(st)
    pose = np.stack([s.pose6d for s in states])
    shape = np.stack([s.shape for s in states])
    joints, _ = hand_forward_np(tree, pose, shape)

    samples = []
    for i in range(n_total):
        j = joints[i]
        samples.append(Sample(
            image=render_image_grid(j, image_conv, drop=drops[i]),
            coarse=tax.coarse_of(labels[i]), fine=labels[i],
            gt_25d=volume_conv.camera_to_volume(j).astype(DTYPE),
            gt_joints_mm=j.astype(DTYPE), gt_pose6d=pose[i], gt_shape=shape[i]))
    n_train, n_val, _ = counts
    return {"train": samples[:n_train], "val": samples[n_train:n_train + n_val],
            "test": samples[n_train + n_val:]}


# ---------------------------------------------------------------- file format

def _fmt(a):
    return "[" + ",".join(format(float(v), ".9g") for v in np.asarray(a).reshape(-1)) + "]"


def write_dataset(samples, path):
    """One JSON object per line; arrays flattened row-major with a ``shapes`` map."""
    with open(path, "w") as fh:
        for s in samples:
            shapes = json.dumps({k: list(getattr(s, k).shape) for k in ARRAY_FIELDS})
            parts = [f'"coarse":{int(s.coarse)}', f'"fine":{int(s.fine)}', f'"shapes":{shapes}']
            parts += [f'"{k}":{_fmt(getattr(s, k))}' for k in ARRAY_FIELDS]
            fh.write("{" + ",".join(parts) + "}\n")


def read_dataset(path):
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                arrays = {}
                for k in ARRAY_FIELDS:
                    shape = tuple(rec["shapes"][k])
                    arrays[k] = np.asarray(rec[k], dtype=DTYPE).reshape(shape)
                samples.append(Sample(coarse=int(rec["coarse"]), fine=int(rec["fine"]), **arrays))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: malformed record ({exc})", line=lineno) from exc
    return samples


@dataclass
class DatasetManifest:
    seed: int
    taxonomy: dict
    counts: dict
    noise_deg: float
    image_conv: dict
    volume_conv: dict
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def conv_dict(conv):
    return {"grid_size": conv.grid_size, "depth_bins": conv.depth_bins,
            "xy_extent_mm": conv.xy_extent_mm, "z_extent_mm": conv.z_extent_mm}


def write_manifest(path, manifest):
    Path(path).write_text(manifest.to_json())


def read_manifest(path):
    return DatasetManifest(**json.loads(Path(path).read_text()))


def nearest_centroid_accuracy(train, test):
    """Fine-label accuracy of a nearest-centroid classifier on flattened gt joints."""
    xtr = np.stack([s.gt_joints_mm.reshape(-1) for s in train]).astype(np.float64)
    ytr = np.array([s.fine for s in train])
    xte = np.stack([s.gt_joints_mm.reshape(-1) for s in test]).astype(np.float64)
    yte = np.array([s.fine for s in test])
    labels = np.unique(ytr)
    cents = np.stack([xtr[ytr == c].mean(0) for c in labels])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(labels[d.argmin(1)] == yte))
