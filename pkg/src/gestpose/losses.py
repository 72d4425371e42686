"""Training objective, pose metrics, and embedding-quality metrics."""
from __future__ import annotations

from dataclasses import astuple, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import DimensionError, MetricError, TopologyError
from .hand import default_tree, rot6d_to_matrix
from .tensor import Tensor


@dataclass
class LossWeights:
    pose: float = 2.0
    shape: float = 0.5
    joints3d: float = 20.0
    mano3d: float = 20.0
    xyz25d: float = 0.05
    joints2d: float = 0.5
    mano2d: float = 0.5
    cont: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_vector(self):
        return np.array(astuple(self), dtype=np.float64)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


TERMS = tuple(f.name for f in fields(LossWeights))


@dataclass
class LossReport:
    raw: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    total: Tensor | None = None

    def values(self):
        return {k: float(v.data) for k, v in self.raw.items()}


def bone_continuity_loss(pose6d, tree=None):
    """Mean squared Frobenius distance between consecutive local rotations.

    Pairs are the consecutive articulated joints inside each finger chain
    (two pairs per finger); the mean runs over pairs and over the batch.
    """
    tree = tree or default_tree()
    pose6d = T.as_tensor(pose6d)
    if pose6d.ndim == 2:
        pose6d = T.reshape(pose6d, (1,) + pose6d.shape)
    rots = rot6d_to_matrix(pose6d)  # (B, 16, 3, 3)
    row_of = {int(j): k for k, j in enumerate(tree.rotated_joints)}
    first, second = [], []
    for chain in tree.chains:
        art = [row_of[j] for j in chain[:3]]
        first += art[:-1]
        second += art[1:]
    diff = T.sub(rots[:, np.array(first)], rots[:, np.array(second)])
    b = pose6d.shape[0]
    per_pair = T.tsum(T.square(diff), axis=(2, 3))
    return T.scale(T.tsum(per_pair), 1.0 / (b * len(first)))


def compute_losses(pred, gt, weights=None, conv=None, tree=None):
    """Eight-term weighted objective.

    ``pred`` holds tensors from the pose network (``theta``, ``beta``,
    ``xyz_25d``, ``joints_cam_mm``, ``mano_joints_mm``); ``gt`` holds arrays
    ``gt_pose6d``, ``gt_shape``, ``gt_joints_mm`` and ``gt_25d``. Every term is
    a mean, so weights compare across terms of different size.
    """
    from .hand import CameraConvention  # local: avoids a cycle at import time
    weights = weights or LossWeights()
    conv = conv or CameraConvention(grid_size=4)
    gt_joints = np.asarray(gt["gt_joints_mm"], dtype=np.float32)
    gt_xy = conv.camera_to_volume(gt_joints)[..., :2]
    raw = {
        "pose": T.l1_loss(pred["theta"], gt["gt_pose6d"]),
        "shape": T.l1_loss(pred["beta"], gt["gt_shape"]),
        "joints3d": T.l1_loss(pred["joints_cam_mm"], gt_joints),
        "mano3d": T.l1_loss(pred["mano_joints_mm"], gt_joints),
        "xyz25d": T.l1_loss(pred["xyz_25d"], gt["gt_25d"]),
        "joints2d": T.l1_loss(conv.project_tensor(pred["joints_cam_mm"]), gt_xy),
        "mano2d": T.l1_loss(conv.project_tensor(pred["mano_joints_mm"]), gt_xy),
        "cont": bone_continuity_loss(pred["theta"], tree),
    }
    w = weights.as_dict()
    weighted = {k: T.scale(v, w[k]) for k, v in raw.items()}
    total = None
    for k in TERMS:
        total = weighted[k] if total is None else T.add(total, weighted[k])
    return LossReport(raw=raw, weighted=weighted, total=total)


def _root_aligned_error(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return np.linalg.norm((pred - pred[..., :1, :]) - (gt - gt[..., :1, :]), axis=-1).mean()


def mpjpe(pred_joints_mm, gt_joints_mm):
    """Mean per-joint position error (mm) after moving joint 0 to the origin."""
    if np.shape(pred_joints_mm) != np.shape(gt_joints_mm):
        raise DimensionError(f"mpjpe: {np.shape(pred_joints_mm)} vs {np.shape(gt_joints_mm)}")
    return float(_root_aligned_error(pred_joints_mm, gt_joints_mm))


def mpvpe(pred_vertices_mm, gt_vertices_mm, root_pred=None, root_gt=None):
    """Mean per-vertex position error (mm) after wrist alignment.

    Vertices are translated by the wrist positions when given, otherwise by
    their first vertex.
    """
    p = np.asarray(pred_vertices_mm, dtype=np.float64)
    g = np.asarray(gt_vertices_mm, dtype=np.float64)
    if p.shape != g.shape:
        raise TopologyError(f"mpvpe: vertex arrays {p.shape} and {g.shape} differ")
    if root_pred is None or root_gt is None:
        return float(_root_aligned_error(p, g))
    rp = np.asarray(root_pred, dtype=np.float64)[..., None, :]
    rg = np.asarray(root_gt, dtype=np.float64)[..., None, :]
    return float(np.linalg.norm((p - rp) - (g - rg), axis=-1).mean())


def silhouette_score(embeddings, labels):
    """Mean silhouette coefficient with Euclidean distances."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or np.any(counts < 2):
        raise MetricError("silhouette needs at least two labels with two members each")
    sq = (x * x).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(d, 0.0)
    onehot = (labels[:, None] == uniq[None, :]).astype(np.float64)
    sums = d @ onehot  # (N, K) total distance to each cluster
    own = np.argmax(onehot, axis=1)
    n = len(x)
    a = sums[np.arange(n), own] / (counts[own] - 1)
    means = sums / counts[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    s = (b - a) / np.maximum(np.maximum(a, b), 1e-300)
    return float(s.mean())


def pca_project(embeddings, k=2, tol=1e-8, max_iter=1000, return_components=False):
    """Project centered data onto its top-``k`` covariance eigenvectors.

    Eigenvectors come from power iteration with deflation; each iterate is
    re-orthogonalized against earlier components. Signs are fixed so the
    largest-magnitude entry of each component is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"pca_project needs more than k={k} rows, got {n}")
    xc = x - x.mean(0)
    cov = xc.T @ xc / max(n - 1, 1)
    comps = np.zeros((k, d))
    rng = np.random.default_rng(0)
    work = cov.copy()
    for i in range(k):
        v = rng.normal(size=d)
        v -= comps[:i].T @ (comps[:i] @ v)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = work @ v
            w -= comps[:i].T @ (comps[:i] @ w)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            w /= nw
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps[i] = v
        lam = v @ cov @ v
        work = work - lam * np.outer(v, v)
    proj = xc @ comps.T
    return (proj, comps) if return_components else proj
