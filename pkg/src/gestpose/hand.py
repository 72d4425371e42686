"""Procedural MANO-like hand: 21-joint kinematic tree, 6D rotations, bone-length
blendshapes, a skinned tube mesh, and the orthographic 2.5D camera convention.

Joint order: wrist, then thumb, index, middle, ring, pinky with four joints each
(three articulated joints and a tip). Lengths are in millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateRotationError, DimensionError
from .tensor import DTYPE, Tensor

N_JOINTS = 21
N_SHAPE = 10
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# parent-relative bone vectors at rest, fingers along +y, palm in the xy plane
_TEMPLATE_OFFSETS = {
    "thumb": [(-24.0, 16.0, -8.0), (-14.0, 20.0, -5.0), (-8.0, 22.0, -3.0), (-5.0, 19.0, -2.0)],
    "index": [(-18.0, 62.0, 0.0), (-3.0, 38.0, 0.0), (-1.0, 24.0, 0.0), (0.0, 20.0, 0.0)],
    "middle": [(-2.0, 66.0, 0.0), (0.0, 42.0, 0.0), (0.0, 27.0, 0.0), (0.0, 21.0, 0.0)],
    "ring": [(14.0, 62.0, 0.0), (2.0, 38.0, 0.0), (1.0, 25.0, 0.0), (0.0, 20.0, 0.0)],
    "pinky": [(28.0, 56.0, 0.0), (3.0, 30.0, 0.0), (2.0, 19.0, 0.0), (1.0, 17.0, 0.0)],
}
_TUBE_RADIUS = {"thumb": 9.0, "index": 8.0, "middle": 8.0, "ring": 7.5, "pinky": 6.5}
_PALM_RADIUS = 11.0
RING_TS = (1.0 / 3.0, 2.0 / 3.0)
RING_VERTS = 5


@dataclass(frozen=True, eq=False)
class KinematicTree:
    names: tuple
    parent: np.ndarray            # (21,), -1 for the wrist
    template_offsets: np.ndarray  # (21, 3)
    chains: tuple                 # five tuples of four joint ids
    rotated_joints: np.ndarray    # (16,) joints carrying a rotation, pose6d row order
    blend: np.ndarray             # (21, 3, 10) bone-length blendshapes
    ancestors: np.ndarray         # (21, 21) A[j, k] = 1 if k == j or k is an ancestor of j
    skin_weights: np.ndarray      # (V, 21)
    template_vertices: np.ndarray  # (V, 3)
    vert_parent: np.ndarray       # (V,) proximal joint of each vertex's bone
    vert_child: np.ndarray        # (V,) distal joint
    vert_t: np.ndarray            # (V,) position along the bone
    vert_radial: np.ndarray       # (V, 3) offset from the bone axis

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    def rest_joints(self, offsets=None):
        offsets = self.template_offsets if offsets is None else offsets
        return self.ancestors @ offsets


def build_hand_tree(seed=0, blend_scale=0.01):
    """Deterministic template tree, blend matrix and tube mesh."""
    names = ["wrist"]
    parent = [-1]
    offsets = [(0.0, 0.0, 0.0)]
    chains = []
    for f in FINGERS:
        base = len(names)
        chain = []
        for k, off in enumerate(_TEMPLATE_OFFSETS[f]):
            names.append(f"{f}{k + 1}")
            parent.append(0 if k == 0 else base + k - 1)
            offsets.append(off)
            chain.append(base + k)
        chains.append(tuple(chain))
    parent = np.array(parent, dtype=np.int64)
    offsets = np.array(offsets, dtype=DTYPE)
    rotated = np.array([0] + [j for c in chains for j in c[:3]], dtype=np.int64)

    anc = np.zeros((N_JOINTS, N_JOINTS), dtype=DTYPE)
    for j in range(N_JOINTS):
        k = j
        while k >= 0:
            anc[j, k] = 1.0
            k = parent[k]

    rng = np.random.default_rng(seed)
    blend = (rng.normal(0.0, blend_scale, size=(N_JOINTS, 3, N_SHAPE))).astype(DTYPE)
    blend[0] = 0.0

    rest = anc @ offsets
    vp, vc, vt, vr = [], [], [], []
    for c in range(1, N_JOINTS):
        p = parent[c]
        finger = FINGERS[(c - 1) // 4]
        radius = _PALM_RADIUS if p == 0 else _TUBE_RADIUS[finger]
        d = rest[c] - rest[p]
        d = d / np.linalg.norm(d)
        u = np.cross(d, [0.0, 0.0, 1.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(d, [1.0, 0.0, 0.0])
        u /= np.linalg.norm(u)
        w = np.cross(d, u)
        for t in RING_TS:
            for k in range(RING_VERTS):
                a = 2.0 * np.pi * k / RING_VERTS
                vp.append(p)
                vc.append(c)
                vt.append(t)
                vr.append(radius * (np.cos(a) * u + np.sin(a) * w))
    vp = np.array(vp, dtype=np.int64)
    vc = np.array(vc, dtype=np.int64)
    vt = np.array(vt, dtype=DTYPE)
    vr = np.array(vr, dtype=DTYPE)
    n_v = len(vp)
    weights = np.zeros((n_v, N_JOINTS), dtype=DTYPE)
    weights[np.arange(n_v), vp] = 1.0 - vt
    weights[np.arange(n_v), vc] += vt
    template_vertices = ((1.0 - vt)[:, None] * rest[vp] + vt[:, None] * rest[vc] + vr).astype(DTYPE)

    return KinematicTree(
        names=tuple(names), parent=parent, template_offsets=offsets, chains=tuple(chains),
        rotated_joints=rotated, blend=blend, ancestors=anc, skin_weights=weights,
        template_vertices=template_vertices, vert_parent=vp, vert_child=vc, vert_t=vt,
        vert_radial=vr)


def dump_template(tree, path):
    """Write the tree (name, parent, offset per line) and blend matrix as text."""
    with open(path, "w") as fh:
        fh.write("# joint parent offset_x offset_y offset_z\n")
        for name, p, off in zip(tree.names, tree.parent, tree.template_offsets):
            fh.write(f"{name} {p} {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}\n")
        fh.write("# blend joint axis coeff0..coeff9\n")
        for j in range(N_JOINTS):
            for a in range(3):
                vals = " ".join(f"{v:.8f}" for v in tree.blend[j, a])
                fh.write(f"blend {j} {'xyz'[a]} {vals}\n")


_DEFAULT_TREE = None


def default_tree():
    global _DEFAULT_TREE
    if _DEFAULT_TREE is None:
        _DEFAULT_TREE = build_hand_tree(0)
    return _DEFAULT_TREE


@dataclass
class HandState:
    pose6d: np.ndarray  # (16, 6) theta
    shape: np.ndarray   # (10,) beta


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=DTYPE)


def matrix_to_rot6d(r):
    """First two columns of ``r`` [..., 3, 3] flattened column by column."""
    r = np.asarray(r)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1).astype(DTYPE)


def rot6d_to_matrix(r, degenerate_tol=1e-6):
    """Gram-Schmidt map from 6D vectors [..., 6] to rotation matrices [..., 3, 3].

    Columns of the result are ``b1 = a1/|a1|``, ``b2`` the normalized residual
    of ``a2`` against ``b1``, and ``b3 = b1 x b2``.
    """
    r = T.as_tensor(r)
    if r.shape[-1] != 6:
        raise DimensionError(f"rot6d_to_matrix: last axis must be 6, got {r.shape}")
    a = r.data.astype(np.float64)
    a1, a2 = a[..., :3], a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= degenerate_tol):
        raise DegenerateRotationError("6D rotation has a zero first vector")
    b1 = a1 / n1
    s = (b1 * a2).sum(-1, keepdims=True)
    u = a2 - s * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n2 <= degenerate_tol * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)):
        raise DegenerateRotationError("6D rotation has a zero or collinear second vector")
    b2 = u / n2
    b3 = np.cross(b1, b2)
    out = np.stack([b1, b2, b3], axis=-1)

    def bw(g):
        g = g.astype(np.float64)
        gb1, gb2, gb3 = g[..., 0], g[..., 1], g[..., 2]
        gb1 = gb1 + np.cross(b2, gb3)
        gb2 = gb2 + np.cross(gb3, b1)
        gu = (gb2 - b2 * (b2 * gb2).sum(-1, keepdims=True)) / n2
        ga2 = gu - b1 * (b1 * gu).sum(-1, keepdims=True)
        gb1 = gb1 - s * gu - (gu * b1).sum(-1, keepdims=True) * a2
        ga1 = (gb1 - b1 * (b1 * gb1).sum(-1, keepdims=True)) / n1
        return (np.concatenate([ga1, ga2], axis=-1).astype(DTYPE),)

    return T.custom_op(out, (r,), "rot6d_to_matrix", bw)


def _batched(x, rank):
    x = T.as_tensor(x)
    if x.ndim == rank - 1:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def apply_shape(tree, shape):
    """Shaped bone offsets ``template ⊙ (1 + blend·beta)`` -> [B, 21, 3]."""
    shape, single = _batched(shape, 2)
    b = shape.shape[0]
    bmat = tree.blend.reshape(N_JOINTS * 3, N_SHAPE).T
    factor = T.reshape(T.scale(T.matmul(shape, Tensor(bmat)), 1.0, 1.0), (b, N_JOINTS, 3))
    out = T.mul(factor, Tensor(np.broadcast_to(tree.template_offsets, (b, N_JOINTS, 3))))
    return out[0] if single else out


@dataclass
class Posed:
    joints: Tensor        # (B, 21, 3)
    local_rots: Tensor    # (B, 16, 3, 3)
    global_rots: Tensor   # (B, 21, 3, 3)
    offsets: Tensor       # (B, 21, 3) shaped bone vectors
    rest_joints: Tensor   # (B, 21, 3) shaped joints at rest


def pose_hand(tree, pose6d, shape):
    """Batched forward kinematics keeping the intermediate frames for skinning."""
    pose6d, _ = _batched(pose6d, 3)
    shape, _ = _batched(shape, 2)
    b = pose6d.shape[0]
    local = rot6d_to_matrix(pose6d)
    offsets = apply_shape(tree, shape)
    row_of = {int(j): k for k, j in enumerate(tree.rotated_joints)}

    rots = [None] * N_JOINTS
    joints = [None] * N_JOINTS
    rots[0] = local[:, row_of[0]]
    joints[0] = Tensor(np.zeros((b, 3), dtype=DTYPE))
    for j in range(1, N_JOINTS):
        p = int(tree.parent[j])
        off = T.reshape(offsets[:, j], (b, 3, 1))
        joints[j] = joints[p] + T.reshape(T.matmul(rots[p], off), (b, 3))
        rots[j] = T.matmul(rots[p], local[:, row_of[j]]) if j in row_of else rots[p]
    rest = T.matmul(Tensor(tree.ancestors), offsets)
    return Posed(joints=T.stack(joints, axis=1), local_rots=local,
                 global_rots=T.stack(rots, axis=1), offsets=offsets, rest_joints=rest)


def forward_kinematics(tree, pose6d, shape):
    """Wrist-relative joint positions [B, 21, 3] (mm) from (theta, beta)."""
    return pose_hand(tree, pose6d, shape).joints


def skin_mesh(tree, joints, rotations, rest_joints):
    """Linear blend skinning of the tube mesh.

    ``joints`` [B, 21, 3] and ``rotations`` [B, 21, 3, 3] are the posed joint
    frames; ``rest_joints`` [B, 21, 3] are the shaped rest joints. Each vertex
    follows its bone's two end frames with weights ``(1 - t, t)``.
    """
    b = joints.shape[0]
    vp, vc = tree.vert_parent, tree.vert_child
    n_v = tree.n_vertices
    # shaped rest vertices, linear in the rest joints
    interp = np.zeros((n_v, N_JOINTS), dtype=DTYPE)
    interp[np.arange(n_v), vp] = 1.0 - tree.vert_t
    interp[np.arange(n_v), vc] += tree.vert_t
    rest_v = T.matmul(Tensor(interp), rest_joints)
    rest_v = T.add_bias(rest_v, Tensor(tree.vert_radial))

    def follow(idx):
        rel = T.reshape(rest_v - rest_joints[:, idx], (b, n_v, 3, 1))
        moved = T.reshape(T.matmul(rotations[:, idx], rel), (b, n_v, 3))
        return moved + joints[:, idx]

    w_p = Tensor(np.broadcast_to((1.0 - tree.vert_t)[None, :, None], (b, n_v, 3)))
    w_c = Tensor(np.broadcast_to(tree.vert_t[None, :, None], (b, n_v, 3)))
    return follow(vp) * w_p + follow(vc) * w_c


def hand_forward(tree, pose6d, shape):
    """``(joints, vertices)`` tensors for a batch of hand states."""
    posed = pose_hand(tree, pose6d, shape)
    verts = skin_mesh(tree, posed.joints, posed.global_rots, posed.rest_joints)
    return posed.joints, verts


def hand_forward_np(tree, pose6d, shape):
    """Non-differentiable numpy convenience wrapper around :func:`hand_forward`."""
    pose6d = np.asarray(pose6d, dtype=DTYPE)
    shape = np.asarray(shape, dtype=DTYPE)
    single = pose6d.ndim == 2
    with T.no_grad():
        j, v = hand_forward(tree, pose6d, shape)
    if single:
        return j.data[0], v.data[0]
    return j.data, v.data


@dataclass(frozen=True)
class CameraConvention:
    """Affine orthographic mapping between wrist-relative mm and grid coordinates.

    ``x``/``y`` in mm map onto ``[0, grid_size-1]`` over ``xy_extent_mm``; ``z``
    maps onto ``[0, depth_bins-1]`` over ``z_extent_mm``. Zero mm sits at the
    grid centre.
    """
    grid_size: int = 16
    depth_bins: int = 8
    xy_extent_mm: float = 360.0
    z_extent_mm: float = 240.0

    def _xy_scale(self):
        return (self.grid_size - 1) / self.xy_extent_mm

    def _z_scale(self):
        return (self.depth_bins - 1) / self.z_extent_mm

    def project_orthographic(self, points):
        """(x, y) grid coordinates and a per-point flag marking clamped points."""
        pts = np.asarray(points, dtype=np.float64)
        g = pts[..., :2] * self._xy_scale() + (self.grid_size - 1) / 2.0
        clamped = np.any((g < 0) | (g > self.grid_size - 1), axis=-1)
        return np.clip(g, 0, self.grid_size - 1), clamped

    def unproject_xy(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - (self.grid_size - 1) / 2.0) / self._xy_scale()

    def camera_to_volume(self, points):
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty_like(pts)
        out[..., :2] = pts[..., :2] * self._xy_scale() + (self.grid_size - 1) / 2.0
        out[..., 2] = pts[..., 2] * self._z_scale() + (self.depth_bins - 1) / 2.0
        return out

    def _vol_affine(self):
        sx = 1.0 / self._xy_scale()
        sz = 1.0 / self._z_scale()
        factor = np.array([sx, sx, sz])
        shift = -np.array([(self.grid_size - 1) / 2.0 * sx, (self.grid_size - 1) / 2.0 * sx,
                           (self.depth_bins - 1) / 2.0 * sz])
        return factor, shift

    def volume_to_camera(self, xyz):
        """Inverse of :meth:`camera_to_volume`; differentiable for tensors."""
        factor, shift = self._vol_affine()
        if isinstance(xyz, Tensor):
            return T.scale(xyz, factor, shift)
        return np.asarray(xyz, dtype=np.float64) * factor + shift

    def project_tensor(self, points):
        """Differentiable unclamped (x, y) grid coordinates of mm points [..., 3]."""
        s = self._xy_scale()
        c = (self.grid_size - 1) / 2.0
        xy = points[..., :2] if not isinstance(points, Tensor) else T.getitem(points, (Ellipsis, slice(0, 2)))
        return T.scale(xy, s, np.array([c, c]))
