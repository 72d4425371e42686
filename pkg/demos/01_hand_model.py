"""A tour of the differentiable hand model.

Builds the 21-joint template, poses it with 6D rotations, checks that forward
kinematics keeps bone lengths, and takes one gradient step on a pose so a
fingertip moves toward a target.

    python demos/01_hand_model.py
"""
import numpy as np
from scipy.spatial.transform import Rotation

from gestpose import tensor as T
from gestpose.hand import (FINGERS, IDENTITY_6D, apply_shape, default_tree, hand_forward_np,
                           matrix_to_rot6d, pose_hand)

tree = default_tree()
print(f"joints: {len(tree.parent)}, rotated joints: {len(tree.rotated_joints)}, "
      f"mesh vertices: {tree.n_vertices}")
for name, chain in zip(FINGERS, tree.chains):
    print(f"  {name:>6}: joints {list(chain)}")

# curl every finger by 30 degrees per joint
pose = np.tile(IDENTITY_6D, (16, 1))
curl = matrix_to_rot6d(Rotation.from_euler("x", 30, degrees=True).as_matrix())
pose[1:] = curl
beta = np.zeros(10)
beta[0] = 2.0  # a slightly larger hand

joints, verts = hand_forward_np(tree, pose, beta)
bones = np.linalg.norm(joints[1:] - joints[tree.parent[1:]], axis=1)
rest = np.linalg.norm(apply_shape(tree, beta).data[1:], axis=1)
print(f"max bone-length change under FK: {np.abs(bones - rest).max():.2e} mm")
print(f"mesh extent (mm): {np.ptp(verts, axis=0).round(1)}")

# gradient descent on the pose: pull the index fingertip 10 mm along +x
tip = tree.chains[1][-1]
target = joints[tip] + np.array([10.0, 0.0, 0.0])
theta = T.Tensor(pose[None].astype(np.float32), requires_grad=True)
for step in range(100):
    j = pose_hand(tree, theta, beta[None]).joints
    err = T.sub(j[:, tip], T.Tensor(target[None].astype(np.float32)))
    loss = T.mul(err, err).sum()
    theta.grad = None
    loss.backward()
    theta.data -= 1e-4 * theta.grad
    if step % 25 == 0:
        print(f"step {step:2d}: fingertip distance to target {np.sqrt(loss.item()):.2f} mm")
final = pose_hand(tree, theta, beta[None]).joints.data[0, tip]
print(f"final distance: {np.linalg.norm(final - target):.2f} mm")
