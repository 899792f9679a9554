"""
Hybrid forward-kinematics layer.

Maps pose parameters Θ and bone-length scale parameters S to 3D joint
positions, together with the Euclidean joint loss and its analytic Jacobians
with respect to both Θ and S.

Every segment of the chain is composed as

    [Rot_y(splay)] · [Trans_x(s·L)] · [Rot_axis(θ) for each DoF on the distal joint]

so a joint's rotation DoFs move only its descendants. The root frame is the
root translation followed by the root rotations in DoF order.

The single-sample functions validate their inputs; the `*_batch` functions
take a leading batch axis and skip bound checks (callers keep parameters
feasible by projection or squashing).
"""

import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import ValidationError
from .skeleton import (BONE_AXIS, HAND_FINGERS, DofKind, JointSet, KinematicTree, PoseVector, ScaleMode,
                       ScaleVector)

logger = logging.getLogger(__name__)

MODULE = 'fk_core'

_AXIS_INDEX = {'x': 0, 'y': 1, 'z': 2}


def _eye(batch: int) -> np.ndarray:
    return np.broadcast_to(np.eye(4), (batch, 4, 4)).copy()


def rotation(axis: str, angle: np.ndarray) -> np.ndarray:
    """Homogeneous rotations about a principal axis, shape (B, 4, 4)."""
    angle = np.atleast_1d(np.asarray(angle, dtype=np.float64))
    c, s = np.cos(angle), np.sin(angle)
    out = _eye(angle.size)
    i, j = {'x': (1, 2), 'y': (2, 0), 'z': (0, 1)}[axis]
    out[:, i, i] = c
    out[:, i, j] = -s
    out[:, j, i] = s
    out[:, j, j] = c
    return out


def translation(axis: str, distance: np.ndarray) -> np.ndarray:
    distance = np.atleast_1d(np.asarray(distance, dtype=np.float64))
    out = _eye(distance.size)
    out[:, _AXIS_INDEX[axis], 3] = distance
    return out


def translation_prime(axis: str, rate: np.ndarray) -> np.ndarray:
    """Derivative of `translation(axis, rate·s)` with respect to s."""
    rate = np.atleast_1d(np.asarray(rate, dtype=np.float64))
    out = np.zeros((rate.size, 4, 4))
    out[:, _AXIS_INDEX[axis], 3] = rate
    return out


def dof_reach(tree: KinematicTree, p: int) -> np.ndarray:
    """Joints whose position depends on DoF p, (N,) bool.

    A rotation turns its joint's frame about the joint itself, so only strict
    descendants move; a root translation also moves the root.
    """
    dof = tree.dofs[p]
    reach = tree.descendant_mask[dof.joint].copy()
    if dof.kind is DofKind.ROTATION:
        reach[dof.joint] = False
    return reach


def scale_expansion_matrix(mode: ScaleMode, tree: KinematicTree) -> np.ndarray:
    """0/1 matrix E (n_bones × K) with per-bone scales = E · values."""
    mode = ScaleMode(mode)
    if mode is ScaleMode.GLOBAL:
        return np.ones((tree.n_bones, 1))
    if mode is ScaleMode.FIVE:
        expand = np.zeros((tree.n_bones, HAND_FINGERS))
        expand[np.arange(tree.n_bones), tree.finger_ids] = 1.0
        return expand
    return np.eye(tree.n_bones)


def expand_scales(s: ScaleVector, tree: KinematicTree) -> np.ndarray:
    """Per-bone scale factors for any scale mode."""
    expected = s.mode.n_params(tree.n_bones)
    if s.values.size != expected:
        raise ValidationError(f'{s.mode.value} mode expects {expected} scales, got {s.values.size}', MODULE)
    return scale_expansion_matrix(s.mode, tree) @ s.values


class ChainCache:
    """
    Forward pass over a batch with every intermediate frame kept.

    `pre[p]` is the world frame just before the elementary transform of DoF p;
    `bone_base[b]` is the frame where bone b's translation starts.
    Jacobian columns reuse these instead of re-running the chain.
    """

    def __init__(self, tree: KinematicTree, thetas: np.ndarray, bone_scales: np.ndarray):
        self.tree = tree
        self.thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        self.bone_scales = np.atleast_2d(np.asarray(bone_scales, dtype=np.float64))
        batch = self.thetas.shape[0]
        self.batch = batch

        self.pre = [None] * tree.n_dofs
        self.bone_base = [None] * tree.n_bones
        frames = [None] * tree.n_joints

        root = _eye(batch)
        root_dofs = tree.dofs_of_joint[0]
        for p in root_dofs:
            dof = tree.dofs[p]
            if dof.kind is DofKind.TRANSLATION:
                self.pre[p] = root
                root = root @ translation(dof.axis, self.thetas[:, p])
        for p in root_dofs:
            dof = tree.dofs[p]
            if dof.kind is DofKind.ROTATION:
                self.pre[p] = root
                root = root @ rotation(dof.axis, self.thetas[:, p])
        frames[0] = root

        for j in tree.order[1:]:
            b = tree.bone_of_joint[j]
            base = frames[tree.bones[b].parent]
            if tree.splay_rad[b] != 0.0:
                base = base @ rotation('y', np.full(batch, tree.splay_rad[b]))
            self.bone_base[b] = base
            frame = base @ translation(BONE_AXIS, self.bone_scales[:, b] * tree.rest_lengths[b])
            for p in tree.dofs_of_joint[j]:
                self.pre[p] = frame
                frame = frame @ rotation(tree.dofs[p].axis, self.thetas[:, p])
            frames[j] = frame

        self.frames = np.stack(frames, axis=1)
        self.positions = self.frames[:, :, :3, 3]

    def pose_jacobian(self) -> np.ndarray:
        """(B, 3N, D): rotation columns are axis × (point - pivot), translation columns the world axis.

        The DoF axis in world coordinates is a column of pre[p]; the pivot is its origin.
        Joints outside `dof_reach` get exact zeros.
        """
        tree = self.tree
        n = tree.n_joints
        jac = np.zeros((tree.n_dofs, self.batch, n, 3))
        for p, dof in enumerate(tree.dofs):
            affected = dof_reach(tree, p)
            if not affected.any():
                continue
            axis = self.pre[p][:, :3, _AXIS_INDEX[dof.axis]]
            if dof.kind is DofKind.ROTATION:
                arm = self.positions[:, affected] - self.pre[p][:, None, :3, 3]
                jac[p][:, affected] = np.cross(np.broadcast_to(axis[:, None, :], arm.shape), arm)
            else:
                jac[p][:, affected] = axis[:, None, :]
        return jac.transpose(1, 2, 3, 0).reshape(self.batch, 3 * n, tree.n_dofs)

    def bone_scale_jacobian(self) -> np.ndarray:
        """(B, 3N, n_bones): derivative with respect to each bone's own scale factor."""
        tree = self.tree
        n = tree.n_joints
        jac = np.zeros((tree.n_bones, self.batch, n, 3))
        origin = np.zeros((self.batch, 4))
        origin[:, 3] = 1.0
        for b in range(tree.n_bones):
            prime = translation_prime(BONE_AXIS, np.full(self.batch, tree.rest_lengths[b]))
            # T' kills the rotation block, so the rest of the chain contributes only its w = 1.
            column = np.einsum('bij,bj->bi', self.bone_base[b] @ prime, origin)[:, :3]
            jac[b][:, tree.bone_path_mask[b]] = column[:, None, :]
        return jac.transpose(1, 2, 3, 0).reshape(self.batch, 3 * n, tree.n_bones)


class FkResult(BaseModel):
    """Joint positions plus the cached chain transforms they came from."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    joints: JointSet
    cache: ChainCache

    @property
    def frames(self) -> np.ndarray:
        return self.cache.frames[0]


def check_pose(theta: PoseVector, tree: KinematicTree) -> None:
    if theta.theta.size != tree.n_dofs:
        raise ValidationError(f'expected {tree.n_dofs} pose parameters, got {theta.theta.size}', MODULE)
    outside = np.flatnonzero((theta.theta < tree.dof_lo) | (theta.theta > tree.dof_hi))
    if outside.size:
        p = int(outside[0])
        raise ValidationError(
            f'pose parameter {p} = {theta.theta[p]:.6g} outside limits '
            f'[{tree.dof_lo[p]:.6g}, {tree.dof_hi[p]:.6g}]', MODULE)


def check_scales(s: ScaleVector, tree: KinematicTree) -> None:
    expected = s.mode.n_params(tree.n_bones)
    if s.values.size != expected:
        raise ValidationError(f'{s.mode.value} mode expects {expected} scales, got {s.values.size}', MODULE)
    outside = np.flatnonzero((s.values < tree.scale_lo) | (s.values > tree.scale_hi))
    if outside.size:
        k = int(outside[0])
        raise ValidationError(
            f'scale {k} = {s.values[k]:.6g} outside bounds [{tree.scale_lo}, {tree.scale_hi}]', MODULE)


def forward(theta: PoseVector, s: ScaleVector, tree: KinematicTree) -> FkResult:
    """
    Forward kinematic function F_k(Θ, S) = J.

    Raises:
        ValidationError: pose outside its limits or scales outside their bounds.
    """
    check_pose(theta, tree)
    check_scales(s, tree)
    cache = ChainCache(tree, theta.theta[None, :], expand_scales(s, tree)[None, :])
    return FkResult(joints=JointSet(positions=cache.positions[0]), cache=cache)


def _residual(fk: FkResult, target: JointSet) -> np.ndarray:
    if target.positions.shape != fk.joints.positions.shape:
        raise ValidationError(
            f'target has shape {target.positions.shape}, expected {fk.joints.positions.shape}', MODULE)
    return (fk.joints.positions - target.positions).reshape(-1)


def loss(theta: PoseVector, s: ScaleVector, tree: KinematicTree, target: JointSet) -> float:
    """½‖F_k(Θ,S) − J_GT‖² over all joint coordinates, in mm²."""
    r = _residual(forward(theta, s, tree), target)
    return 0.5 * float(r @ r)


def pose_jacobian(theta: PoseVector, s: ScaleVector, tree: KinematicTree,
                  fk: Optional[FkResult] = None) -> np.ndarray:
    """∂J/∂Θ, shape (3N, D); pass `fk` to reuse an existing forward pass."""
    fk = fk or forward(theta, s, tree)
    return fk.cache.pose_jacobian()[0]


def scale_jacobian(theta: PoseVector, s: ScaleVector, tree: KinematicTree,
                   fk: Optional[FkResult] = None) -> np.ndarray:
    """∂J/∂S in the mode of `s`, shape (3N, K)."""
    fk = fk or forward(theta, s, tree)
    return fk.cache.bone_scale_jacobian()[0] @ scale_expansion_matrix(s.mode, tree)


def loss_gradients(theta: PoseVector, s: ScaleVector, tree: KinematicTree,
                   target: JointSet) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the joint loss: (J_Θᵀ r, J_Sᵀ r) with r = F_k(Θ,S) − J_GT."""
    fk = forward(theta, s, tree)
    r = _residual(fk, target)
    return pose_jacobian(theta, s, tree, fk).T @ r, scale_jacobian(theta, s, tree, fk).T @ r


def forward_batch(thetas: np.ndarray, scale_values: np.ndarray, mode: ScaleMode,
                  tree: KinematicTree) -> np.ndarray:
    """Joint positions (B, N, 3) for a batch of parameter vectors."""
    thetas = np.atleast_2d(thetas)
    bone_scales = np.atleast_2d(scale_values) @ scale_expansion_matrix(mode, tree).T
    return ChainCache(tree, thetas, bone_scales).positions


def jacobians_batch(thetas: np.ndarray, scale_values: np.ndarray, mode: ScaleMode,
                    tree: KinematicTree) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions (B, N, 3), pose Jacobians (B, 3N, D) and mode scale Jacobians (B, 3N, K)."""
    expand = scale_expansion_matrix(mode, tree)
    cache = ChainCache(tree, np.atleast_2d(thetas), np.atleast_2d(scale_values) @ expand.T)
    return cache.positions, cache.pose_jacobian(), cache.bone_scale_jacobian() @ expand


def loss_gradients_batch(thetas: np.ndarray, scale_values: np.ndarray, mode: ScaleMode,
                         tree: KinematicTree, targets: np.ndarray
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample residuals (B, 3N) and loss gradients (B, D), (B, K)."""
    positions, jac_theta, jac_s = jacobians_batch(thetas, scale_values, mode, tree)
    residual = (positions - np.asarray(targets, dtype=np.float64)).reshape(positions.shape[0], -1)
    grad_theta = np.einsum('bij,bi->bj', jac_theta, residual)
    grad_s = np.einsum('bij,bi->bj', jac_s, residual)
    return residual, grad_theta, grad_s


def pose_jacobian_mask(tree: KinematicTree) -> np.ndarray:
    """Structural non-zero pattern of the pose Jacobian, (3N, D) bool."""
    mask = np.stack([dof_reach(tree, p) for p in range(tree.n_dofs)], axis=1)
    return np.repeat(mask, 3, axis=0)


def scale_jacobian_mask(mode: ScaleMode, tree: KinematicTree) -> np.ndarray:
    """Structural non-zero pattern of the scale Jacobian in a given mode, (3N, K) bool."""
    per_bone = tree.bone_path_mask.T.astype(np.float64) @ scale_expansion_matrix(mode, tree)
    return np.repeat(per_bone > 0, 3, axis=0)
