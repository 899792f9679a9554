import math
import os
import sys
import time
import unittest

import numpy as np
import numpy.testing as npt
import pytest

# Add the parent directory to the path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.errors import ValidationError
from modules.fk_core import (expand_scales, forward, forward_batch, jacobians_batch, loss, loss_gradients,
                             pose_jacobian, pose_jacobian_mask, scale_jacobian, scale_jacobian_mask)
from modules.skeleton import (HAND_BONES, DofKind, JointSet, PoseVector, ScaleMode, ScaleVector, bone_lengths,
                              default_tree, rest_pose_joints)
from modules.synth import fd_jacobian, max_relative_error, sample_poses
from tests.fixtures import chain


def random_point(rng, tree, mode, margin=0.8):
    theta = PoseVector(theta=sample_poses(rng, 1, tree, margin)[0])
    s = ScaleVector(mode=mode, values=rng.uniform(0.8, 1.25, size=mode.n_params(tree.n_bones)))
    return theta, s


class TestExpandScales(unittest.TestCase):
    """Unit tests for scale expansion across the three scale modes."""

    def setUp(self):
        """Set up test fixtures."""
        self.tree = default_tree()

    def test_global_broadcast(self):
        npt.assert_array_equal(expand_scales(ScaleVector(mode=ScaleMode.GLOBAL, values=[1.2]), self.tree),
                               np.full(HAND_BONES, 1.2))

    def test_five_per_finger(self):
        bones = expand_scales(ScaleVector(mode=ScaleMode.FIVE, values=[1, 1, 1, 1, 2]), self.tree)
        expected = np.where(self.tree.finger_ids == 4, 2.0, 1.0)
        npt.assert_array_equal(bones, expected)

    def test_multi_identity(self):
        v = np.linspace(0.6, 1.9, HAND_BONES)
        npt.assert_array_equal(expand_scales(ScaleVector(mode=ScaleMode.MULTI, values=v), self.tree), v)

    def test_wrong_length_rejected(self):
        with self.assertRaises(ValidationError):
            expand_scales(ScaleVector(mode=ScaleMode.MULTI, values=[1.0] * 14), self.tree)


class TestToyChains(unittest.TestCase):
    """Hand-computable chains."""

    def test_collinear_chain(self):
        tree = chain([3.0, 5.0, 7.0], [1, 2, 3])
        s = ScaleVector(mode=ScaleMode.MULTI, values=[1.5, 0.5, 2.0])
        fk = forward(PoseVector.zeros(tree), s, tree)
        npt.assert_allclose(fk.joints.positions[3], [1.5 * 3 + 0.5 * 5 + 2.0 * 7, 0.0, 0.0], atol=1e-12)

    def test_translate_then_rotate(self):
        tree = chain([1.0, 1.0, 1.0], [1, 2, 3])
        theta = PoseVector(theta=[math.pi / 2, 0.0, 0.0])
        fk = forward(theta, ScaleVector(mode=ScaleMode.MULTI, values=[1.0] * 3), tree)
        npt.assert_allclose(fk.joints.positions[3] - fk.joints.positions[0], [1.0, 2.0, 0.0], atol=1e-12)

        # Explicit caption product T(L1) Rz(θ1) T(L2) Rz(θ2) T(L3) applied to the origin.
        def rz(a):
            c, s = math.cos(a), math.sin(a)
            return np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])

        def tx(d):
            m = np.eye(4)
            m[0, 3] = d
            return m

        product = tx(1) @ rz(math.pi / 2) @ tx(1) @ rz(0) @ tx(1)
        npt.assert_allclose(fk.joints.positions[3], product[:3, 3], atol=1e-12)

    def test_single_bone_derivative(self):
        tree = chain([2.5], [0])
        s = ScaleVector(mode=ScaleMode.MULTI, values=[1.0])
        for angle in (0.0, 0.3, -1.2, 2.0):
            with self.subTest(angle=angle):
                theta = PoseVector(theta=[angle])
                jac = pose_jacobian(theta, s, tree)
                npt.assert_allclose(jac[3:, 0], [-2.5 * math.sin(angle), 2.5 * math.cos(angle), 0.0], atol=1e-12)
                npt.assert_array_equal(jac[:3, 0], 0.0)


class TestForward(unittest.TestCase):
    """Unit tests for the forward kinematic function on the bundled hand."""

    def setUp(self):
        """Set up test fixtures."""
        self.tree = default_tree()
        self.rng = np.random.default_rng(11)

    def test_zero_pose_is_rest_pose(self):
        fk = forward(PoseVector.zeros(self.tree), ScaleVector.ones(ScaleMode.FIVE, self.tree), self.tree)
        npt.assert_array_equal(fk.joints.positions, rest_pose_joints(self.tree).positions)
        self.assertEqual(fk.frames.shape, (self.tree.n_joints, 4, 4))

    def test_out_of_limits_rejected(self):
        theta = np.zeros(self.tree.n_dofs)
        theta[12] = 2.0
        with self.assertRaises(ValidationError) as ctx:
            forward(PoseVector(theta=theta), ScaleVector.ones(ScaleMode.FIVE, self.tree), self.tree)
        self.assertIn('pose parameter 12', str(ctx.exception))

    def test_out_of_bounds_scale_rejected(self):
        s = ScaleVector(mode=ScaleMode.FIVE, values=[1.0, 1.0, 2.5, 1.0, 1.0])
        with self.assertRaises(ValidationError) as ctx:
            forward(PoseVector.zeros(self.tree), s, self.tree)
        self.assertIn('scale 2', str(ctx.exception))

    def test_bone_length_conservation(self):
        for mode in ScaleMode:
            with self.subTest(mode=mode.value):
                n = 1000
                thetas = sample_poses(self.rng, n, self.tree, 1.0)
                scales = self.rng.uniform(self.tree.scale_lo, self.tree.scale_hi,
                                          size=(n, mode.n_params(self.tree.n_bones)))
                positions = forward_batch(thetas, scales, mode, self.tree)
                expected = np.stack([expand_scales(ScaleVector(mode=mode, values=v), self.tree) for v in scales])
                npt.assert_allclose(bone_lengths(positions, self.tree), expected * self.tree.rest_lengths,
                                    rtol=1e-9)

    def test_global_scale_homogeneity(self):
        thetas = sample_poses(self.rng, 100, self.tree, 1.0)
        base = forward_batch(thetas, np.ones((100, 1)), ScaleMode.GLOBAL, self.tree)
        base_rel = base - base[:, :1]
        for s in (0.5, 0.77, 1.0, 1.9):
            with self.subTest(s=s):
                scaled = forward_batch(thetas, np.full((100, 1), s), ScaleMode.GLOBAL, self.tree)
                npt.assert_allclose(scaled - scaled[:, :1], s * base_rel, rtol=1e-9, atol=1e-9)

    def test_root_rotation_equivariance(self):
        theta = sample_poses(self.rng, 1, self.tree, 0.5)[0]
        theta[3:6] = 0.0
        s = np.ones((1, 5))
        p0 = forward_batch(theta, s, ScaleMode.FIVE, self.tree)[0]
        rotated = theta.copy()
        rotated[5] = 0.7  # root rotation about z
        p1 = forward_batch(rotated, s, ScaleMode.FIVE, self.tree)[0]
        c, sn = math.cos(0.7), math.sin(0.7)
        rot = np.array([[c, -sn, 0], [sn, c, 0], [0, 0, 1]])
        root = theta[:3]
        npt.assert_allclose(p1, root + (p0 - root) @ rot.T, atol=1e-10)

    def test_five_matches_replicated_multi(self):
        theta, five = random_point(self.rng, self.tree, ScaleMode.FIVE)
        multi = ScaleVector(mode=ScaleMode.MULTI, values=five.values[self.tree.finger_ids])
        npt.assert_array_equal(expand_scales(five, self.tree), expand_scales(multi, self.tree))
        npt.assert_array_equal(forward(theta, five, self.tree).joints.positions,
                               forward(theta, multi, self.tree).joints.positions)
        summed = np.zeros((3 * self.tree.n_joints, 5))
        jac_multi = scale_jacobian(theta, multi, self.tree)
        for b, f in enumerate(self.tree.finger_ids):
            summed[:, f] += jac_multi[:, b]
        npt.assert_allclose(scale_jacobian(theta, five, self.tree), summed, rtol=1e-12, atol=1e-12)


class TestLoss(unittest.TestCase):
    """Joint loss and its analytic gradients."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.tree = default_tree()
        self.rng = np.random.default_rng(5)
        self.theta, self.s = random_point(self.rng, self.tree, ScaleMode.FIVE)
        self.joints = forward(self.theta, self.s, self.tree).joints

    def test_zero_at_target(self):
        self.assertEqual(loss(self.theta, self.s, self.tree, self.joints), 0.0)
        g_theta, g_s = loss_gradients(self.theta, self.s, self.tree, self.joints)
        npt.assert_array_equal(g_theta, 0.0)
        npt.assert_array_equal(g_s, 0.0)

    def test_single_joint_displacement(self):
        target = self.joints.positions.copy()
        target[7] += [3.0, 4.0, 0.0]
        self.assertAlmostEqual(loss(self.theta, self.s, self.tree, JointSet(positions=target)), 12.5, places=9)

    def test_matches_direct_sum(self):
        target = self.joints.positions + self.rng.normal(0, 5, size=self.joints.positions.shape)
        residual = self.joints.positions - target
        direct = 0.5 * sum(float(r) ** 2 for r in residual.reshape(-1))
        self.assertAlmostEqual(loss(self.theta, self.s, self.tree, JointSet(positions=target)), direct, places=8)

    def test_gradients_linear_in_residual(self):
        direction = self.rng.normal(0, 1, size=self.joints.positions.shape)
        once = loss_gradients(self.theta, self.s, self.tree, JointSet(positions=self.joints.positions + direction))
        twice = loss_gradients(self.theta, self.s, self.tree,
                               JointSet(positions=self.joints.positions + 2 * direction))
        npt.assert_allclose(twice[0], 2 * once[0], rtol=1e-9, atol=1e-9)
        npt.assert_allclose(twice[1], 2 * once[1], rtol=1e-9, atol=1e-9)

    def test_gradients_match_finite_differences(self):
        target = JointSet(positions=self.joints.positions + self.rng.normal(0, 5, size=(16, 3)))
        g_theta, g_s = loss_gradients(self.theta, self.s, self.tree, target)
        h = 1e-6
        fd_theta = np.zeros_like(g_theta)
        for p in range(self.tree.n_dofs):
            plus, minus = self.theta.theta.copy(), self.theta.theta.copy()
            plus[p] += h
            minus[p] -= h
            fd_theta[p] = (loss(PoseVector(theta=plus), self.s, self.tree, target)
                           - loss(PoseVector(theta=minus), self.s, self.tree, target)) / (2 * h)
        fd_s = np.zeros_like(g_s)
        for k in range(g_s.size):
            plus, minus = self.s.values.copy(), self.s.values.copy()
            plus[k] += h
            minus[k] -= h
            fd_s[k] = (loss(self.theta, ScaleVector(mode=self.s.mode, values=plus), self.tree, target)
                       - loss(self.theta, ScaleVector(mode=self.s.mode, values=minus), self.tree, target)) / (2 * h)
        npt.assert_allclose(g_theta, fd_theta, rtol=1e-6, atol=1e-4)
        npt.assert_allclose(g_s, fd_s, rtol=1e-6, atol=1e-4)


class TestJacobians(unittest.TestCase):
    """Analytic Jacobians against the finite-difference oracle and the structural sparsity."""

    def setUp(self):
        """Set up test fixtures."""
        self.tree = default_tree()
        self.rng = np.random.default_rng(21)

    def test_matches_finite_differences(self):
        for mode in ScaleMode:
            theta, s = random_point(self.rng, self.tree, mode)
            with self.subTest(mode=mode.value):
                fd_theta, fd_s = fd_jacobian(theta, s, self.tree)
                self.assertLessEqual(max_relative_error(pose_jacobian(theta, s, self.tree), fd_theta), 1e-6)
                self.assertLessEqual(max_relative_error(scale_jacobian(theta, s, self.tree), fd_s), 1e-6)

    def test_fingertip_flexion_columns_are_exactly_zero(self):
        """Test that fingertip flexion moves no joint, analytically and numerically."""
        tips = [p for p, d in enumerate(self.tree.dofs) if d.joint in (3, 6, 9, 12, 15)]
        self.assertEqual(tips, [8, 11, 14, 17, 20])
        for mode in ScaleMode:
            theta, s = random_point(self.rng, self.tree, mode)
            with self.subTest(mode=mode.value):
                npt.assert_array_equal(pose_jacobian(theta, s, self.tree)[:, tips], 0.0)
                fd_theta, _ = fd_jacobian(theta, s, self.tree)
                npt.assert_array_equal(fd_theta[:, tips], 0.0)

    def test_every_pose_column_within_tolerance(self):
        """Test each pose column on its own so a zero column cannot hide behind a large one."""
        rng = np.random.default_rng(21)
        for mode in ScaleMode:
            theta, s = random_point(rng, self.tree, mode)
            analytic = pose_jacobian(theta, s, self.tree)
            fd_theta, _ = fd_jacobian(theta, s, self.tree)
            for p in range(self.tree.n_dofs):
                with self.subTest(mode=mode.value, dof=p):
                    self.assertLessEqual(max_relative_error(analytic[:, [p]], fd_theta[:, [p]]), 1e-6)

    def test_rotation_leaves_own_joint_fixed(self):
        theta, s = random_point(self.rng, self.tree, ScaleMode.MULTI)
        jac = pose_jacobian(theta, s, self.tree).reshape(self.tree.n_joints, 3, -1)
        for p, dof in enumerate(self.tree.dofs):
            if dof.kind is DofKind.ROTATION:
                npt.assert_array_equal(jac[dof.joint, :, p], 0.0)

    def test_cross_finger_columns_are_zero(self):
        theta, s = random_point(self.rng, self.tree, ScaleMode.MULTI)
        jac = pose_jacobian(theta, s, self.tree)
        index_tip_rows = slice(3 * 6, 3 * 7)
        little_pip_dof = [p for p, d in enumerate(self.tree.dofs) if d.joint == 14][0]
        npt.assert_array_equal(jac[index_tip_rows, little_pip_dof], 0.0)

    def test_sparsity_matches_descendancy(self):
        theta, s = random_point(self.rng, self.tree, ScaleMode.MULTI)
        jac_theta = pose_jacobian(theta, s, self.tree)
        npt.assert_array_equal(jac_theta[~pose_jacobian_mask(self.tree)], 0.0)
        for mode in ScaleMode:
            with self.subTest(mode=mode.value):
                theta, s = random_point(self.rng, self.tree, mode)
                jac_s = scale_jacobian(theta, s, self.tree)
                mask = scale_jacobian_mask(mode, self.tree)
                npt.assert_array_equal(jac_s[~mask], 0.0)
                # Every structurally non-zero column has some non-zero entry.
                self.assertTrue(np.all(np.abs(jac_s).max(axis=0) > 0))

    def test_global_scale_column_at_zero_pose(self):
        theta = PoseVector.zeros(self.tree)
        s = ScaleVector(mode=ScaleMode.GLOBAL, values=[1.3])
        jac = scale_jacobian(theta, s, self.tree).reshape(self.tree.n_joints, 3)
        rest = rest_pose_joints(self.tree).positions
        npt.assert_allclose(jac, rest - rest[0], atol=1e-12)

    def test_translation_columns_are_unit(self):
        theta, s = random_point(self.rng, self.tree, ScaleMode.FIVE)
        jac = pose_jacobian(theta, s, self.tree).reshape(self.tree.n_joints, 3, -1)
        for p in range(3):
            expected = np.zeros(3)
            expected[p] = 1.0
            npt.assert_allclose(jac[:, :, p], np.tile(expected, (self.tree.n_joints, 1)), atol=1e-15)

    def test_batch_matches_single(self):
        thetas = sample_poses(self.rng, 4, self.tree, 0.8)
        scales = self.rng.uniform(0.8, 1.25, size=(4, 5))
        positions, jac_theta, jac_s = jacobians_batch(thetas, scales, ScaleMode.FIVE, self.tree)
        for i in range(4):
            theta = PoseVector(theta=thetas[i])
            s = ScaleVector(mode=ScaleMode.FIVE, values=scales[i])
            npt.assert_allclose(jac_theta[i], pose_jacobian(theta, s, self.tree), atol=1e-12)
            npt.assert_allclose(jac_s[i], scale_jacobian(theta, s, self.tree), atol=1e-12)
            npt.assert_allclose(positions[i], forward(theta, s, self.tree).joints.positions, atol=1e-12)

    @pytest.mark.slow
    def test_gradient_suite_200_points(self):
        start = time.perf_counter()
        for mode in ScaleMode:
            rng = np.random.default_rng(2024)
            thetas = sample_poses(rng, 200, self.tree, 0.8)
            scales = rng.uniform(0.8, 1.25, size=(200, mode.n_params(self.tree.n_bones)))
            _, jac_theta, jac_s = jacobians_batch(thetas, scales, mode, self.tree)
            worst = 0.0
            for i in range(200):
                fd_theta, fd_s = fd_jacobian(PoseVector(theta=thetas[i]), ScaleVector(mode=mode, values=scales[i]),
                                             self.tree)
                worst = max(worst, max_relative_error(jac_theta[i], fd_theta), max_relative_error(jac_s[i], fd_s))
            with self.subTest(mode=mode.value):
                self.assertLessEqual(worst, 1e-6)
        self.assertLess(time.perf_counter() - start, 30.0)

    @pytest.mark.slow
    def test_performance_sanity(self):
        theta = PoseVector.zeros(self.tree)
        s = ScaleVector.ones(ScaleMode.FIVE, self.tree)
        forward(theta, s, self.tree)
        start = time.perf_counter()
        for _ in range(100):
            forward(theta, s, self.tree)
        self.assertLess((time.perf_counter() - start) / 100, 1e-3)

        thetas = sample_poses(self.rng, 1000, self.tree, 0.8)
        start = time.perf_counter()
        jacobians_batch(thetas, np.ones((1000, 5)), ScaleMode.FIVE, self.tree)
        self.assertLess(time.perf_counter() - start, 1.0)


if __name__ == '__main__':
    unittest.main()
