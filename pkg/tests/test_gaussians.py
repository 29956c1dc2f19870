"""Tests for the Gaussian primitive types and geometry helpers."""

import os
import sys
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from lib.errors import DataError, InputError, InvalidRotationError
from lib.gaussians import (GaussianCloud, GaussianPrimitive, MIN_SCALE, covariance, covariances,
                           from_point_cloud, normalize_cloud, normalize_quaternion, prune_top_n,
                           quaternion_to_matrix)


def random_cloud(rng, n, id="cloud"):
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return GaussianCloud(means=rng.normal(size=(n, 3)), colors=rng.uniform(0, 1, size=(n, 3)),
                         opacities=rng.uniform(0, 1, size=n), scales=rng.uniform(0.01, 0.5, size=(n, 3)),
                         rotations=rotations, id=id)


def dense_covariance(scale, q):
    """Covariance built from explicit matrices: R diag(s) diag(s)^T R^T."""
    w, x, y, z = np.asarray(q) / np.linalg.norm(q)
    r = np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])
    s = np.diag(scale)
    return r @ s @ s.T @ r.T


class TestGaussianCloud(unittest.TestCase):
    """Test cases for GaussianCloud construction and validation."""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.cloud = random_cloud(self.rng, 10)

    def test_arrays_are_read_only(self):
        """Cloud arrays cannot be modified in place."""
        with self.assertRaises(ValueError):
            self.cloud.means[0, 0] = 5.0

    def test_primitives_round_trip(self):
        """Building a cloud from its own primitives keeps every value."""
        rebuilt = GaussianCloud.from_primitives(self.cloud.primitives, id="copy")
        np.testing.assert_array_equal(rebuilt.means, self.cloud.means)
        np.testing.assert_array_equal(rebuilt.rotations, self.cloud.rotations)
        self.assertEqual(len(rebuilt), 10)

    def test_opacity_out_of_range_names_index(self):
        """An opacity above one is rejected with the primitive index."""
        opacities = np.array(self.cloud.opacities)
        opacities[3] = 1.5
        with self.assertRaises(DataError) as ctx:
            self.cloud.replace(opacities=opacities)
        self.assertIn("primitive 3", str(ctx.exception))

    def test_non_positive_scale_rejected(self):
        """Zero scale components are invalid."""
        scales = np.array(self.cloud.scales)
        scales[2, 1] = 0.0
        with self.assertRaises(DataError):
            self.cloud.replace(scales=scales)

    def test_non_finite_mean_rejected(self):
        """NaN positions are invalid."""
        means = np.array(self.cloud.means)
        means[4, 0] = np.nan
        with self.assertRaises(DataError) as ctx:
            self.cloud.replace(means=means)
        self.assertIn("primitive 4", str(ctx.exception))

    def test_row_count_mismatch(self):
        """Every attribute needs one row per primitive."""
        with self.assertRaises(InputError):
            self.cloud.replace(colors=self.cloud.colors[:5])

    def test_empty_cloud(self):
        """An empty cloud is valid and has length zero."""
        self.assertEqual(len(GaussianCloud.empty()), 0)

    def test_empty_cloud_columns(self):
        """Empty columns of the right width pass validation."""
        cloud = GaussianCloud(means=np.zeros((0, 3)), colors=[], opacities=[], scales=[], rotations=[])
        self.assertEqual(len(cloud), 0)
        self.assertEqual(cloud.primitives, [])
        self.assertEqual(len(cloud.take([])), 0)


class TestQuaternions(unittest.TestCase):
    """Test cases for quaternion handling."""

    def test_zero_quaternion_invalid(self):
        """A zero quaternion has no rotation."""
        with self.assertRaises(InvalidRotationError):
            normalize_quaternion([0.0, 0.0, 0.0, 0.0])

    def test_unnormalized_quaternion_invalid(self):
        """Quaternions must already be unit length within tolerance."""
        with self.assertRaises(InvalidRotationError):
            normalize_quaternion([2.0, 0.0, 0.0, 0.0])

    def test_identity_matrix(self):
        """The identity quaternion gives the identity matrix."""
        np.testing.assert_allclose(quaternion_to_matrix([1.0, 0.0, 0.0, 0.0]), np.eye(3))

    def test_batched_matrices_orthonormal(self):
        """Batched conversion yields proper rotations."""
        rng = np.random.default_rng(1)
        q = rng.normal(size=(20, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        r = quaternion_to_matrix(q)
        self.assertEqual(r.shape, (20, 3, 3))
        for m in r:
            np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
            self.assertAlmostEqual(np.linalg.det(m), 1.0, places=12)


class TestCovariance(unittest.TestCase):
    """Test cases for the 3D covariance."""

    def test_identity_rotation_gives_diagonal(self):
        """s=(1,2,3) with identity rotation gives diag(1,4,9)."""
        np.testing.assert_allclose(covariance([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]), np.diag([1.0, 4.0, 9.0]))

    def test_matches_dense_product(self):
        """100 random (s, q) agree with the explicit matrix product."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = rng.uniform(0.01, 2.0, size=3)
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            np.testing.assert_allclose(covariance(s, q), dense_covariance(s, q), atol=1e-10)

    def test_vectorized_matches_single(self):
        """The per-cloud covariance matches the single-primitive one."""
        cloud = random_cloud(np.random.default_rng(3), 8)
        batch = covariances(cloud)
        for i in range(len(cloud)):
            np.testing.assert_allclose(batch[i], covariance(cloud.scales[i], cloud.rotations[i]), atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 3.0), min_size=3, max_size=3),
           st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4))
    def test_double_cover_and_psd(self, scale, raw_q):
        """q and -q give the same symmetric positive semi-definite covariance."""
        q = np.asarray(raw_q)
        norm = np.linalg.norm(q)
        if norm < 1e-3:
            return
        q = q / norm
        sigma = covariance(scale, q)
        np.testing.assert_allclose(sigma, covariance(scale, -q), atol=1e-12)
        np.testing.assert_array_equal(sigma, sigma.T)
        self.assertGreaterEqual(np.linalg.eigvalsh(sigma).min(), -1e-12)

    def test_rejects_non_positive_scale(self):
        """Covariance needs strictly positive scales."""
        with self.assertRaises(InputError):
            covariance([1.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0])


class TestPrune(unittest.TestCase):
    """Test cases for opacity-ranked pruning."""

    def setUp(self):
        self.cloud = random_cloud(np.random.default_rng(4), 30)

    def test_keeps_most_opaque_in_order(self):
        """Pruning keeps the n largest opacities in input order."""
        pruned = prune_top_n(self.cloud, 10)
        self.assertEqual(len(pruned), 10)
        threshold = np.sort(self.cloud.opacities)[-10]
        self.assertTrue((pruned.opacities >= threshold).all())
        kept = [int(np.where(self.cloud.opacities == o)[0][0]) for o in pruned.opacities]
        self.assertEqual(kept, sorted(kept))

    def test_n_at_least_size_is_identity(self):
        """Asking for more primitives than exist keeps the cloud unchanged."""
        self.assertIs(prune_top_n(self.cloud, 30), self.cloud)
        self.assertIs(prune_top_n(self.cloud, 100), self.cloud)

    def test_ties_resolved_by_index(self):
        """Equal opacities keep the lower indices."""
        cloud = self.cloud.replace(opacities=np.full(30, 0.5))
        pruned = prune_top_n(cloud, 5)
        np.testing.assert_array_equal(pruned.means, cloud.means[:5])

    def test_matches_brute_force_oracle(self):
        """50 random instances with repeated opacities agree with a sort-by-(opacity, index) oracle."""
        rng = np.random.default_rng(9)
        for _ in range(50):
            size = int(rng.integers(1, 33))
            cloud = random_cloud(rng, size)
            cloud = cloud.replace(opacities=np.round(cloud.opacities, 1))
            n = int(rng.integers(1, size + 1))
            ranked = sorted(range(size), key=lambda i: (-cloud.opacities[i], i))[:n]
            pruned = prune_top_n(cloud, n)
            np.testing.assert_array_equal(pruned.means, cloud.means[sorted(ranked)])

    def test_invalid_n(self):
        """n must be at least one."""
        with self.assertRaises(InputError):
            prune_top_n(self.cloud, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=1, max_value=40))
    def test_idempotent(self, n):
        """Pruning twice to the same n changes nothing."""
        once = prune_top_n(self.cloud, n)
        twice = prune_top_n(once, n)
        np.testing.assert_array_equal(once.means, twice.means)
        np.testing.assert_array_equal(once.opacities, twice.opacities)


class TestPointCloudConversion(unittest.TestCase):
    """Test cases for point-cloud-initialized Gaussians."""

    def test_isotropic_unrotated(self):
        """Converted points become isotropic Gaussians with identity rotation."""
        points = np.random.default_rng(5).normal(size=(6, 3))
        cloud = from_point_cloud(points, np.full((6, 3), 0.5), 0.4, 0.4)
        np.testing.assert_array_equal(cloud.scales, np.full((6, 3), 0.4))
        np.testing.assert_array_equal(cloud.opacities, np.full(6, 0.4))
        np.testing.assert_array_equal(cloud.rotations, np.tile([1.0, 0.0, 0.0, 0.0], (6, 1)))

    def test_zero_scale_is_floored(self):
        """scale_init=0 is floored so covariances stay invertible."""
        cloud = from_point_cloud(np.zeros((2, 3)), np.zeros((2, 3)), 0.4, 0.0)
        self.assertTrue((cloud.scales == MIN_SCALE).all())

    def test_empty_point_list(self):
        """An empty point list converts to an empty cloud."""
        self.assertEqual(len(from_point_cloud([], [], 0.4, 0.4)), 0)
        cloud = from_point_cloud(np.zeros((0, 3)), np.zeros((0, 3)), 0.4, 0.4, id="none")
        self.assertEqual(cloud.rotations.shape, (0, 4))
        self.assertEqual(cloud.id, "none")

    def test_length_mismatch(self):
        """Points and colors must pair up."""
        with self.assertRaises(InputError):
            from_point_cloud(np.zeros((3, 3)), np.zeros((2, 3)), 0.4, 0.4)


class TestNormalize(unittest.TestCase):
    """Test cases for canonical-frame normalization."""

    def test_unit_radius_zero_centroid(self):
        """Normalized clouds have zero centroid and max radius one."""
        cloud = random_cloud(np.random.default_rng(6), 25)
        normalized, centroid, radius = normalize_cloud(cloud.replace(means=cloud.means * 7 + 3))
        np.testing.assert_allclose(normalized.means.mean(axis=0), 0.0, atol=1e-12)
        self.assertAlmostEqual(np.linalg.norm(normalized.means, axis=1).max(), 1.0, places=12)
        np.testing.assert_allclose(normalized.means * radius + centroid, cloud.means * 7 + 3, atol=1e-12)

    def test_translation_invariant_and_idempotent(self):
        """Shifting the input does not change the result, and normalizing twice is a no-op."""
        cloud = random_cloud(np.random.default_rng(7), 12)
        a, _, _ = normalize_cloud(cloud)
        b, _, _ = normalize_cloud(cloud.replace(means=cloud.means + np.array([5.0, -2.0, 1.0])))
        c, _, _ = normalize_cloud(a)
        np.testing.assert_allclose(a.means, b.means, atol=1e-12)
        np.testing.assert_allclose(a.means, c.means, atol=1e-12)

    def test_single_point_and_empty(self):
        """A single point lands at the origin; an empty cloud is rejected."""
        cloud = GaussianCloud.from_primitives([GaussianPrimitive((1.0, 2.0, 3.0), (0.5, 0.5, 0.5), 0.5,
                                                                 (0.1, 0.1, 0.1))])
        normalized, _, radius = normalize_cloud(cloud)
        np.testing.assert_array_equal(normalized.means, np.zeros((1, 3)))
        self.assertEqual(radius, 1.0)
        with self.assertRaises(InputError):
            normalize_cloud(GaussianCloud.empty())


if __name__ == '__main__':
    unittest.main()
