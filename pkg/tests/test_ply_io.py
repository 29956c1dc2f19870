"""Tests for 3DGS PLY reading and writing."""

import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from lib.errors import DataError, FormatError
from lib.gaussians import GaussianCloud
from lib.ply_io import (GAUSSIAN_FIELDS, SH_C0, load_ply, load_point_cloud_ply, logit, rgb_to_sh_dc, save_ply,
                        sh_dc_to_rgb, sigmoid, to_storage)


def sample_cloud(n=16, seed=0):
    rng = np.random.default_rng(seed)
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return GaussianCloud(means=rng.normal(size=(n, 3)), colors=rng.uniform(0.05, 0.95, size=(n, 3)),
                         opacities=rng.uniform(0.05, 0.95, size=n), scales=rng.uniform(0.01, 0.3, size=(n, 3)),
                         rotations=rotations, id="sample")


def write_vertices(path, fields, values, dtype="<f4"):
    data = np.empty(len(values), dtype=[(f, dtype) for f in fields])
    for i, f in enumerate(fields):
        data[f] = values[:, i]
    PlyData([PlyElement.describe(data, "vertex")], text=False, byte_order="<").write(str(path))


class TestActivations(unittest.TestCase):
    """Test cases for the stored-value transforms."""

    def test_sigmoid_logit_inverse(self):
        """logit and sigmoid invert each other away from the clip bounds."""
        p = np.linspace(0.01, 0.99, 50)
        np.testing.assert_allclose(sigmoid(logit(p)), p, atol=1e-12)

    def test_sigmoid_extremes_finite(self):
        """Large logits saturate without overflow."""
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_logit_clips_bounds(self):
        """Opacity 0 and 1 map to finite logits."""
        self.assertTrue(np.isfinite(logit(np.array([0.0, 1.0]))).all())

    def test_color_mapping(self):
        """Mid grey has a zero DC coefficient and the mapping inverts."""
        np.testing.assert_allclose(rgb_to_sh_dc([0.5, 0.5, 0.5]), 0.0)
        np.testing.assert_allclose(sh_dc_to_rgb([1.0, 0.0, -1.0]), [0.5 + SH_C0, 0.5, 0.5 - SH_C0])


class TestPlyRoundTrip(unittest.TestCase):
    """Test cases for save_ply / load_ply."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.cloud = sample_cloud()

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_at_float32_precision(self):
        """Loaded values equal the activations of the stored 32-bit values."""
        path = self.dir / "cloud.ply"
        save_ply(self.cloud, path)
        loaded = load_ply(path)
        stored = to_storage(self.cloud)
        self.assertEqual(loaded.id, "cloud")
        self.assertEqual(len(loaded), len(self.cloud))
        np.testing.assert_array_equal(loaded.means[:, 0], stored["x"].astype(np.float64))
        np.testing.assert_array_equal(loaded.opacities, sigmoid(stored["opacity"].astype(np.float64)))
        np.testing.assert_allclose(loaded.means, self.cloud.means, atol=1e-6)
        np.testing.assert_allclose(loaded.colors, self.cloud.colors, atol=1e-6)
        np.testing.assert_allclose(loaded.opacities, self.cloud.opacities, atol=1e-6)
        np.testing.assert_allclose(loaded.scales, self.cloud.scales, rtol=1e-6)

    def test_binary_little_endian_with_all_fields(self):
        """Files are binary little-endian and carry every 3DGS property."""
        path = self.dir / "cloud.ply"
        save_ply(self.cloud, path)
        ply = PlyData.read(str(path))
        self.assertFalse(ply.text)
        self.assertEqual(ply.byte_order, "<")
        self.assertEqual(tuple(ply["vertex"].data.dtype.names), GAUSSIAN_FIELDS)

    def test_missing_property_named(self):
        """A file without rot_3 is rejected with the property name."""
        fields = [f for f in GAUSSIAN_FIELDS if f != "rot_3"]
        path = self.dir / "broken.ply"
        write_vertices(path, fields, np.ones((3, len(fields))))
        with self.assertRaises(FormatError) as ctx:
            load_ply(path)
        self.assertIn("rot_3", str(ctx.exception))

    def test_empty_vertex_element(self):
        """A 0-vertex file loads as an empty cloud and saves back."""
        path = self.dir / "empty.ply"
        write_vertices(path, GAUSSIAN_FIELDS, np.zeros((0, len(GAUSSIAN_FIELDS))))
        cloud = load_ply(path)
        self.assertEqual(len(cloud), 0)
        save_ply(cloud, self.dir / "again.ply")
        self.assertEqual(len(load_ply(self.dir / "again.ply")), 0)

    def test_non_finite_value_names_index(self):
        """NaN stored values are rejected with the primitive index."""
        values = np.ones((4, len(GAUSSIAN_FIELDS)))
        values[2, 0] = np.nan
        path = self.dir / "nan.ply"
        write_vertices(path, GAUSSIAN_FIELDS, values)
        with self.assertRaises(DataError) as ctx:
            load_ply(path)
        self.assertIn("primitive 2", str(ctx.exception))

    def test_unnormalized_rotation_normalized_on_load(self):
        """Stored quaternions are normalized on load."""
        values = np.zeros((1, len(GAUSSIAN_FIELDS)))
        values[0, GAUSSIAN_FIELDS.index("rot_0")] = 2.0
        path = self.dir / "rot.ply"
        write_vertices(path, GAUSSIAN_FIELDS, values)
        np.testing.assert_allclose(load_ply(path).rotations, [[1.0, 0.0, 0.0, 0.0]])

    def test_extra_properties_ignored(self):
        """Normals and other unknown properties are skipped."""
        fields = GAUSSIAN_FIELDS + ("nx", "ny", "nz")
        values = np.zeros((2, len(fields)))
        values[:, GAUSSIAN_FIELDS.index("rot_0")] = 1.0
        path = self.dir / "extra.ply"
        write_vertices(path, fields, values)
        self.assertEqual(len(load_ply(path)), 2)

    def test_missing_file(self):
        """Loading a nonexistent file raises FileNotFoundError."""
        with self.assertRaises(FileNotFoundError):
            load_ply(self.dir / "nope.ply")


class TestPointCloudPly(unittest.TestCase):
    """Test cases for reading plain point-cloud PLY files."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_uchar_colors_scaled(self):
        """uchar colors are divided by 255 and Gaussians get the requested init."""
        data = np.empty(2, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                  ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        data["x"], data["y"], data["z"] = [0, 1], [0, 1], [0, 1]
        data["red"], data["green"], data["blue"] = [255, 0], [0, 255], [51, 102]
        path = self.dir / "points.ply"
        PlyData([PlyElement.describe(data, "vertex")]).write(str(path))
        cloud = load_point_cloud_ply(path, opacity_init=0.4, scale_init=0.4)
        np.testing.assert_allclose(cloud.colors, [[1.0, 0.0, 0.2], [0.0, 1.0, 0.4]])
        np.testing.assert_allclose(cloud.opacities, [0.4, 0.4])
        np.testing.assert_allclose(cloud.scales, np.full((2, 3), 0.4))

    def test_empty_point_cloud(self):
        """A point cloud without points converts to an empty cloud."""
        path = self.dir / "none.ply"
        write_vertices(path, ("x", "y", "z"), np.zeros((0, 3)))
        self.assertEqual(len(load_point_cloud_ply(path, 0.4, 0.4)), 0)

    def test_missing_position_rejected(self):
        """Point clouds need x, y and z."""
        path = self.dir / "flat.ply"
        write_vertices(path, ("x", "y"), np.zeros((2, 2)))
        with self.assertRaises(FormatError):
            load_point_cloud_ply(path, 0.4, 0.4)


if __name__ == '__main__':
    unittest.main()
