"""Tests for the splat-align command line."""

import hashlib
import json
import logging
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from click.testing import CliRunner
from plyfile import PlyData, PlyElement

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from lib.cli import cli, main
from lib.gaussians import GaussianCloud
from lib.ply_io import load_ply, save_ply

TINY_ENCODER = {"preset": None, "token_dim": 8, "depth": 1, "heads": 2, "embed_dim": 6,
                "grouping": {"num_groups": 4, "group_size": 4, "max_gaussians": 32}}


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        root = logging.getLogger()
        for handler in list(root.handlers):
            if getattr(handler, "_splat_align", False):
                root.removeHandler(handler)
        self.tmp.cleanup()

    def invoke(self, *args):
        return self.runner.invoke(cli, ["--log-level", "ERROR", *[str(a) for a in args]])

    def synth(self, name="ds", seed=42):
        result = self.invoke("synth", "--output", self.dir / name, "--seed", seed, "--classes", 2,
                             "--items-per-class", 5, "--gaussians", 16, "--embed-dim", 6)
        self.assertEqual(result.exit_code, 0, result.output)
        return self.dir / name

    def write_config(self, dataset: Path, **extra):
        config = {"learning_rate": 1e-3, "epochs": 1, "batch_size": 4, "seed": 0, "encoder": TINY_ENCODER,
                  "output_dir": str(self.dir / "run"),
                  "dataset": {"train_manifest": f"{dataset.name}/train.json", "test_manifest": f"{dataset.name}/test.json",
                              "text_table": f"{dataset.name}/text", "image_table": f"{dataset.name}/image",
                              "prompts_table": f"{dataset.name}/prompts"}}
        config.update(extra)
        path = self.dir / "train.json"
        path.write_text(json.dumps(config))
        return path


class TestUsage(CliTestCase):
    """Test cases for help, usage errors and exit codes."""

    def test_help(self):
        """--help lists every subcommand and exits 0."""
        result = self.runner.invoke(cli, ["--help"])
        self.assertEqual(result.exit_code, 0)
        for name in ("synth", "ingest", "convert", "train", "eval", "render", "ablate", "gradcheck"):
            self.assertIn(name, result.output)

    def test_classify_without_checkpoint(self):
        """eval classify without --ckpt is a usage error."""
        result = self.invoke("eval", "classify", "--manifest", "m.json", "--prompts", "p")
        self.assertEqual(result.exit_code, 1)
        self.assertIn("Usage", result.output)
        self.assertIn("--ckpt", result.output)

    def test_bad_background(self):
        """Malformed colors are usage errors."""
        result = self.invoke("render", "--input", "a.ply", "--output", "a.ppm", "--background", "1,2")
        self.assertEqual(result.exit_code, 1)

    def test_missing_checkpoint_is_data_error(self):
        """Evaluating a checkpoint that does not exist exits 2."""
        dataset = self.synth()
        result = self.invoke("eval", "classify", "--ckpt", self.dir / "absent", "--manifest", dataset / "test.json",
                             "--prompts", dataset / "prompts")
        self.assertEqual(result.exit_code, 2)
        self.assertIn("File not found", result.output)

    def test_config_error_exit_code(self):
        """A config with an unknown key exits 1."""
        dataset = self.synth()
        result = self.invoke("train", "--config", self.write_config(dataset, epoch=3))
        self.assertEqual(result.exit_code, 1)
        self.assertIn("Configuration error", result.output)

    def test_unknown_ablation_variant(self):
        """Unknown variants exit 1."""
        dataset = self.synth()
        result = self.invoke("ablate", "--config", self.write_config(dataset), "--variants", "exp9")
        self.assertEqual(result.exit_code, 1)

    def test_main_returns_code(self):
        """main() returns the exit code instead of exiting."""
        self.assertEqual(main(["--log-level", "WARNING", "eval", "classify"]), 1)


class TestCommands(CliTestCase):
    """Test cases for the subcommands."""

    def test_synth_deterministic(self):
        """Two runs with one seed produce identical directories."""
        a = self.synth("a", seed=42)
        b = self.synth("b", seed=42)
        self.assertEqual(tree_hash(a), tree_hash(b))
        self.assertNotEqual(tree_hash(a), tree_hash(self.synth("c", seed=43)))

    def test_train_then_evaluate(self):
        """A trained checkpoint re-evaluates to the metrics it recorded."""
        dataset = self.synth()
        config = self.write_config(dataset)
        result = self.invoke("train", "--config", config, "--seed", 3)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("CLASSIFY REPORT", result.output)
        recorded = json.loads((self.dir / "run" / "checkpoint.json").read_text())["metadata"]
        self.assertEqual(recorded["seed"], 3)

        report_path = self.dir / "report.json"
        result = self.invoke("eval", "classify", "--ckpt", self.dir / "run", "--manifest", dataset / "test.json",
                             "--prompts", dataset / "prompts", "--format", "json", "--output", report_path)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(json.loads(report_path.read_text()), recorded["evaluation"])

        result = self.invoke("eval", "retrieve", "--ckpt", self.dir / "run", "--manifest", dataset / "test.json",
                             "--queries", dataset / "image", "--format", "json")
        self.assertEqual(result.exit_code, 0, result.output)
        report = json.loads(result.output)
        self.assertEqual(report["task"], "retrieve-image")
        self.assertEqual(sorted(report["hit_rates"]), ["1", "3", "5"])

    def test_render(self):
        """Rendering a synthesized cloud writes a non-black PPM."""
        dataset = self.synth()
        cloud = next((dataset / "clouds").glob("*.ply"))
        output = self.dir / "view.ppm"
        result = self.invoke("render", "--input", cloud, "--output", output, "--width", 24, "--height", 24)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("non-black: yes", result.output)
        self.assertTrue(output.read_bytes().startswith(b"P6\n24 24\n255\n"))

    def test_convert(self):
        """A plain point cloud becomes a 3DGS PLY with the requested init."""
        data = np.zeros(3, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
        data["x"] = [0.0, 1.0, 2.0]
        source = self.dir / "points.ply"
        PlyData([PlyElement.describe(data, "vertex")]).write(str(source))
        result = self.invoke("convert", "--input", source, "--output", self.dir / "gauss.ply", "--opacity", 0.4,
                             "--scale", 0.4)
        self.assertEqual(result.exit_code, 0, result.output)
        cloud = load_ply(self.dir / "gauss.ply")
        self.assertEqual(len(cloud), 3)
        np.testing.assert_allclose(cloud.opacities, 0.4, atol=1e-6)

    def test_convert_empty_point_cloud(self):
        """A point cloud without vertices exits 2 and names the file."""
        data = np.zeros(0, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
        source = self.dir / "nothing.ply"
        PlyData([PlyElement.describe(data, "vertex")]).write(str(source))
        result = self.invoke("convert", "--input", source, "--output", self.dir / "gauss.ply")
        self.assertEqual(result.exit_code, 2, result.output)
        self.assertIn("nothing.ply has no points", result.output)
        self.assertFalse((self.dir / "gauss.ply").exists())

    def test_ingest_empty_cloud(self):
        """Ingesting a 0-vertex 3DGS file exits 2 with a diagnostic."""
        save_ply(GaussianCloud.empty(), self.dir / "void.ply")
        result = self.invoke("ingest", self.dir / "void.ply", "--dataset", self.dir / "new", "--label", "thing")
        self.assertEqual(result.exit_code, 2, result.output)
        self.assertIn("Cannot ingest empty cloud", result.output)

    def test_render_empty_cloud(self):
        """An empty cloud renders as the background color."""
        save_ply(GaussianCloud.empty(), self.dir / "void.ply")
        output = self.dir / "void.ppm"
        result = self.invoke("render", "--input", self.dir / "void.ply", "--output", output, "--width", 4,
                             "--height", 3, "--background", "1,1,1")
        self.assertEqual(result.exit_code, 0, result.output)
        header = b"P6\n4 3\n255\n"
        self.assertEqual(output.read_bytes(), header + b"\xff" * 36)

    def test_ingest(self):
        """Ingesting a PLY adds a manifest entry."""
        dataset = self.synth()
        cloud = next((dataset / "clouds").glob("*.ply"))
        result = self.invoke("ingest", cloud, "--dataset", self.dir / "new", "--label", "thing",
                             "--max-gaussians", 8)
        self.assertEqual(result.exit_code, 0, result.output)
        manifest = json.loads((self.dir / "new" / "train.json").read_text())
        self.assertEqual(manifest["items"][0]["label"], "thing")
        self.assertEqual(len(load_ply(self.dir / "new" / "clouds" / cloud.name)), 8)

    def test_ablate_json(self):
        """Ablation prints one JSON row per variant."""
        dataset = self.synth()
        result = self.invoke("ablate", "--config", self.write_config(dataset), "--variants", "exp2,exp3",
                             "--format", "json")
        self.assertEqual(result.exit_code, 0, result.output)
        rows = json.loads(result.output)
        self.assertEqual([r["variant"] for r in rows], ["exp2", "exp3"])
        self.assertFalse(rows[0]["available"])

    def test_gradcheck(self):
        """The op-level gradient suite passes and exits 0."""
        result = self.invoke("gradcheck", "--trials", 2, "--skip-end-to-end")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("checks passed", result.output)
        self.assertNotIn("FAIL", result.output)


if __name__ == '__main__':
    unittest.main()
