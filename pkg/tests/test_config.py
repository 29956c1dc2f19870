"""Tests for configuration loading and logging setup."""

import json
import logging
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from lib.config import (CrossAttentionDirection, EncoderConfig, LossConfig, OptimizerName, Preset, TrainConfig,
                        scaling_preset)
from lib.errors import ConfigError
from lib.logging_config import LEVEL_ENV, configure_logging, resolve_level


class TestTrainConfig(unittest.TestCase):
    """Test cases for TrainConfig parsing."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, data):
        path = self.dir / "conf" / "train.json"
        path.parent.mkdir(exist_ok=True)
        path.write_text(data if isinstance(data, str) else json.dumps(data))
        return path

    def test_defaults(self):
        """Defaults follow the documented training recipe."""
        config = TrainConfig()
        self.assertEqual((config.learning_rate, config.epochs, config.batch_size, config.eval_batch_size),
                         (1e-4, 15, 24, 80))
        self.assertIs(config.optimizer, OptimizerName.ADAM)
        self.assertEqual((config.loss.tau, config.loss.lambda1, config.loss.lambda2), (0.07, 0.5, 0.5))
        self.assertIs(config.encoder.preset, Preset.T)
        self.assertFalse(config.loss.symmetric)

    def test_round_trip(self):
        """to_dict output parses back to an equal config."""
        config = TrainConfig(optimizer="sgd", epochs=3,
                             encoder=scaling_preset("S").with_flags(cross_attention_direction="adv_queries"))
        self.assertEqual(TrainConfig.from_dict(json.loads(json.dumps(config.to_dict()))), config)

    def test_relative_paths_resolved(self):
        """Dataset and checkpoint paths are relative to the config file."""
        path = self._write({"dataset": {"train_manifest": "data/train.json", "text_table": "/abs/text",
                                        "image_table": "data/image"},
                            "fundamental_checkpoint": "runs/exp3"})
        config = TrainConfig.from_json_file(path)
        self.assertEqual(config.dataset.train_manifest, str(path.parent / "data" / "train.json"))
        self.assertEqual(config.dataset.text_table, "/abs/text")
        self.assertIsNone(config.dataset.test_manifest)
        self.assertEqual(config.fundamental_checkpoint, str(path.parent / "runs" / "exp3"))

    def test_preset_with_overrides(self):
        """A preset name expands to its sizes; explicit keys win and a size override drops the preset."""
        config = TrainConfig.from_dict({"encoder": {"preset": "L", "embed_dim": 512, "depth": 2}})
        self.assertEqual((config.encoder.token_dim, config.encoder.depth, config.encoder.embed_dim), (256, 2, 512))
        self.assertIsNone(config.encoder.preset)
        kept = EncoderConfig.from_dict({"preset": "L", "embed_dim": 512, "use_cross_attention": False})
        self.assertIs(kept.preset, Preset.L)
        self.assertIsNone(scaling_preset("S").with_flags(heads=4).preset)
        self.assertIsNone(EncoderConfig.from_dict(config.encoder.to_dict()).preset)

    def test_enum_values(self):
        """String flags become enums."""
        encoder = EncoderConfig(cross_attention_direction="adv_queries")
        self.assertIs(encoder.cross_attention_direction, CrossAttentionDirection.ADV_QUERIES)

    def test_errors(self):
        """Unknown keys, bad enums, bad JSON and out-of-range values are config errors."""
        cases = [
            lambda: TrainConfig.from_dict({"epoch": 3}),
            lambda: TrainConfig.from_dict({"encoder": {"depthh": 2}}),
            lambda: TrainConfig(optimizer="rmsprop"),
            lambda: TrainConfig(learning_rate=0.0),
            lambda: TrainConfig(batch_size=0),
            lambda: TrainConfig(point_cloud_fraction=1.5),
            lambda: LossConfig(tau=0.0),
            lambda: LossConfig(lambda1=-1.0),
            lambda: EncoderConfig(depth=-1),
            lambda: TrainConfig.from_json_file(self._write("{oops")),
        ]
        for i, case in enumerate(cases):
            with self.subTest(case=i):
                with self.assertRaises(ConfigError):
                    case()


class TestLoggingConfig(unittest.TestCase):
    """Test cases for logging setup."""

    def tearDown(self):
        root = logging.getLogger()
        for handler in list(root.handlers):
            if getattr(handler, "_splat_align", False):
                root.removeHandler(handler)

    def test_resolve_level(self):
        """Names, numbers and the environment are accepted."""
        self.assertEqual(resolve_level("debug"), logging.DEBUG)
        self.assertEqual(resolve_level(logging.ERROR), logging.ERROR)
        with patch.dict(os.environ, {LEVEL_ENV: "WARNING"}):
            self.assertEqual(resolve_level(), logging.WARNING)
        with self.assertRaises(ValueError):
            resolve_level("chatty")

    def test_single_handler(self):
        """Configuring twice keeps one splat-align handler."""
        configure_logging("INFO", cloud=False)
        root = configure_logging("DEBUG", cloud=False)
        ours = [h for h in root.handlers if getattr(h, "_splat_align", False)]
        self.assertEqual(len(ours), 1)
        self.assertEqual(root.level, logging.DEBUG)

    def test_cloud_failure_falls_back(self):
        """A cloud logging failure is logged and the stream handler stays."""
        with patch("google.cloud.logging.Client", side_effect=RuntimeError("no credentials")):
            with self.assertLogs("lib.logging_config", level="WARNING") as logs:
                root = configure_logging("INFO", cloud=True)
        self.assertIn("no credentials", logs.output[0])
        self.assertTrue(any(getattr(h, "_splat_align", False) for h in root.handlers))


if __name__ == '__main__':
    unittest.main()
