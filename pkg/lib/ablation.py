"""
Ablation runner over the encoder's branch and guidance flags.

Variants that start from a frozen, pretrained fundamental branch reuse the
weights of a single-branch run trained with the same seed and data.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from lib.config import FundamentalInit, TrainConfig
from lib.encoder import EncoderWeights
from lib.errors import ConfigError, DataError
from lib.evaluation import MetricsReport
from lib.training import train

logger = logging.getLogger(__name__)

# exp1/exp2 need a convolutional point baseline that is not part of this package.
UNAVAILABLE = ("exp1", "exp2")
VARIANTS = {
    "exp3": dict(use_advanced_branch=False, use_cross_attention=False, freeze_fundamental=False,
                 fundamental_init=FundamentalInit.RANDOM),
    "exp4": dict(use_advanced_branch=False, use_cross_attention=False, freeze_fundamental=True,
                 fundamental_init=FundamentalInit.FROM_CHECKPOINT),
    "exp5": dict(use_advanced_branch=True, use_cross_attention=False, freeze_fundamental=True,
                 fundamental_init=FundamentalInit.FROM_CHECKPOINT),
    "exp6": dict(use_advanced_branch=True, use_cross_attention=True, freeze_fundamental=False,
                 fundamental_init=FundamentalInit.RANDOM),
    "exp7": dict(use_advanced_branch=True, use_cross_attention=True, freeze_fundamental=True,
                 fundamental_init=FundamentalInit.FROM_CHECKPOINT),
}
KNOWN_VARIANTS = UNAVAILABLE + tuple(VARIANTS)


@dataclass
class AblationRow:
    variant: str
    available: bool
    parallel: bool = False
    cross_attention: bool = False
    frozen: bool = False
    pretrained: bool = False
    reports: Dict[int, MetricsReport] = field(default_factory=dict)

    @property
    def mean_top1(self) -> Optional[float]:
        if not self.reports:
            return None
        return float(np.mean([r.top1 for r in self.reports.values()]))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "available": self.available,
            "parallel": self.parallel,
            "cross_attention": self.cross_attention,
            "frozen": self.frozen,
            "pretrained": self.pretrained,
            "per_seed_top1": {str(s): r.top1 for s, r in sorted(self.reports.items())},
            "mean_top1": self.mean_top1,
        }


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"Unknown or unavailable ablation variant '{variant}'")
    encoder = base.encoder.with_flags(**VARIANTS[variant])
    output_dir = str(Path(base.output_dir) / variant / f"seed_{seed}")
    return replace(base, encoder=encoder, seed=seed, output_dir=output_dir, fundamental_checkpoint=None)


def run_ablation(base: TrainConfig, variants: Sequence[str], seeds: Optional[Sequence[int]] = None,
                 save_checkpoints: bool = False) -> List[AblationRow]:
    """Train every requested variant once per seed and collect its classification report."""
    unknown = [v for v in variants if v not in KNOWN_VARIANTS]
    if unknown:
        raise ConfigError(f"Unknown ablation variant(s): {', '.join(unknown)} "
                          f"(expected some of: {', '.join(KNOWN_VARIANTS)})")
    if not base.dataset.test_manifest or not base.dataset.prompts_table:
        raise ConfigError("Ablation needs dataset.test_manifest and dataset.prompts_table for evaluation")
    seeds = list(seeds) if seeds else [base.seed]

    pretrained: Dict[int, EncoderWeights] = {}

    def fundamental_for(seed: int) -> EncoderWeights:
        if seed not in pretrained:
            logger.info(f"Pre-training the fundamental branch for seed {seed}")
            pretrained[seed] = train(variant_config(base, "exp3", seed), save=False).weights
        return pretrained[seed]

    rows = []
    for variant in variants:
        if variant in UNAVAILABLE:
            logger.warning(f"Variant {variant} is not available; reporting it as such")
            rows.append(AblationRow(variant=variant, available=False))
            continue
        flags = VARIANTS[variant]
        row = AblationRow(variant=variant, available=True, parallel=flags["use_advanced_branch"],
                          cross_attention=flags["use_cross_attention"], frozen=flags["freeze_fundamental"],
                          pretrained=flags["fundamental_init"] is FundamentalInit.FROM_CHECKPOINT)
        for seed in seeds:
            config = variant_config(base, variant, seed)
            fundamental = fundamental_for(seed) if row.pretrained else None
            checkpoint = train(config, fundamental=fundamental, save=save_checkpoints)
            if "evaluation" not in checkpoint.metadata:
                raise DataError(f"{variant} seed {seed}: the test split is empty, nothing to evaluate")
            row.reports[seed] = MetricsReport.from_dict(checkpoint.metadata["evaluation"])
            logger.info(f"{variant} seed {seed}: Top-1 {row.reports[seed].top1:.2%}")
        rows.append(row)
    return rows


def format_ablation_text(rows: Sequence[AblationRow]) -> str:
    """Comparison table with one line per variant."""
    def mark(flag):
        return "on" if flag else "off"

    output = ["ABLATION REPORT", "=" * 50,
              f"{'variant':<8} {'par.':>5} {'cro.':>5} {'frozen':>7} {'pretr.':>7} {'mean top-1':>11}"]
    for row in rows:
        if not row.available:
            output.append(f"{row.variant:<8} {'not available':>39}")
            continue
        output.append(f"{row.variant:<8} {mark(row.parallel):>5} {mark(row.cross_attention):>5} "
                      f"{mark(row.frozen):>7} {mark(row.pretrained):>7} {row.mean_top1:>11.2%}")
    return "\n".join(output)
