"""
Contrastive training loop for the Gaussian encoder.
"""
import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from lib import autodiff as ad
from lib.alignment import (EmbeddingTable, Triplet, TripletBatch, combined_loss, load_embedding_table,
                           loss_breakdown)
from lib.checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from lib.config import Branch, FundamentalInit, OptimizerName, TrainConfig
from lib.dataset import DatasetManifest, ManifestItem, check_embeddings, load_clouds, load_manifest
from lib.encoder import (EncoderWeights, encode_prepared, init_weights, parameter_count, parameter_shapes,
                         prepare_cloud, trainable_parameter_names)
from lib.errors import ConfigError, DataError, NumericError, TrainingError
from lib.evaluation import zero_shot_classify
from lib.gaussians import GaussianCloud, from_point_cloud

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, weights: EncoderWeights, grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            weights[name] = weights[name] - self.learning_rate * g


class Adam:
    """Adam with bias correction; moment state is keyed by parameter name."""

    def __init__(self, learning_rate: float, betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, weights: EncoderWeights, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            weights[name] = weights[name] - self.learning_rate * update


def make_optimizer(config: TrainConfig):
    if config.optimizer is OptimizerName.SGD:
        return SGD(config.learning_rate)
    return Adam(config.learning_rate)


@dataclass(frozen=True, eq=False)
class PreparedItem:
    """A manifest item with its grouped cloud and frozen embeddings."""
    item: ManifestItem
    centers: np.ndarray
    groups: np.ndarray
    text_embedding: np.ndarray
    image_embedding: np.ndarray


def convert_fraction(clouds: List[GaussianCloud], fraction: float, opacity: float, scale: float,
                     rng: np.random.Generator) -> Tuple[List[GaussianCloud], List[int]]:
    """Replace a seeded fraction of clouds by point-cloud-initialized Gaussians built from their positions and colors."""
    count = int(round(fraction * len(clouds)))
    chosen = sorted(rng.permutation(len(clouds))[:count].tolist())
    converted = list(clouds)
    for i in chosen:
        cloud = clouds[i]
        converted[i] = from_point_cloud(cloud.means, cloud.colors, opacity, scale, id=cloud.id)
    if chosen:
        logger.info(f"Converted {len(chosen)} of {len(clouds)} training clouds to point-cloud Gaussians")
    return converted, chosen


def prepare_items(manifest: DatasetManifest, clouds: List[GaussianCloud], text_table: EmbeddingTable,
                  image_table: EmbeddingTable, config: TrainConfig) -> List[PreparedItem]:
    prepared = []
    for item, cloud in zip(manifest.items, clouds):
        centers, groups = prepare_cloud(cloud, config.encoder.grouping)
        prepared.append(PreparedItem(item=item, centers=centers, groups=groups,
                                     text_embedding=text_table[item.text_id],
                                     image_embedding=image_table[item.image_id]))
    return prepared


def load_training_items(config: TrainConfig, rng: np.random.Generator) -> List[PreparedItem]:
    paths = config.dataset
    if not paths.train_manifest or not paths.text_table or not paths.image_table:
        raise ConfigError("dataset needs train_manifest, text_table and image_table")
    manifest = load_manifest(paths.train_manifest)
    if len(manifest) == 0:
        raise DataError(f"Training manifest {paths.train_manifest} has no items")
    text_table = load_embedding_table(paths.text_table)
    image_table = load_embedding_table(paths.image_table)
    check_embeddings(manifest, text_table, image_table)
    clouds = load_clouds(manifest, config.encoder.grouping.max_gaussians)
    if config.point_cloud_fraction > 0:
        clouds, _ = convert_fraction(clouds, config.point_cloud_fraction, config.point_cloud_opacity,
                                     config.point_cloud_scale, rng)
    return prepare_items(manifest, clouds, text_table, image_table, config)


def initial_weights(config: TrainConfig, fundamental: Optional[EncoderWeights] = None) -> EncoderWeights:
    """
    Random initialization, with the fundamental branch copied from a
    pretrained source when fundamental_init is from-checkpoint.
    """
    cfg = config.encoder
    weights = init_weights(cfg, seed=config.seed)
    if cfg.fundamental_init is not FundamentalInit.FROM_CHECKPOINT:
        return weights
    if fundamental is None:
        if not config.fundamental_checkpoint:
            raise ConfigError("fundamental_init is from-checkpoint but no fundamental_checkpoint is set")
        fundamental = load_checkpoint(config.fundamental_checkpoint).weights
    expected = {n: s for n, s in parameter_shapes(cfg).items() if n.startswith(f"{Branch.FUNDAMENTAL.value}.")}
    source = fundamental.branch(Branch.FUNDAMENTAL)
    for name, shape in expected.items():
        if name not in source:
            raise ConfigError(f"Pretrained weights lack fundamental parameter '{name}'")
        if source[name].shape != tuple(shape):
            raise ConfigError(f"Pretrained '{name}' has shape {source[name].shape}, expected {tuple(shape)}")
        weights[name] = source[name]
    logger.info(f"Initialized {len(expected)} fundamental parameters from pretrained weights")
    return weights


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def train_step(weights: EncoderWeights, batch_items: List[PreparedItem], config: TrainConfig,
               trainable: List[str], optimizer) -> Dict[str, float]:
    """One forward/backward/update on a batch; returns the text, image and combined loss values."""
    tensors = weights.tensors(trainable)
    gs = encode_prepared([(p.centers, p.groups) for p in batch_items], tensors, config.encoder)
    batch = TripletBatch([Triplet(cloud_id=p.item.id, caption=p.item.caption, text_embedding=p.text_embedding,
                                  image_embedding=p.image_embedding) for p in batch_items])
    loss = combined_loss(batch, gs, config.loss)
    grads = ad.gradients_by_name(loss, tensors)
    optimizer.step(weights, grads)
    parts = loss_breakdown(batch, gs, config.loss)
    parts["combined"] = loss.item()
    return parts



def train(config: TrainConfig, fundamental: Optional[EncoderWeights] = None, save: bool = True) -> ModelCheckpoint:
    """
    Train an encoder on the configured dataset.

    The checkpoint metadata records the seed, the per-batch loss curve, the
    per-epoch mean losses and, when a test split and class prompts are
    configured, the zero-shot classification report of the final weights.
    """
    rng = np.random.default_rng(config.seed)
    items = load_training_items(config, rng)
    weights = initial_weights(config, fundamental)
    trainable = trainable_parameter_names(config.encoder)
    optimizer = make_optimizer(config)
    logger.info(f"Training {parameter_count(config.encoder)} parameters "
                f"({len(trainable)} trainable tensors) on {len(items)} items")

    loss_curve: List[float] = []
    epoch_losses: List[float] = []
    epoch_parts: List[Dict[str, float]] = []
    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        order = rng.permutation(len(items))
        epoch_values = []
        text_values, image_values = [], []
        for batch_index, indices in enumerate(_batches(order, config.batch_size)):
            try:
                parts = train_step(weights, [items[i] for i in indices], config, trainable, optimizer)
            except NumericError as e:
                if isinstance(e, TrainingError):
                    raise
                raise TrainingError(batch_index, float("nan"), epoch=epoch, detail=str(e)) from e
            value = parts["combined"]
            if not np.isfinite(value):
                raise TrainingError(batch_index, value, epoch=epoch)
            logger.debug(f"epoch {epoch} batch {batch_index}: loss {value:.6f} "
                         f"(text {parts['text']:.6f}, image {parts['image']:.6f})")
            epoch_values.append(value)
            text_values.append(parts["text"])
            image_values.append(parts["image"])
        loss_curve.extend(epoch_values)
        epoch_losses.append(float(np.mean(epoch_values)))
        epoch_parts.append({"text": float(np.mean(text_values)), "image": float(np.mean(image_values))})
        logger.info(f"epoch {epoch}/{config.epochs}: mean loss {epoch_losses[-1]:.6f} "
                    f"(text {epoch_parts[-1]['text']:.6f}, image {epoch_parts[-1]['image']:.6f}, "
                    f"{time.monotonic() - started:.1f}s)")

    metadata = {
        "seed": config.seed,
        "train_config": config.to_dict(),
        "loss_curve": loss_curve,
        "epoch_losses": epoch_losses,
        "epoch_loss_parts": epoch_parts,
        "parameter_count": parameter_count(config.encoder),
    }
    checkpoint = ModelCheckpoint(config=config.encoder, weights=weights, metadata=metadata)
    if config.dataset.test_manifest and config.dataset.prompts_table:
        test = load_manifest(config.dataset.test_manifest)
        if len(test):
            prompts = load_embedding_table(config.dataset.prompts_table)
            metadata["evaluation"] = zero_shot_classify(checkpoint, test, prompts,
                                                        batch_size=config.eval_batch_size).to_dict()
    if save:
        save_checkpoint(checkpoint, config.output_dir)
    return checkpoint
