"""
Frozen text/image embedding tables and the contrastive alignment losses.

The text and image sides are constants; gradients only flow into the 3D
embeddings produced by the encoder.
"""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from lib import autodiff as ad
from lib.autodiff import Tensor
from lib.config import LossConfig
from lib.errors import FormatError, InputError, ShapeError
from lib.gaussians import GaussianCloud

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6
TABLE_MANIFEST = "manifest.json"
TABLE_BLOB = "embeddings.bin"


class Modality(Enum):
    TEXT = "text"
    IMAGE = "image"


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / norms


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Unit-norm vectors keyed by item id, one modality per table."""
    dim: int
    modality: Modality
    ids: tuple
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "ids", tuple(self.ids))
        vectors = np.array(self.vectors, dtype=np.float64).reshape(len(self.ids), self.dim)
        if self.dim < 1:
            raise InputError(f"Embedding dim must be >= 1, got {self.dim}")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("Embedding table ids must be unique")
        drift = np.abs(np.linalg.norm(vectors, axis=1) - 1.0)
        if (drift > UNIT_TOLERANCE).any():
            raise InputError(f"Embedding '{self.ids[int(np.argmax(drift))]}' is not unit norm")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {item: i for i, item in enumerate(self.ids)})

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def __getitem__(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[self._index[item_id]]
        except KeyError:
            raise KeyError(f"No {self.modality.value} embedding for id '{item_id}'") from None

    def lookup(self, item_ids: Iterable[str]) -> np.ndarray:
        return np.stack([self[i] for i in item_ids]) if item_ids else np.zeros((0, self.dim))

    @classmethod
    def from_mapping(cls, entries: Mapping[str, Sequence[float]], modality, normalize: bool = True):
        ids = list(entries)
        vectors = np.array([entries[i] for i in ids], dtype=np.float64)
        if normalize and len(ids):
            vectors = _unit_rows(vectors)
        dim = vectors.shape[1] if len(ids) else 0
        return cls(dim=dim, modality=modality, ids=ids, vectors=vectors)


def save_embedding_table(table: EmbeddingTable, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"dim": table.dim, "modality": table.modality.value, "ids": list(table.ids)}
    (path / TABLE_MANIFEST).write_text(json.dumps(manifest, indent=2))
    (path / TABLE_BLOB).write_bytes(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())
    logger.debug(f"Wrote {len(table)} {table.modality.value} embeddings to {path}")
    return path


def load_embedding_table(path) -> EmbeddingTable:
    path = Path(path)
    manifest_path, blob_path = path / TABLE_MANIFEST, path / TABLE_BLOB
    if not manifest_path.exists() or not blob_path.exists():
        raise FileNotFoundError(f"Embedding table {path} needs {TABLE_MANIFEST} and {TABLE_BLOB}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path} is not valid JSON: {e}") from e
    for key in ("dim", "modality", "ids"):
        if key not in manifest:
            raise FormatError(f"{manifest_path} is missing field '{key}'")
    dim, ids = int(manifest["dim"]), list(manifest["ids"])
    try:
        modality = Modality(manifest["modality"])
    except ValueError:
        raise FormatError(f"{manifest_path} has unknown modality '{manifest['modality']}'") from None

    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if dim < 1 or blob.size != dim * len(ids):
        implied = blob.size / len(ids) if ids else blob.size
        raise FormatError(f"{path}: manifest dim {dim} with {len(ids)} ids, but blob implies dim {implied:g}")
    vectors = blob.reshape(len(ids), dim).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if (norms == 0).any():
        raise FormatError(f"{path}: zero-norm embedding for id '{ids[int(np.argmax(norms == 0))]}'")
    drift = np.abs(norms - 1.0) > UNIT_TOLERANCE
    if drift.any():
        logger.warning(f"{path}: re-normalizing {int(drift.sum())} embeddings")
        vectors[drift] = vectors[drift] / norms[drift, None]
    return EmbeddingTable(dim=dim, modality=modality, ids=ids, vectors=vectors)


@dataclass(frozen=True, eq=False)
class Triplet:
    cloud_id: str
    caption: str
    text_embedding: np.ndarray
    image_embedding: np.ndarray
    cloud: Optional[GaussianCloud] = None


@dataclass(frozen=True, eq=False)
class TripletBatch:
    triplets: tuple

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(self.triplets))
        if not self.triplets:
            raise InputError("A triplet batch needs at least one item")
        for name, matrix in (("text", self.text_matrix), ("image", self.image_matrix)):
            drift = np.abs(np.linalg.norm(matrix, axis=1) - 1.0)
            if (drift > UNIT_TOLERANCE).any():
                raise InputError(f"{name} embedding of '{self.triplets[int(np.argmax(drift))].cloud_id}' is not unit norm")

    def __len__(self):
        return len(self.triplets)

    @property
    def captions(self) -> List[str]:
        return [t.caption for t in self.triplets]

    @property
    def text_matrix(self) -> np.ndarray:
        return np.stack([np.asarray(t.text_embedding, dtype=np.float64) for t in self.triplets])

    @property
    def image_matrix(self) -> np.ndarray:
        return np.stack([np.asarray(t.image_embedding, dtype=np.float64) for t in self.triplets])


def caption_negative_mask(captions: Sequence[str]) -> np.ndarray:
    """mask[i, j] is True for the positive (i == j) and for items with a different caption."""
    keys = [c.strip() for c in captions]
    n = len(keys)
    mask = np.array([[i == j or keys[i] != keys[j] for j in range(n)] for i in range(n)], dtype=bool)
    return mask


def anchored_contrastive_loss(anchors: np.ndarray, gs_embeddings, tau: float, mask: np.ndarray,
                              symmetric: bool = False) -> Tensor:
    """
    -(1/N) sum_i log softmax_j(a_i . g_j / tau)[i] over the unmasked j.

    The symmetric form averages this with the 3D-anchored direction.
    """
    gs = gs_embeddings if isinstance(gs_embeddings, Tensor) else ad.constant(gs_embeddings)
    anchors = np.asarray(anchors, dtype=np.float64)
    if gs.ndim != 2 or anchors.shape != gs.shape:
        raise ShapeError("contrastive loss: anchor and 3D embeddings differ", anchors.shape, gs.shape)
    logits = ad.mul_scalar(ad.matmul(ad.constant(anchors), ad.transpose(gs)), 1.0 / tau)
    loss = ad.mean_all(ad.sub(ad.logsumexp(logits, mask), ad.diagonal(logits)))
    if symmetric:
        flipped = ad.transpose(logits)
        reverse = ad.mean_all(ad.sub(ad.logsumexp(flipped, mask.T), ad.diagonal(flipped)))
        loss = ad.mul_scalar(ad.add(loss, reverse), 0.5)
    return loss


def text_gs_loss(batch: TripletBatch, gs_embeddings, cfg: LossConfig) -> Tensor:
    """Language-3D loss; items sharing a caption are not used as each other's negatives."""
    mask = caption_negative_mask(batch.captions)
    return anchored_contrastive_loss(batch.text_matrix, gs_embeddings, cfg.tau, mask, cfg.symmetric)


def image_gs_loss(batch: TripletBatch, gs_embeddings, cfg: LossConfig) -> Tensor:
    """Image-3D loss; every other item in the batch is a negative."""
    mask = np.ones((len(batch), len(batch)), dtype=bool)
    return anchored_contrastive_loss(batch.image_matrix, gs_embeddings, cfg.tau, mask, cfg.symmetric)


def combined_loss(batch: TripletBatch, gs_embeddings, cfg: LossConfig) -> Tensor:
    """lambda1 * text loss + lambda2 * image loss."""
    return ad.add(ad.mul_scalar(text_gs_loss(batch, gs_embeddings, cfg), cfg.lambda1),
                  ad.mul_scalar(image_gs_loss(batch, gs_embeddings, cfg), cfg.lambda2))


def loss_breakdown(batch: TripletBatch, gs_embeddings, cfg: LossConfig) -> Dict[str, float]:
    gs = np.asarray(gs_embeddings.data if isinstance(gs_embeddings, Tensor) else gs_embeddings)
    text = text_gs_loss(batch, gs, cfg).item()
    image = image_gs_loss(batch, gs, cfg).item()
    return {"text": text, "image": image, "combined": cfg.lambda1 * text + cfg.lambda2 * image}
