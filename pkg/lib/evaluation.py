"""
Zero-shot classification and cross-modal retrieval metrics.

Every query is ranked against a gallery by cosine similarity. Ties are
broken by the lower gallery index, so a query's rank is the number of
gallery entries scoring strictly higher plus the number scoring equal at a
lower index.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from lib.alignment import EmbeddingTable, Modality
from lib.checkpoint import ModelCheckpoint
from lib.dataset import DatasetManifest, load_clouds
from lib.encoder import encode
from lib.errors import DataError, InputError
from lib.gaussians import GaussianCloud

logger = logging.getLogger(__name__)


class Task(Enum):
    CLASSIFY = "classify"
    RETRIEVE_TEXT = "retrieve-text"
    RETRIEVE_IMAGE = "retrieve-image"


DEFAULT_KS = {
    Task.CLASSIFY: (1, 3, 5),
    Task.RETRIEVE_TEXT: (1, 5, 10),
    Task.RETRIEVE_IMAGE: (1, 3, 5),
}


@dataclass
class MetricsReport:
    task: Task
    hit_rates: Dict[int, float]
    per_class_top1: Dict[str, float]
    mean_average_accuracy: float
    num_queries: int
    ranks: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.task = Task(self.task)
        previous = 0.0
        for k in sorted(self.hit_rates):
            rate = self.hit_rates[k]
            if not 0.0 <= rate <= 1.0 or rate < previous:
                raise InputError(f"Hit rate at k={k} is {rate}; rates must lie in [0, 1] and grow with k")
            previous = rate

    @property
    def top1(self) -> float:
        return self.hit_rates.get(1, float("nan"))

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "hit_rates": {str(k): v for k, v in sorted(self.hit_rates.items())},
            "per_class_top1": dict(sorted(self.per_class_top1.items())),
            "mean_average_accuracy": self.mean_average_accuracy,
            "num_queries": self.num_queries,
            "ranks": list(self.ranks),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(task=Task(data["task"]),
                   hit_rates={int(k): float(v) for k, v in data["hit_rates"].items()},
                   per_class_top1={str(k): float(v) for k, v in data["per_class_top1"].items()},
                   mean_average_accuracy=float(data["mean_average_accuracy"]),
                   num_queries=int(data["num_queries"]),
                   ranks=[int(r) for r in data.get("ranks", [])])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise InputError("Cannot rank zero-length embeddings")
    return x / norms


def cosine_similarity(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    return _unit_rows(queries) @ _unit_rows(gallery).T


def target_ranks(similarity: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's target within its similarity row."""
    ranks = np.empty(len(targets), dtype=np.int64)
    indices = np.arange(similarity.shape[1])
    for q, t in enumerate(targets):
        row = similarity[q]
        ranks[q] = np.count_nonzero(row > row[t]) + np.count_nonzero((row == row[t]) & (indices < t))
    return ranks


def build_report(task: Task, ranks: np.ndarray, labels: Sequence[str], ks: Sequence[int]) -> MetricsReport:
    """Hit rates per k, per-class Top-1 and their mean from per-query ranks."""
    if len(ranks) == 0:
        raise DataError(f"No queries to evaluate for {task.value}")
    if any(k < 1 for k in ks):
        raise InputError(f"k values must be >= 1, got {list(ks)}")
    ranks = np.asarray(ranks)
    hit_rates = {int(k): float(np.mean(ranks < k)) for k in sorted(set(ks))}
    per_class = {}
    labels = np.asarray(labels)
    for label in sorted(set(labels.tolist())):
        per_class[label] = float(np.mean(ranks[labels == label] == 0))
    mean_accuracy = float(np.mean(list(per_class.values())))
    return MetricsReport(task=task, hit_rates=hit_rates, per_class_top1=per_class,
                         mean_average_accuracy=mean_accuracy, num_queries=len(ranks), ranks=ranks.tolist())


def encode_clouds(clouds: Sequence[GaussianCloud], checkpoint: ModelCheckpoint,
                  workers: Optional[int] = None, batch_size: Optional[int] = None) -> np.ndarray:
    """
    (N, E) embeddings in input order.

    Clouds are handed to the worker pool batch_size at a time (all at once
    when None); items inside a batch are encoded concurrently.
    """
    if batch_size is not None and batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    tensors = checkpoint.weights.tensors()
    step = batch_size or max(len(clouds), 1)
    embeddings = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(clouds), step):
            batch = clouds[start:start + step]
            embeddings.extend(pool.map(lambda c: encode(c, checkpoint.weights, checkpoint.config, tensors), batch))
            logger.debug(f"Encoded {start + len(batch)}/{len(clouds)} clouds")
    if not embeddings:
        return np.zeros((0, checkpoint.config.embed_dim))
    return np.stack(embeddings)


def classify_embeddings(embeddings: np.ndarray, labels: Sequence[str], prompts: EmbeddingTable,
                        ks: Sequence[int] = DEFAULT_KS[Task.CLASSIFY]) -> MetricsReport:
    """Rank each embedding against every class prompt; a hit is the true class within the top k."""
    unknown = sorted(set(labels) - set(prompts.ids))
    if unknown:
        raise DataError(f"Unknown class label(s) with no prompt embedding: {', '.join(unknown)}")
    targets = [prompts.ids.index(label) for label in labels]
    ranks = target_ranks(cosine_similarity(embeddings, prompts.vectors), targets)
    return build_report(Task.CLASSIFY, ranks, labels, ks)


def retrieve_embeddings(queries: np.ndarray, gallery: np.ndarray, labels: Sequence[str], task: Task,
                        ks: Optional[Sequence[int]] = None) -> MetricsReport:
    """Query i is paired with gallery item i."""
    if len(queries) != len(gallery):
        raise DataError(f"{len(queries)} queries but {len(gallery)} gallery items")
    ranks = target_ranks(cosine_similarity(queries, gallery), range(len(queries)))
    return build_report(task, ranks, labels, ks or DEFAULT_KS[task])


def zero_shot_classify(checkpoint: ModelCheckpoint, manifest: DatasetManifest, prompts: EmbeddingTable,
                       ks: Sequence[int] = DEFAULT_KS[Task.CLASSIFY], workers: Optional[int] = None,
                       batch_size: Optional[int] = None) -> MetricsReport:
    labels = [item.label for item in manifest.items]
    unknown = sorted(set(labels) - set(prompts.ids))
    if unknown:
        raise DataError(f"Manifest has class label(s) with no prompt embedding: {', '.join(unknown)}")
    clouds = load_clouds(manifest, checkpoint.config.grouping.max_gaussians)
    report = classify_embeddings(encode_clouds(clouds, checkpoint, workers, batch_size), labels, prompts, ks)
    logger.info(f"Classified {report.num_queries} items: Top-1 {report.top1:.2%}, "
                f"mean class accuracy {report.mean_average_accuracy:.2%}")
    return report


def retrieve(checkpoint: ModelCheckpoint, manifest: DatasetManifest, queries: EmbeddingTable,
             ks: Optional[Sequence[int]] = None, workers: Optional[int] = None,
             batch_size: Optional[int] = None) -> MetricsReport:
    """Text-to-3D or image-to-3D retrieval, depending on the query table's modality."""
    task = Task.RETRIEVE_TEXT if queries.modality is Modality.TEXT else Task.RETRIEVE_IMAGE
    ids = [item.text_id if task is Task.RETRIEVE_TEXT else item.image_id for item in manifest.items]
    missing = [i for i in ids if i not in queries]
    if missing:
        raise DataError(f"No {queries.modality.value} query embedding for id(s): {', '.join(missing[:5])}")
    clouds = load_clouds(manifest, checkpoint.config.grouping.max_gaussians)
    gallery = encode_clouds(clouds, checkpoint, workers, batch_size)
    report = retrieve_embeddings(queries.lookup(ids), gallery, [item.label for item in manifest.items], task, ks)
    logger.info(f"Retrieved {report.num_queries} {queries.modality.value} queries: Top-1 {report.top1:.2%}")
    return report


def format_report_text(report: MetricsReport) -> str:
    """Aligned plain-text table for a report."""
    output = []
    output.append(f"{report.task.value.upper()} REPORT")
    output.append("=" * 50)
    output.append(f"Queries: {report.num_queries}")
    output.append("")
    output.append(f"{'k':>6}  {'hit rate':>10}")
    for k, rate in sorted(report.hit_rates.items()):
        output.append(f"{k:>6}  {rate:>10.2%}")
    output.append("")
    width = max([len("class")] + [len(label) for label in report.per_class_top1])
    output.append(f"{'class':<{width}}  {'top-1':>10}")
    for label, accuracy in sorted(report.per_class_top1.items()):
        output.append(f"{label:<{width}}  {accuracy:>10.2%}")
    output.append("")
    output.append(f"Mean class accuracy: {report.mean_average_accuracy:.2%}")
    return "\n".join(output)
