"""
Triplet datasets: manifests, synthetic generation and ingestion of outside clouds.

A dataset directory looks like::

    train.json  test.json     manifests (split + items)
    text/  image/  prompts/   embedding tables
    clouds/<id>.ply           one 3DGS file per item

Cloud paths inside a manifest are relative to the manifest's directory.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lib.alignment import EmbeddingTable, Modality, load_embedding_table, save_embedding_table
from lib.errors import DataError, FormatError, InputError
from lib.gaussians import GaussianCloud, prune_top_n
from lib.ply_io import load_ply, save_ply

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
TEST_FRACTION = 0.2
EMBEDDING_NOISE = 0.1
SHAPES = ("sphere", "box", "torus")
ITEM_FIELDS = ("id", "caption", "label", "cloud", "text_id", "image_id")


@dataclass(frozen=True)
class ManifestItem:
    id: str
    caption: str
    label: str
    cloud: str
    text_id: str
    image_id: str


@dataclass
class DatasetManifest:
    split: str
    items: List[ManifestItem] = field(default_factory=list)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"Unknown split '{self.split}' (expected one of: {', '.join(SPLITS)})")
        seen = set()
        for item in self.items:
            if item.id in seen:
                raise DataError(f"Duplicate item id '{item.id}' in {self.split} manifest")
            seen.add(item.id)

    def __len__(self):
        return len(self.items)

    @property
    def ids(self) -> List[str]:
        return [item.id for item in self.items]

    @property
    def labels(self) -> List[str]:
        return sorted({item.label for item in self.items})

    def cloud_path(self, item: ManifestItem) -> Path:
        path = Path(item.cloud)
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        return {"split": self.split, "items": [asdict(item) for item in self.items]}


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict) or "split" not in data or "items" not in data:
        raise FormatError(f"{path} needs 'split' and 'items' fields")
    items = []
    for index, entry in enumerate(data["items"]):
        missing = [f for f in ITEM_FIELDS if f not in entry]
        if missing:
            raise FormatError(f"{path}: item {index} is missing field(s) {', '.join(missing)}")
        items.append(ManifestItem(**{f: str(entry[f]) for f in ITEM_FIELDS}))
    return DatasetManifest(split=data["split"], items=items, base_dir=path.parent)


def check_embeddings(manifest: DatasetManifest, text_table: EmbeddingTable, image_table: EmbeddingTable) -> None:
    """Every item's text and image embedding id exists in its table."""
    for item in manifest.items:
        if item.text_id not in text_table:
            raise DataError(f"Item '{item.id}' references missing text embedding '{item.text_id}'")
        if item.image_id not in image_table:
            raise DataError(f"Item '{item.id}' references missing image embedding '{item.image_id}'")


def load_clouds(manifest: DatasetManifest, max_gaussians: int) -> List[GaussianCloud]:
    """Load every item's cloud, keeping at most max_gaussians by opacity."""
    clouds = []
    for item in manifest.items:
        cloud = load_ply(manifest.cloud_path(item), id=item.id)
        if len(cloud) == 0:
            raise DataError(f"Cloud for item '{item.id}' is empty")
        clouds.append(prune_top_n(cloud, max_gaussians))
    logger.debug(f"Loaded {len(clouds)} clouds for the {manifest.split} split")
    return clouds


# --- synthesis ----------------------------------------------------------------

@dataclass(frozen=True)
class ClassSignature:
    """Per-class generator settings; everything an item of the class is drawn from."""
    label: str
    shape: str
    palette: Tuple[float, float, float]
    opacity_band: Tuple[float, float]
    anisotropy: Tuple[float, float, float]
    aligned_rotation: bool


@dataclass
class SyntheticDataset:
    root: Path
    train: DatasetManifest
    test: DatasetManifest
    text_table: EmbeddingTable
    image_table: EmbeddingTable
    prompts_table: EmbeddingTable
    signatures: List[ClassSignature]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    return _unit(rng.normal(size=(n, 3)))


def sample_box(rng: np.random.Generator, n: int, extents=(1.0, 0.6, 0.4)) -> np.ndarray:
    extents = np.asarray(extents)
    points = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    points[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
    return points * extents


def sample_torus(rng: np.random.Generator, n: int, major: float = 1.0, minor: float = 0.35) -> np.ndarray:
    u = rng.uniform(0.0, 2 * np.pi, size=n)
    v = rng.uniform(0.0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


SAMPLERS = {"sphere": sample_sphere, "box": sample_box, "torus": sample_torus}


def class_signatures(rng: np.random.Generator, num_classes: int,
                     attribute_dependent: bool = False) -> List[ClassSignature]:
    """
    Draw generator settings for each class.

    With attribute_dependent, classes come in pairs that share shape and
    palette; partners differ only in opacity band, scale anisotropy and
    rotation alignment.
    """
    signatures = []
    palette = None
    for c in range(num_classes):
        label = f"class_{c:02d}"
        if attribute_dependent:
            partner = c % 2
            if partner == 0:
                palette = tuple(float(x) for x in rng.uniform(0.15, 0.85, size=3))
            shape = SHAPES[(c // 2) % len(SHAPES)]
            signature = ClassSignature(
                label=label, shape=shape, palette=palette,
                opacity_band=(0.15, 0.35) if partner == 0 else (0.65, 0.9),
                anisotropy=(1.0, 1.0, 1.0) if partner == 0 else (3.0, 1.0, 0.35),
                aligned_rotation=partner == 0,
            )
        else:
            low = float(rng.uniform(0.1, 0.7))
            signature = ClassSignature(
                label=label, shape=SHAPES[c % len(SHAPES)],
                palette=tuple(float(x) for x in rng.uniform(0.1, 0.9, size=3)),
                opacity_band=(low, low + 0.2),
                anisotropy=tuple(float(x) for x in rng.uniform(0.5, 2.0, size=3)),
                aligned_rotation=bool(rng.integers(0, 2)),
            )
        signatures.append(signature)
    return signatures


def synthesize_cloud(rng: np.random.Generator, signature: ClassSignature, n: int,
                     id: str = "") -> GaussianCloud:
    """One item of a class: surface samples with the class's attribute signature plus jitter."""
    size = rng.uniform(0.8, 1.2)
    means = SAMPLERS[signature.shape](rng, n) * size + rng.normal(0.0, 0.01, size=(n, 3))
    colors = np.clip(np.asarray(signature.palette) + rng.normal(0.0, 0.05, size=(n, 3)), 0.0, 1.0)
    opacities = rng.uniform(*signature.opacity_band, size=n)
    scales = 0.03 * np.asarray(signature.anisotropy) * rng.uniform(0.8, 1.2, size=(n, 3))
    if signature.aligned_rotation:
        raw = np.array([1.0, 0.0, 0.0, 0.0]) + rng.normal(0.0, 0.05, size=(n, 4))
    else:
        raw = rng.normal(size=(n, 4))
    rotations = _unit(raw)
    return GaussianCloud(means=means, colors=colors, opacities=opacities, scales=scales,
                         rotations=rotations, id=id)


def split_counts(items_per_class: int) -> Tuple[int, int]:
    """(train, test) item counts per class; the test share is rounded down."""
    test = int(np.floor(TEST_FRACTION * items_per_class))
    return items_per_class - test, test


def synthesize_dataset(output_dir, seed: int, num_classes: int, items_per_class: int,
                       gaussians_per_item: int, embed_dim: int,
                       attribute_dependent: bool = False) -> SyntheticDataset:
    """Generate a labelled triplet dataset under output_dir, deterministic in seed."""
    for name, value in (("num_classes", num_classes), ("items_per_class", items_per_class),
                        ("gaussians_per_item", gaussians_per_item), ("embed_dim", embed_dim)):
        if value < 1:
            raise InputError(f"{name} must be >= 1, got {value}")
    root = Path(output_dir)
    rng = np.random.default_rng(seed)
    signatures = class_signatures(rng, num_classes, attribute_dependent)
    anchors = _unit(rng.normal(size=(num_classes, embed_dim)))

    splits: Dict[str, List[ManifestItem]] = {"train": [], "test": []}
    text_vectors, image_vectors, ids = [], [], []
    _, n_test = split_counts(items_per_class)
    for c, signature in enumerate(signatures):
        caption = f"a {signature.shape} shaped object of {signature.label}"
        test_slots = set(rng.permutation(items_per_class)[:n_test].tolist())
        for i in range(items_per_class):
            item_id = f"{signature.label}_{i:04d}"
            cloud = synthesize_cloud(rng, signature, gaussians_per_item, id=item_id)
            save_ply(cloud, root / "clouds" / f"{item_id}.ply")
            text_vectors.append(_unit(anchors[c] + rng.normal(0.0, EMBEDDING_NOISE, size=embed_dim)))
            image_vectors.append(_unit(anchors[c] + rng.normal(0.0, EMBEDDING_NOISE, size=embed_dim)))
            ids.append(item_id)
            split = "test" if i in test_slots else "train"
            splits[split].append(ManifestItem(id=item_id, caption=caption, label=signature.label,
                                              cloud=f"clouds/{item_id}.ply", text_id=item_id,
                                              image_id=item_id))

    text_table = EmbeddingTable(dim=embed_dim, modality=Modality.TEXT, ids=ids, vectors=np.array(text_vectors))
    image_table = EmbeddingTable(dim=embed_dim, modality=Modality.IMAGE, ids=ids, vectors=np.array(image_vectors))
    prompts_table = EmbeddingTable(dim=embed_dim, modality=Modality.TEXT,
                                   ids=[s.label for s in signatures], vectors=anchors)
    save_embedding_table(text_table, root / "text")
    save_embedding_table(image_table, root / "image")
    save_embedding_table(prompts_table, root / "prompts")

    train = DatasetManifest(split="train", items=splits["train"], base_dir=root)
    test = DatasetManifest(split="test", items=splits["test"], base_dir=root)
    save_manifest(train, root / "train.json")
    save_manifest(test, root / "test.json")
    logger.info(f"Synthesized {num_classes} classes: {len(train)} train / {len(test)} test items in {root}")
    return SyntheticDataset(root=root, train=train, test=test, text_table=text_table,
                            image_table=image_table, prompts_table=prompts_table, signatures=signatures)


# --- ingestion ----------------------------------------------------------------

def ingest_clouds(paths: Sequence, dataset_dir, label: str, caption: Optional[str] = None,
                  split: str = "train", max_gaussians: int = 1024) -> DatasetManifest:
    """
    Copy outside 3DGS PLY files into a dataset, keeping the max_gaussians most
    opaque primitives of each. Items are keyed by file stem; an existing entry
    with the same id is replaced. Embedding ids default to the item id.
    """
    root = Path(dataset_dir)
    manifest_path = root / f"{split}.json"
    manifest = load_manifest(manifest_path) if manifest_path.exists() else DatasetManifest(split=split, base_dir=root)
    entries = {item.id: item for item in manifest.items}
    for path in paths:
        path = Path(path)
        cloud = load_ply(path)
        if len(cloud) == 0:
            raise DataError(f"Cannot ingest empty cloud {path}")
        pruned = prune_top_n(cloud, max_gaussians)
        relative = f"clouds/{cloud.id}.ply"
        save_ply(pruned, root / relative)
        if cloud.id in entries:
            logger.info(f"Replacing manifest entry '{cloud.id}'")
        entries[cloud.id] = ManifestItem(id=cloud.id, caption=caption or f"a 3d object of {label}",
                                         label=label, cloud=relative, text_id=cloud.id, image_id=cloud.id)
        logger.debug(f"Ingested {path}: kept {len(pruned)} of {len(cloud)} Gaussians")
    manifest = DatasetManifest(split=split, items=list(entries.values()), base_dir=root)
    save_manifest(manifest, manifest_path)
    return manifest


def load_tables(text_path, image_path) -> Tuple[EmbeddingTable, EmbeddingTable]:
    return load_embedding_table(text_path), load_embedding_table(image_path)
