"""3D Gaussian Splatting domain types and geometry helpers."""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from lib.errors import DataError, InputError, InvalidRotationError

logger = logging.getLogger(__name__)

# Covariance3 values are plain 3x3 float64 arrays.
Covariance3 = np.ndarray

IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)
MIN_SCALE = 1e-6
QUATERNION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class GaussianPrimitive:
    """A single Gaussian: position, DC color, opacity, per-axis scale and (w, x, y, z) rotation."""
    mu: Tuple[float, float, float]
    color: Tuple[float, float, float]
    opacity: float
    scale: Tuple[float, float, float]
    rotation: Tuple[float, float, float, float] = IDENTITY_QUATERNION


def _frozen(values, shape_tail, name):
    arr = np.array(values, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    if arr.shape[1:] != shape_tail:
        raise InputError(f"{name} must have shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """
    Ordered collection of Gaussian primitives stored column-wise.

    All attributes are post-activation values: opacity in [0, 1], strictly
    positive scales, unit quaternions and RGB colors in [0, 1].
    """
    means: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen(self.means, (3,), "means"))
        object.__setattr__(self, "colors", _frozen(self.colors, (3,), "colors"))
        object.__setattr__(self, "scales", _frozen(self.scales, (3,), "scales"))
        object.__setattr__(self, "rotations", _frozen(self.rotations, (4,), "rotations"))
        opacities = np.array(self.opacities, dtype=np.float64).reshape(-1)
        opacities.setflags(write=False)
        object.__setattr__(self, "opacities", opacities)

        n = len(self.means)
        for name in ("colors", "opacities", "scales", "rotations"):
            if len(getattr(self, name)) != n:
                raise InputError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        self._check_invariants()

    def _check_invariants(self):
        for name in ("means", "colors", "opacities", "scales", "rotations"):
            values = getattr(self, name)
            bad = ~np.isfinite(values).all(axis=tuple(range(1, values.ndim)))
            if bad.any():
                raise DataError(f"Non-finite {name} at primitive {int(np.argmax(bad))}")
        checks = [
            ("opacity outside [0, 1]", (self.opacities < 0) | (self.opacities > 1)),
            ("color outside [0, 1]", ((self.colors < 0) | (self.colors > 1)).any(axis=1)),
            ("non-positive scale", (self.scales <= 0).any(axis=1)),
            ("non-unit rotation", np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0) > 1e-9),
        ]
        for message, bad in checks:
            if bad.any():
                raise DataError(f"{message} at primitive {int(np.argmax(bad))}")

    def __len__(self):
        return len(self.means)

    @property
    def primitives(self) -> List[GaussianPrimitive]:
        return list(self.iter_primitives())

    def iter_primitives(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield GaussianPrimitive(
                mu=tuple(self.means[i]),
                color=tuple(self.colors[i]),
                opacity=float(self.opacities[i]),
                scale=tuple(self.scales[i]),
                rotation=tuple(self.rotations[i]),
            )

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive], id: str = "") -> "GaussianCloud":
        primitives = list(primitives)
        return cls(
            means=[p.mu for p in primitives],
            colors=[p.color for p in primitives],
            opacities=[p.opacity for p in primitives],
            scales=[p.scale for p in primitives],
            rotations=[p.rotation for p in primitives],
            id=id,
        )

    @classmethod
    def empty(cls, id: str = "") -> "GaussianCloud":
        return cls(means=np.zeros((0, 3)), colors=np.zeros((0, 3)), opacities=np.zeros(0),
                   scales=np.zeros((0, 3)), rotations=np.zeros((0, 4)), id=id)

    def take(self, indices) -> "GaussianCloud":
        """Sub-cloud made of the given primitive indices, in that order."""
        indices = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            means=self.means[indices],
            colors=self.colors[indices],
            opacities=self.opacities[indices],
            scales=self.scales[indices],
            rotations=self.rotations[indices],
            id=self.id,
        )

    def replace(self, **changes) -> "GaussianCloud":
        fields = dict(means=self.means, colors=self.colors, opacities=self.opacities,
                      scales=self.scales, rotations=self.rotations, id=self.id)
        fields.update(changes)
        return GaussianCloud(**fields)


def normalize_quaternion(q) -> np.ndarray:
    """Return q / |q|; |q| must be within 1e-6 of one."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0 or not np.isfinite(norm):
        raise InvalidRotationError(f"Quaternion {q.tolist()} has zero or non-finite norm")
    if abs(norm - 1.0) >= QUATERNION_TOLERANCE:
        raise InvalidRotationError(f"Quaternion {q.tolist()} is not normalized (norm {norm:.9f})")
    return q / norm


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z). Accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.moveaxis(np.array(rows, dtype=np.float64), (0, 1), (-2, -1))


def covariance(scale, rotation) -> Covariance3:
    """Sigma = R S S^T R^T for one Gaussian."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,):
        raise InputError(f"scale must be a 3-vector, got shape {scale.shape}")
    if (scale <= 0).any():
        raise InputError(f"scale components must be > 0, got {scale.tolist()}")
    rot = quaternion_to_matrix(normalize_quaternion(rotation))
    m = rot * scale[None, :]
    sigma = m @ m.T
    return 0.5 * (sigma + sigma.T)


def covariances(cloud: GaussianCloud) -> np.ndarray:
    """Vectorized covariance for every primitive of a cloud, shape (N, 3, 3)."""
    rot = quaternion_to_matrix(cloud.rotations)
    m = rot * cloud.scales[:, None, :]
    sigma = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


def prune_top_n(cloud: GaussianCloud, n: int) -> GaussianCloud:
    """Keep the n most opaque primitives, preserving their input order."""
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    if n >= len(cloud):
        return cloud
    order = np.argsort(-cloud.opacities, kind="stable")[:n]
    logger.debug(f"Pruned cloud '{cloud.id}' from {len(cloud)} to {n} primitives")
    return cloud.take(np.sort(order))


def from_point_cloud(points, colors, opacity_init: float, scale_init: float, id: str = "") -> GaussianCloud:
    """Convert a colored point cloud into isotropic, unrotated Gaussians."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(colors):
        raise InputError(f"points and colors differ in length: {len(points)} vs {len(colors)}")
    if not 0.0 <= opacity_init <= 1.0:
        raise InputError(f"opacity_init must be in [0, 1], got {opacity_init}")
    if scale_init < 0:
        raise InputError(f"scale_init must be >= 0, got {scale_init}")
    n = len(points)
    scale = max(float(scale_init), MIN_SCALE)
    return GaussianCloud(
        means=points,
        colors=colors,
        opacities=np.full(n, float(opacity_init)),
        scales=np.full((n, 3), scale),
        rotations=np.tile(IDENTITY_QUATERNION, (n, 1)),
        id=id,
    )


def normalize_cloud(cloud: GaussianCloud) -> Tuple[GaussianCloud, np.ndarray, float]:
    """
    Move a cloud into the canonical frame: zero centroid, max |mu| = 1.

    Scales shrink by the same radius. Returns (cloud, centroid, radius) so the
    transform can be inverted with mu * radius + centroid.
    """
    if len(cloud) == 0:
        raise InputError("Cannot normalize an empty cloud")
    centroid = cloud.means.mean(axis=0)
    centered = cloud.means - centroid
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius <= 0.0:
        return cloud.replace(means=np.zeros_like(centered)), centroid, 1.0
    return cloud.replace(means=centered / radius, scales=cloud.scales / radius), centroid, radius
