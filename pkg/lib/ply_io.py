"""
Reading and writing Gaussian clouds in the standard 3DGS PLY layout.

Values are stored the way 3DGS checkpoints store them: DC color coefficients,
opacity as a pre-sigmoid logit and scale as a natural log. Extra properties
(normals, higher SH bands) in third-party files are ignored on load.
"""
import logging
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from lib.errors import DataError, FormatError
from lib.gaussians import GaussianCloud, from_point_cloud

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
POSITION_FIELDS = ("x", "y", "z")
COLOR_FIELDS = ("f_dc_0", "f_dc_1", "f_dc_2")
OPACITY_FIELD = "opacity"
SCALE_FIELDS = ("scale_0", "scale_1", "scale_2")
ROTATION_FIELDS = ("rot_0", "rot_1", "rot_2", "rot_3")
GAUSSIAN_FIELDS = POSITION_FIELDS + COLOR_FIELDS + (OPACITY_FIELD,) + SCALE_FIELDS + ROTATION_FIELDS

# Opacities are clipped away from 0 and 1 before taking the logit.
LOGIT_EPS = 1e-7


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p / (1.0 - p))


def rgb_to_sh_dc(colors):
    return (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0


def sh_dc_to_rgb(f_dc):
    return np.clip(0.5 + SH_C0 * np.asarray(f_dc, dtype=np.float64), 0.0, 1.0)


def to_storage(cloud: GaussianCloud) -> np.ndarray:
    """Structured float32 vertex array holding the stored representation of a cloud."""
    columns = np.concatenate([
        cloud.means,
        rgb_to_sh_dc(cloud.colors),
        logit(cloud.opacities)[:, None],
        np.log(cloud.scales),
        cloud.rotations,
    ], axis=1).astype(np.float32)
    elements = np.empty(len(cloud), dtype=[(name, "<f4") for name in GAUSSIAN_FIELDS])
    for i, name in enumerate(GAUSSIAN_FIELDS):
        elements[name] = columns[:, i]
    return elements


def from_storage(vertex, id: str = "") -> GaussianCloud:
    """Decode a structured vertex array in the stored representation."""
    names = set(vertex.dtype.names or ())
    for name in GAUSSIAN_FIELDS:
        if name not in names:
            raise FormatError(f"PLY vertex element is missing required property '{name}'")

    def stack(fields):
        return np.stack([np.asarray(vertex[f], dtype=np.float64) for f in fields], axis=1)

    raw = stack(GAUSSIAN_FIELDS)
    bad = ~np.isfinite(raw).all(axis=1)
    if bad.any():
        raise DataError(f"Non-finite value at primitive {int(np.argmax(bad))}")

    rotations = stack(ROTATION_FIELDS)
    norms = np.linalg.norm(rotations, axis=1)
    if (norms == 0).any():
        raise DataError(f"Zero-norm rotation at primitive {int(np.argmax(norms == 0))}")
    scales = np.exp(stack(SCALE_FIELDS))
    if (scales <= 0).any():
        raise DataError(f"Scale underflows to zero at primitive {int(np.argmax((scales <= 0).any(axis=1)))}")

    return GaussianCloud(
        means=stack(POSITION_FIELDS),
        colors=sh_dc_to_rgb(stack(COLOR_FIELDS)),
        opacities=sigmoid(np.asarray(vertex[OPACITY_FIELD], dtype=np.float64)),
        scales=scales,
        rotations=rotations / norms[:, None],
        id=id,
    )


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write a cloud as binary little-endian PLY."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    element = PlyElement.describe(to_storage(cloud), "vertex")
    PlyData([element], text=False, byte_order="<").write(str(path))
    logger.debug(f"Wrote {len(cloud)} Gaussians to {path}")


def load_ply(path, id: str = None) -> GaussianCloud:
    """Read a 3DGS PLY; the cloud id defaults to the file stem."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"PLY file not found: {path}")
    try:
        ply = PlyData.read(str(path))
    except Exception as e:
        raise FormatError(f"Cannot parse PLY file {path}: {e}") from e
    if "vertex" not in ply:
        raise FormatError(f"PLY file has no 'vertex' element: {path}")
    return from_storage(ply["vertex"].data, id=path.stem if id is None else id)


def load_point_cloud_ply(path, opacity_init: float, scale_init: float) -> GaussianCloud:
    """
    Read a plain point-cloud PLY (x, y, z and optional red, green, blue) and
    convert it into Gaussians. Integer colors are scaled from [0, 255].
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"PLY file not found: {path}")
    try:
        ply = PlyData.read(str(path))
    except Exception as e:
        raise FormatError(f"Cannot parse PLY file {path}: {e}") from e
    if "vertex" not in ply:
        raise FormatError(f"PLY file has no 'vertex' element: {path}")
    vertex = ply["vertex"].data
    names = set(vertex.dtype.names or ())
    for name in POSITION_FIELDS:
        if name not in names:
            raise FormatError(f"PLY vertex element is missing required property '{name}'")
    points = np.stack([np.asarray(vertex[f], dtype=np.float64) for f in POSITION_FIELDS], axis=1)

    color_fields = ("red", "green", "blue")
    if all(f in names for f in color_fields):
        colors = np.stack([np.asarray(vertex[f], dtype=np.float64) for f in color_fields], axis=1)
        if np.issubdtype(vertex.dtype["red"], np.integer):
            colors = colors / 255.0
        colors = np.clip(colors, 0.0, 1.0)
    else:
        colors = np.full_like(points, 0.5)
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        raise DataError(f"Non-finite value at point {int(np.argmax(bad))}")
    return from_point_cloud(points, colors, opacity_init, scale_init, id=path.stem)
