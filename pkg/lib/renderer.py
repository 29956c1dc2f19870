"""
Reference splatting renderer.

Exact per-pixel evaluation of the front-to-back alpha compositing formula,
used to check that clouds are well formed. No tiling and no culling beyond
a 3-sigma bounding box per splat.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from lib.errors import InputError
from lib.gaussians import GaussianCloud, GaussianPrimitive, covariance, covariances

logger = logging.getLogger(__name__)

COV2D_FLOOR = 1e-6
MIN_DEPTH = 1e-6
BLACK = (0.0, 0.0, 0.0)


class CameraMode(Enum):
    ORTHOGRAPHIC = "orthographic"
    PINHOLE = "pinhole"


@dataclass(frozen=True, eq=False)
class Camera:
    """
    World-to-camera view (3x4) plus intrinsics.

    For pinhole cameras `focal` is the focal length in pixels. Orthographic
    cameras use it as the pixels-per-scene-unit scaling.
    """
    mode: CameraMode
    view: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        view = np.array(self.view, dtype=np.float64)
        if view.shape != (3, 4):
            raise InputError(f"view must be 3x4, got {view.shape}")
        rot = view[:, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise InputError("view rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise InputError(f"image size must be >= 1, got {self.width}x{self.height}")
        if self.focal <= 0:
            raise InputError(f"focal must be > 0, got {self.focal}")
        view.setflags(write=False)
        object.__setattr__(self, "mode", CameraMode(self.mode))
        object.__setattr__(self, "view", view)

    @property
    def rotation(self):
        return self.view[:, :3]

    @property
    def translation(self):
        return self.view[:, 3]


@dataclass(frozen=True, eq=False)
class RenderedImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) in [0, 1]

    def is_black(self) -> bool:
        return not (self.pixels > 0).any()


@dataclass(frozen=True)
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def _jacobian(camera: Camera, p_cam: np.ndarray) -> np.ndarray:
    f = camera.focal
    if camera.mode is CameraMode.ORTHOGRAPHIC:
        return np.array([[f, 0.0, 0.0], [0.0, f, 0.0]])
    x, y, z = p_cam
    return np.array([[f / z, 0.0, -f * x / (z * z)],
                     [0.0, f / z, -f * y / (z * z)]])


def _project_point(camera: Camera, p_cam: np.ndarray) -> np.ndarray:
    cx, cy = camera.width / 2.0, camera.height / 2.0
    if camera.mode is CameraMode.ORTHOGRAPHIC:
        return np.array([camera.focal * p_cam[0] + cx, camera.focal * p_cam[1] + cy])
    return np.array([camera.focal * p_cam[0] / p_cam[2] + cx, camera.focal * p_cam[1] / p_cam[2] + cy])


def project_covariance(camera: Camera, mu, sigma) -> Optional[Projection]:
    """EWA projection of one Gaussian; None when it lies behind a pinhole camera."""
    w = camera.rotation
    p_cam = w @ np.asarray(mu, dtype=np.float64) + camera.translation
    if camera.mode is CameraMode.PINHOLE and p_cam[2] <= MIN_DEPTH:
        return None
    j = _jacobian(camera, p_cam)
    t = j @ w
    cov2d = t @ sigma @ t.T
    cov2d = 0.5 * (cov2d + cov2d.T) + COV2D_FLOOR * np.eye(2)
    return Projection(mean2d=_project_point(camera, p_cam), cov2d=cov2d, depth=float(p_cam[2]))


def project(primitive: GaussianPrimitive, camera: Camera) -> Optional[Projection]:
    """Project a primitive to (mean2d, cov2d, depth); None signals a skipped primitive."""
    return project_covariance(camera, primitive.mu, covariance(primitive.scale, primitive.rotation))


def blend_weights(alphas: Sequence[float]) -> np.ndarray:
    """w_i = alpha_i * prod_{j<i} (1 - alpha_j) for depth-sorted alphas."""
    weights = np.zeros(len(alphas))
    transmittance = 1.0
    for i, alpha in enumerate(alphas):
        if not 0.0 <= alpha <= 1.0:
            raise InputError(f"alpha at position {i} outside [0, 1]: {alpha}")
        weights[i] = alpha * transmittance
        transmittance *= 1.0 - alpha
    return weights


def alpha_blend(contributions: Sequence[Tuple[Sequence[float], float]], background=BLACK) -> np.ndarray:
    """Composite depth-sorted (color, alpha) pairs front to back over a background."""
    result = np.zeros(3)
    transmittance = 1.0
    for i, (color, alpha) in enumerate(contributions):
        if not 0.0 <= alpha <= 1.0:
            raise InputError(f"alpha at position {i} outside [0, 1]: {alpha}")
        result = result + np.asarray(color, dtype=np.float64) * (alpha * transmittance)
        transmittance *= 1.0 - alpha
    return result + np.asarray(background, dtype=np.float64) * transmittance


def render(cloud: GaussianCloud, camera: Camera, background=BLACK) -> RenderedImage:
    """Render a cloud by per-pixel Gaussian evaluation and front-to-back compositing."""
    height, width = camera.height, camera.width
    color = np.zeros((height, width, 3))
    transmittance = np.ones((height, width))

    splats = []
    skipped = 0
    sigmas = covariances(cloud)
    for i in range(len(cloud)):
        proj = project_covariance(camera, cloud.means[i], sigmas[i])
        if proj is None:
            skipped += 1
            continue
        splats.append((proj, cloud.colors[i], float(cloud.opacities[i])))
    if skipped:
        logger.debug(f"Skipped {skipped} primitives behind the camera")

    # Sort by depth; remaining keys canonicalize ties so input order never matters.
    keys = [(p.depth, p.mean2d[0], p.mean2d[1], opacity, *c, *p.cov2d.ravel())
            for p, c, opacity in splats]
    order = sorted(range(len(splats)), key=lambda k: keys[k])

    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    for k in order:
        proj, rgb, opacity = splats[k]
        radius = 3.0 * np.sqrt(np.linalg.eigvalsh(proj.cov2d).max())
        x0 = max(int(np.floor(proj.mean2d[0] - radius)), 0)
        x1 = min(int(np.ceil(proj.mean2d[0] + radius)) + 1, width)
        y0 = max(int(np.floor(proj.mean2d[1] - radius)), 0)
        y1 = min(int(np.ceil(proj.mean2d[1] + radius)) + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = xs[x0:x1][None, :] - proj.mean2d[0]
        dy = ys[y0:y1][:, None] - proj.mean2d[1]
        conic = np.linalg.inv(proj.cov2d)
        power = -0.5 * (conic[0, 0] * dx * dx + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy)
        alpha = opacity * np.exp(power)
        t = transmittance[y0:y1, x0:x1]
        color[y0:y1, x0:x1] += (alpha * t)[..., None] * rgb
        transmittance[y0:y1, x0:x1] = t * (1.0 - alpha)

    color += transmittance[..., None] * np.asarray(background, dtype=np.float64)
    return RenderedImage(width=width, height=height, pixels=np.clip(color, 0.0, 1.0))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera 3x4 view with +z pointing from eye to target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return np.concatenate([rot, (-rot @ eye)[:, None]], axis=1)


def orbit_camera(mode: CameraMode, width: int, height: int, azimuth_deg: float = 30.0,
                 elevation_deg: float = 20.0, distance: float = 3.0, focal: Optional[float] = None) -> Camera:
    """Camera looking at the origin, framing a unit-radius normalized cloud."""
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    eye = distance * np.array([np.cos(el) * np.sin(az), -np.sin(el), -np.cos(el) * np.cos(az)])
    if focal is None:
        focal = 0.45 * min(width, height) * (distance if mode is CameraMode.PINHOLE else 1.0)
    return Camera(mode=mode, view=look_at(eye), focal=focal, width=width, height=height)


def write_ppm(image: RenderedImage, path) -> None:
    """Binary PPM (P6, maxval 255), values rounded half-up."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.floor(np.clip(image.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())
