"""Core scene types: anisotropic Gaussians, cameras, frames, materials.

A scene is stored as structure-of-arrays in float32 (the on-disk precision),
so that PLY round-trips are bit-exact. Numerical code upcasts to float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

QUAT_NORM_TOL = 1e-6


class SceneValidationError(ValueError):
    """An invariant on a scene object does not hold."""


# ---------------------------------------------------------------------------
# quaternion / sigmoid helpers

def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix for a (w, x, y, z) quaternion, normalized first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotations(quats: np.ndarray) -> np.ndarray:
    """Batched (N, 4) -> (N, 3, 3), normalizing each quaternion."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion for a proper rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def sigmoid(x):
    from scipy.special import expit
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# value types

@dataclass(frozen=True)
class Gaussian:
    """One anisotropic splat, doubling as an MPM material particle.

    scale holds per-axis standard deviations (strictly positive); rotation is
    a unit (w, x, y, z) quaternion; color and opacity live in [0, 1].
    """

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity", float(self.opacity))
        if not np.all(np.isfinite(self.position)):
            raise SceneValidationError("position must be finite")
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_NORM_TOL:
            raise SceneValidationError("rotation quaternion must have unit norm within 1e-6")
        if not np.all(self.scale > 0):
            raise SceneValidationError("all scale components must be strictly positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise SceneValidationError("opacity must lie in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise SceneValidationError("color channels must lie in [0, 1]")


def covariance(g: Gaussian) -> np.ndarray:
    """World covariance R diag(scale^2) R^T of a Gaussian (symmetric PD)."""
    r = quat_to_rotation(g.rotation)
    cov = (r * g.scale[None, :] ** 2) @ r.T
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class MaterialParams:
    """Neo-Hookean material: Young's modulus, Poisson ratio, mass density."""

    youngs_modulus: float = 3000.0
    poisson_ratio: float = 0.45
    density: float = 1000.0

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise SceneValidationError("youngs_modulus must be > 0")
        if not (0.0 < self.poisson_ratio < 0.5):
            raise SceneValidationError("poisson_ratio must lie strictly inside (0, 0.5)")
        if self.density <= 0:
            raise SceneValidationError("density must be > 0")


def lame_parameters(mat: MaterialParams) -> tuple[float, float]:
    """(mu, lambda) from Young's modulus E and Poisson ratio nu."""
    e, nu = mat.youngs_modulus, mat.poisson_ratio
    mu = e / (2.0 * (1.0 + nu))
    lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass(frozen=True)
class AABB:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid pose.

    Pixel sample points sit at integer (column, row) coordinates; a world
    point X maps to u = fx * x/z + cx, v = fy * y/z + cy with
    (x, y, z) = R @ X + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        object.__setattr__(self, "world_to_camera",
                           np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4))
        if self.fx <= 0 or self.fy <= 0:
            raise SceneValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneValidationError("principal point must lie inside the image")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-5 or np.linalg.det(r) < 0:
            raise SceneValidationError("pose rotation must be a proper rotation matrix")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) world points -> (N, 2) pixel (u, v); no culling."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        return np.stack([self.fx * pc[:, 0] / z + self.cx,
                         self.fy * pc[:, 1] / z + self.cy], axis=1)

    def backproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus camera-z depth -> (N, 3) world points."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        pc = np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], axis=-1)
        return (pc - self.translation) @ self.rotation


@dataclass(frozen=True)
class Frame:
    """One posed RGB-D observation with a binary tool mask (1 = tool)."""

    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    camera: Camera

    def __post_init__(self):
        object.__setattr__(self, "image", np.asarray(self.image, dtype=np.float32))
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float32))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise SceneValidationError(f"image shape {self.image.shape} != camera resolution {(h, w, 3)}")
        if self.depth.shape != (h, w):
            raise SceneValidationError(f"depth shape {self.depth.shape} != camera resolution {(h, w)}")
        if self.mask.shape != (h, w):
            raise SceneValidationError(f"mask shape {self.mask.shape} != camera resolution {(h, w)}")
        if not np.all(self.depth[~self.mask] > 0):
            raise SceneValidationError("depth must be strictly positive at every unmasked pixel")

    @property
    def visible(self) -> np.ndarray:
        """Boolean raster of non-tool pixels."""
        return ~self.mask


# ---------------------------------------------------------------------------
# scene container

class Scene:
    """Ordered collection of Gaussians plus material parameters.

    Arrays are float32 and are the canonical on-disk values: scales are kept
    as natural logs and opacities as logits, matching the PLY layout.
    """

    __slots__ = ("positions", "rotations", "log_scales", "colors",
                 "opacity_logits", "is_padded", "material")

    def __init__(self, positions, rotations, log_scales, colors, opacity_logits,
                 is_padded=None, material: MaterialParams | None = None):
        n = len(positions)
        self.positions = np.ascontiguousarray(positions, dtype=np.float32).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float32).reshape(n, 3)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float32).reshape(n)
        if is_padded is None:
            is_padded = np.zeros(n, dtype=bool)
        self.is_padded = np.ascontiguousarray(is_padded, dtype=bool).reshape(n)
        self.material = material if material is not None else MaterialParams()

    # -- constructors ------------------------------------------------------

    @classmethod
    def empty(cls, material: MaterialParams | None = None) -> "Scene":
        z = np.zeros((0, 3), dtype=np.float32)
        return cls(z, np.zeros((0, 4), np.float32), z.copy(), z.copy(),
                   np.zeros(0, np.float32), material=material)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian],
                       material: MaterialParams | None = None) -> "Scene":
        gs = list(gaussians)
        if not gs:
            return cls.empty(material)
        return cls(
            positions=np.array([g.position for g in gs]),
            rotations=np.array([g.rotation for g in gs]),
            log_scales=np.log(np.array([g.scale for g in gs])),
            colors=np.array([g.color for g in gs]),
            opacity_logits=logit(np.array([g.opacity for g in gs])),
            material=material,
        )

    # -- accessors ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            rotation=self.rotations[i] / np.linalg.norm(self.rotations[i]),
            scale=np.exp(self.log_scales[i].astype(np.float64)),
            color=np.clip(self.colors[i], 0.0, 1.0),
            opacity=float(sigmoid(self.opacity_logits[i])),
        )

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) float64 world covariances R diag(s^2) R^T."""
        r = quats_to_rotations(self.rotations)
        s2 = self.scales ** 2
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    @property
    def bounds(self) -> AABB:
        """AABB over centers, expanded by 3x the largest scale in the scene."""
        if len(self) == 0:
            return AABB(np.zeros(3), np.ones(3))
        margin = 3.0 * float(self.scales.max())
        return AABB(self.positions.min(axis=0) - margin,
                    self.positions.max(axis=0) + margin)

    # -- editing -----------------------------------------------------------

    def select(self, mask_or_index) -> "Scene":
        return Scene(self.positions[mask_or_index], self.rotations[mask_or_index],
                     self.log_scales[mask_or_index], self.colors[mask_or_index],
                     self.opacity_logits[mask_or_index], self.is_padded[mask_or_index],
                     material=self.material)

    def append(self, other: "Scene") -> "Scene":
        return Scene(np.concatenate([self.positions, other.positions]),
                     np.concatenate([self.rotations, other.rotations]),
                     np.concatenate([self.log_scales, other.log_scales]),
                     np.concatenate([self.colors, other.colors]),
                     np.concatenate([self.opacity_logits, other.opacity_logits]),
                     np.concatenate([self.is_padded, other.is_padded]),
                     material=self.material)

    def copy(self) -> "Scene":
        return Scene(self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
                     self.colors.copy(), self.opacity_logits.copy(), self.is_padded.copy(),
                     material=self.material)

    def validate(self) -> None:
        """Raise SceneValidationError if any per-Gaussian invariant fails."""
        if not np.all(np.isfinite(self.positions)):
            raise SceneValidationError("non-finite position")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if len(self) and np.abs(norms - 1.0).max() > QUAT_NORM_TOL:
            raise SceneValidationError("rotation quaternions must be unit norm within 1e-6")
        if not np.all(np.isfinite(self.log_scales)):
            raise SceneValidationError("non-finite log scale")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise SceneValidationError("color channels must lie in [0, 1]")
        if np.any(np.isnan(self.opacity_logits)):
            raise SceneValidationError("NaN opacity logit")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (np.array_equal(self.positions, other.positions)
                and np.array_equal(self.rotations, other.rotations)
                and np.array_equal(self.log_scales, other.log_scales)
                and np.array_equal(self.colors, other.colors)
                and np.array_equal(self.opacity_logits, other.opacity_logits)
                and np.array_equal(self.is_padded, other.is_padded))
