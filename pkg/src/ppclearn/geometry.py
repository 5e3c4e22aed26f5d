"""Rigid transforms, pinhole projection and registration error metrics.

Conventions
-----------
* Points are millimetres.  Arrays of points have shape ``(N, 3)``.
* A pose ``T`` maps volume (phantom) coordinates into the camera frame.
* A motion vector ``dv`` is a length-6 array ``(omega, nu)``: axis-angle
  rotation followed by translation.
* Image-plane points are 2-D millimetre coordinates on the detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateProjection

PIXEL_SIZE_MM = 0.62
SMALL_ANGLE = 1e-9
EPS_DEPTH = 1e-6

Array = NDArray[np.float64]


def skew(v: ArrayLike) -> Array:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ x == cross(v, x)``."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation, ``x -> R x + t``."""

    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t: ArrayLike) -> RigidTransform:
        return cls(np.eye(3), t)

    @property
    def matrix(self) -> Array:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: ArrayLike) -> Array:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            return (self.rotation @ pts.T).T + self.translation
        return pts @ self.rotation.T + self.translation

    def apply_vector(self, vectors: ArrayLike) -> Array:
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim == 2:
            return (self.rotation @ v.T).T
        return v @ self.rotation.T

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def is_valid(self, tol: float = 1e-10) -> bool:
        r = self.rotation
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))):
            return False
        return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)

    def orthonormalized(self) -> RigidTransform:
        """Project the rotation onto SO(3) (nearest orthogonal matrix)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return RigidTransform(r, self.translation)

    def to_list(self) -> list[list[float]]:
        return self.matrix.tolist()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a o b`` (apply ``b`` first)."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rodrigues(omega: ArrayLike) -> Array:
    """Rotation matrix for the axis-angle vector ``omega``."""
    omega = np.asarray(omega, dtype=np.float64)
    alpha = float(np.linalg.norm(omega))
    k = skew(omega)
    if alpha < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    r = omega / alpha
    c, s = np.cos(alpha), np.sin(alpha)
    return c * np.eye(3) + (1.0 - c) * np.outer(r, r) + s * skew(r)


def rodrigues_batch(omegas: ArrayLike) -> Array:
    """``rodrigues`` applied to each row of a (B, 3) array."""
    om = np.asarray(omegas, dtype=np.float64).reshape(-1, 3)
    alpha = np.linalg.norm(om, axis=1)
    K = np.zeros((len(om), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -om[:, 2], om[:, 1], -om[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = om[:, 2], -om[:, 1], om[:, 0]
    small = alpha < SMALL_ANGLE
    safe = np.where(small, 1.0, alpha)
    # R = I + (sin a / a) K + ((1 - cos a) / a^2) K^2, series below SMALL_ANGLE
    c1 = np.where(small, 1.0, np.sin(safe) / safe)
    c2 = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * (K @ K)


def rodrigues_derivatives(omega: ArrayLike) -> Array:
    """Partial derivatives ``dR/d omega_i`` stacked as an array of shape (3, 3, 3).

    Uses the closed form of Gallego and Yezzi away from zero and the
    derivative of the second-order series below ``SMALL_ANGLE``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    alpha2 = float(omega @ omega)
    out = np.empty((3, 3, 3))
    eye = np.eye(3)
    if np.sqrt(alpha2) < SMALL_ANGLE:
        k = skew(omega)
        for i in range(3):
            ei = skew(eye[i])
            out[i] = ei + 0.5 * (ei @ k + k @ ei)
        return out
    r = rodrigues(omega)
    k = skew(omega)
    i_minus_r = eye - r
    for i in range(3):
        v = np.cross(omega, i_minus_r[:, i])
        out[i] = (omega[i] * k + skew(v)) @ r / alpha2
    return out


def delta_transform(dv: ArrayLike) -> RigidTransform:
    """Rigid transform for a differential motion ``dv = (omega, nu)``."""
    dv = np.asarray(dv, dtype=np.float64)
    return RigidTransform(rodrigues(dv[:3]), dv[3:6])


def rotation_vector(rotation: ArrayLike) -> Array:
    """Axis-angle vector of a rotation matrix (inverse of ``rodrigues`` for angles < pi)."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_rotvec()


def _orthonormal_basis(direction: Array) -> tuple[Array, Array]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = helper - (helper @ direction) * direction
    u /= np.linalg.norm(u)
    v = np.cross(direction, u)
    return u, v


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Ideal pinhole with the detector plane at ``focal_length`` from the source.

    The defaults resemble a C-arm: 1200 mm source-detector distance and a
    616 x 480 pixel detector with 0.62 mm pixels.
    """

    focal_length: float = 1200.0
    principal_point: Array = field(default_factory=lambda: np.zeros(2))
    detector_size: Array = field(default_factory=lambda: np.array([616 * PIXEL_SIZE_MM, 480 * PIXEL_SIZE_MM]))
    source: Array = field(default_factory=lambda: np.zeros(3))
    direction: Array = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("viewing direction must be unit norm")
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=np.float64).reshape(2))
        object.__setattr__(self, "detector_size", np.asarray(self.detector_size, dtype=np.float64).reshape(2))
        object.__setattr__(self, "source", np.asarray(self.source, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)
        if np.array_equal(d, [0.0, 0.0, 1.0]):
            u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
        else:
            u, v = _orthonormal_basis(d)
        object.__setattr__(self, "_basis", np.stack([u, v, d]))

    @property
    def basis(self) -> Array:
        """Rows: image u axis, image v axis, viewing direction."""
        return self._basis

    def local(self, points: ArrayLike) -> Array:
        return (np.asarray(points, dtype=np.float64) - self.source) @ self._basis.T

    def project_points(self, points: ArrayLike) -> Array:
        """Project camera-frame points onto the detector (mm)."""
        loc = self.local(points)
        depth = loc[..., 2]
        if np.any(~(depth > EPS_DEPTH)):
            raise DegenerateProjection("point at or behind the source")
        return self.focal_length * loc[..., :2] / depth[..., None] + self.principal_point

    def lift(self, image_points: ArrayLike) -> Array:
        """3-D camera-frame location of detector points."""
        q = np.asarray(image_points, dtype=np.float64) - self.principal_point
        return self.source + q[..., :1] * self._basis[0] + q[..., 1:2] * self._basis[1] + self.focal_length * self._basis[2]

    def in_plane(self, vectors2: ArrayLike) -> Array:
        """Embed 2-D detector directions as 3-D camera-frame directions."""
        q = np.asarray(vectors2, dtype=np.float64)
        return q[..., :1] * self._basis[0] + q[..., 1:2] * self._basis[1]

    def to_dict(self) -> dict:
        return {
            "focal_length": self.focal_length,
            "principal_point": self.principal_point.tolist(),
            "detector_size": self.detector_size.tolist(),
            "source": self.source.tolist(),
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PinholeCamera:
        return cls(**d)


def project(camera: PinholeCamera, T: RigidTransform, x: ArrayLike) -> Array:
    """Project volume-frame point(s) ``x`` under pose ``T``."""
    return camera.project_points(T.apply(x))


def projection_error(camera: PinholeCamera, T: RigidTransform, T_gt: RigidTransform, targets: ArrayLike) -> float:
    """Mean detector distance between target projections under ``T`` and ``T_gt`` (mm)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    diff = project(camera, T, targets) - project(camera, T_gt, targets)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def mtre(T_a: RigidTransform, T_b: RigidTransform, targets: ArrayLike) -> float:
    """Mean 3-D target registration error between two poses (mm)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    return float(np.mean(np.linalg.norm(T_a.apply(targets) - T_b.apply(targets), axis=1)))


def mrpd(camera: PinholeCamera, T_est: RigidTransform, T_gt: RigidTransform, targets: ArrayLike) -> float:
    """Mean distance of ground-truth targets to the re-projection rays of ``T_est`` (mm)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    ray_points = camera.lift(project(camera, T_est, targets))
    dirs = ray_points - camera.source
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rel = T_gt.apply(targets) - camera.source
    perp = rel - np.sum(rel * dirs, axis=1, keepdims=True) * dirs
    return float(np.mean(np.linalg.norm(perp, axis=1)))


def box_corners(lo: ArrayLike, hi: ArrayLike) -> Array:
    """The 8 corners of an axis-aligned box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    idx = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    return np.where(idx == 0, lo, hi)
