"""Rigid transforms and the rectified stereo pinhole camera model.

Conventions used throughout the package:
  * a ``Pose`` maps local coordinates into the parent frame (body to world),
  * stereo observations are ``(u_left, v_left, u_right)`` in pixels on a
    rectified pair sharing intrinsics, with the right camera displaced by
    ``baseline`` along +x,
  * twists are 6-vectors ``[rho, phi]`` with the rotation part last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _Rotation


class NonPositiveDepth(ValueError):
    """Point depth is at or below the projection floor."""


class DegenerateDisparity(ValueError):
    """Stereo disparity too small to triangulate."""


class NearPiRotation(ValueError):
    """Rotation angle too close to pi for a stable log map."""


_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, skew(a) @ b == cross(a, b)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def skew_stack(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices of a stack of vectors, shape (n, 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a series fallback below the small-angle cutoff."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        a = 1.0 - angle * angle / 6.0
        b = 0.5 - angle * angle / 24.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of ``rot``. Raises NearPiRotation above pi - 1e-6."""
    trace = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle > np.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {angle!r} too close to pi")
    vee = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if angle < _SMALL_ANGLE:
        return vee * (1.0 + angle * angle / 6.0)
    return vee * (angle / np.sin(angle))


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        b = 0.5 - angle * angle / 24.0
        c = 1.0 / 6.0 - angle * angle / 120.0
    else:
        b = (1.0 - np.cos(angle)) / (angle * angle)
        c = (angle - np.sin(angle)) / (angle ** 3)
    return np.eye(3) + b * k + c * (k @ k)


def _left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        c = 1.0 / 12.0 + angle * angle / 720.0
    else:
        c = 1.0 / (angle * angle) - (1.0 + np.cos(angle)) / (
            2.0 * angle * np.sin(angle)
        )
    return np.eye(3) - 0.5 * k + c * (k @ k)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: ``apply(x) = rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=float)
        return Pose(mat[:3, :3].copy(), mat[:3, 3].copy())

    @staticmethod
    def from_quaternion(translation: np.ndarray, q_xyzw: np.ndarray) -> "Pose":
        rot = _Rotation.from_quat(np.asarray(q_xyzw, dtype=float)).as_matrix()
        return Pose(rot, np.asarray(translation, dtype=float).copy())

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with non-negative qw."""
        q = _Rotation.from_matrix(self.rotation).as_quat()
        return q if q[3] >= 0.0 else -q

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def orthonormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) after accumulated drift."""
        u, _, vt = np.linalg.svd(self.rotation)
        rot = u @ vt
        if np.linalg.det(rot) < 0.0:
            rot = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        return Pose(rot, self.translation.copy())


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist ``[rho, phi]``."""
    xi = np.asarray(xi, dtype=float)
    phi = xi[3:6]
    return Pose(so3_exp(phi), _left_jacobian(phi) @ xi[0:3])


def se3_log(pose: Pose) -> np.ndarray:
    """Twist of ``pose``; inverse of :func:`se3_exp` away from angle pi."""
    phi = so3_log(pose.rotation)
    rho = _left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def compose_increment_arrays(
    rot: np.ndarray, tr: np.ndarray, twists: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`compose_increments` on stacked ``(n, 3, 3)``
    rotations and ``(n, 3)`` translations; returns the updated stacks."""
    twists = np.atleast_2d(np.asarray(twists, dtype=float))
    rho, phi = twists[:, :3], twists[:, 3:]
    angle = np.linalg.norm(phi, axis=1)
    small = angle < _SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a2 = angle * angle
    a = np.where(small, 1.0 - a2 / 6.0, np.sin(angle) / safe)
    b = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(angle)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - a2 / 120.0, (safe - np.sin(angle)) / safe**3)
    k = skew_stack(phi)
    kk = k @ k
    exp_rot = np.eye(3) + a[:, None, None] * k + b[:, None, None] * kk
    jac = np.eye(3) + b[:, None, None] * k + c[:, None, None] * kk
    exp_tr = np.einsum("nij,nj->ni", jac, rho)
    new_rot = rot @ exp_rot
    new_tr = np.einsum("nij,nj->ni", rot, exp_tr) + tr
    u, _, vt = np.linalg.svd(new_rot)
    ortho = u @ vt
    flip = np.linalg.det(ortho) < 0.0
    if flip.any():
        u[flip, :, -1] = -u[flip, :, -1]
        ortho = u @ vt
    return ortho, new_tr


def compose_increments(poses, twists: np.ndarray) -> list[Pose]:
    """Right-multiply each pose by the exponential of its twist.

    Element-for-element this is ``pose.compose(se3_exp(xi)).orthonormalized()``
    with one vectorized Rodrigues pass and one batched SVD in place of the
    per-pose loop; solvers call it every accepted step.
    """
    rot = np.stack([p.rotation for p in poses])
    tr = np.stack([p.translation for p in poses])
    ortho, new_tr = compose_increment_arrays(rot, tr, twists)
    return [Pose(ortho[i], new_tr[i]) for i in range(len(ortho))]


@dataclass(frozen=True)
class StereoIntrinsics:
    """Shared pinhole intrinsics of a rectified stereo pair."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.baseline <= 0.0:
            raise ValueError("baseline must be positive")


@dataclass(frozen=True)
class StereoMeasurement:
    """One stereo feature observation ``(u_left, v_left, u_right)`` in pixels."""

    u_left: float
    v_left: float
    u_right: float

    def __post_init__(self):
        if not self.u_left > self.u_right:
            raise ValueError(
                f"disparity must be positive, got uL={self.u_left} uR={self.u_right}"
            )

    @property
    def disparity(self) -> float:
        return self.u_left - self.u_right

    def as_array(self) -> np.ndarray:
        return np.array([self.u_left, self.v_left, self.u_right])


def project(
    cam_from_world: Pose,
    point_world: np.ndarray,
    cam: StereoIntrinsics,
    depth_min: float = 0.1,
) -> StereoMeasurement:
    """Project a world point into the rectified stereo pair.

    Raises NonPositiveDepth when the camera-frame depth is at or below
    ``depth_min``.
    """
    p = cam_from_world.apply(np.asarray(point_world, dtype=float))
    if p[2] <= depth_min:
        raise NonPositiveDepth(f"depth {p[2]!r} below floor {depth_min!r}")
    inv_z = 1.0 / p[2]
    return StereoMeasurement(
        cam.fx * p[0] * inv_z + cam.cx,
        cam.fy * p[1] * inv_z + cam.cy,
        cam.fx * (p[0] - cam.baseline) * inv_z + cam.cx,
    )


def project_points(
    cam_from_world: Pose,
    points_world: np.ndarray,
    cam: StereoIntrinsics,
    depth_min: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(N, 3)`` pixels and a validity mask.

    Rows with depth at or below ``depth_min`` hold NaN and are flagged False.
    """
    pts = cam_from_world.apply(np.asarray(points_world, dtype=float))
    ok = pts[:, 2] > depth_min
    out = np.full((len(pts), 3), np.nan)
    z = pts[ok]
    inv_z = 1.0 / z[:, 2]
    out[ok, 0] = cam.fx * z[:, 0] * inv_z + cam.cx
    out[ok, 1] = cam.fy * z[:, 1] * inv_z + cam.cy
    out[ok, 2] = cam.fx * (z[:, 0] - cam.baseline) * inv_z + cam.cx
    return out, ok


def _as_pixel_triple(z) -> np.ndarray:
    if isinstance(z, StereoMeasurement):
        return z.as_array()
    return np.asarray(z, dtype=float)


def back_project(z, cam: StereoIntrinsics, disparity_min: float = 1e-3) -> np.ndarray:
    """Triangulate a camera-frame point from one stereo observation."""
    arr = _as_pixel_triple(z)
    disparity = arr[0] - arr[2]
    if disparity < disparity_min:
        raise DegenerateDisparity(
            f"disparity {disparity!r} below floor {disparity_min!r}"
        )
    depth = cam.fx * cam.baseline / disparity
    return np.array(
        [
            (arr[0] - cam.cx) * depth / cam.fx,
            (arr[1] - cam.cy) * depth / cam.fy,
            depth,
        ]
    )


def projection_jacobian(point_cam: np.ndarray, cam: StereoIntrinsics) -> np.ndarray:
    """d(uL, vL, uR) / d(x, y, z) at a camera-frame point."""
    x, y, z = np.asarray(point_cam, dtype=float)
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    return np.array(
        [
            [cam.fx * inv_z, 0.0, -cam.fx * x * inv_z2],
            [0.0, cam.fy * inv_z, -cam.fy * y * inv_z2],
            [cam.fx * inv_z, 0.0, -cam.fx * (x - cam.baseline) * inv_z2],
        ]
    )


def projection_jacobians(points_cam: np.ndarray, cam: StereoIntrinsics) -> np.ndarray:
    """Batched :func:`projection_jacobian`, shape ``(N, 3, 3)``."""
    pts = np.asarray(points_cam, dtype=float)
    inv_z = 1.0 / pts[:, 2]
    inv_z2 = inv_z * inv_z
    out = np.zeros((len(pts), 3, 3))
    out[:, 0, 0] = cam.fx * inv_z
    out[:, 0, 2] = -cam.fx * pts[:, 0] * inv_z2
    out[:, 1, 1] = cam.fy * inv_z
    out[:, 1, 2] = -cam.fy * pts[:, 1] * inv_z2
    out[:, 2, 0] = cam.fx * inv_z
    out[:, 2, 2] = -cam.fx * (pts[:, 0] - cam.baseline) * inv_z2
    return out


def back_projection_jacobian(
    z, cam: StereoIntrinsics, disparity_min: float = 1e-3
) -> np.ndarray:
    """d(x, y, z) / d(uL, vL, uR); the inverse of :func:`projection_jacobian`."""
    arr = _as_pixel_triple(z)
    disparity = arr[0] - arr[2]
    if disparity < disparity_min:
        raise DegenerateDisparity(
            f"disparity {disparity!r} below floor {disparity_min!r}"
        )
    depth = cam.fx * cam.baseline / disparity
    d_depth_du_left = -depth / disparity
    d_depth_du_right = depth / disparity
    nx = (arr[0] - cam.cx) / cam.fx
    ny = (arr[1] - cam.cy) / cam.fy
    return np.array(
        [
            [depth / cam.fx + nx * d_depth_du_left, 0.0, nx * d_depth_du_right],
            [ny * d_depth_du_left, depth / cam.fy, ny * d_depth_du_right],
            [d_depth_du_left, 0.0, d_depth_du_right],
        ]
    )


def propagate_measurement_noise(
    z, cov_pixels: np.ndarray, cam: StereoIntrinsics, disparity_min: float = 1e-3
) -> np.ndarray:
    """First-order triangulation covariance from pixel covariance.

    Returns the symmetrized ``J cov J^T`` with J the back-projection Jacobian.
    """
    jac = back_projection_jacobian(z, cam, disparity_min)
    cov = jac @ np.asarray(cov_pixels, dtype=float) @ jac.T
    return 0.5 * (cov + cov.T)


def transform_covariance(rot: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Rotate a covariance between frames: ``rot cov rot^T``."""
    out = rot @ cov @ rot.T
    return 0.5 * (out + out.T)


def is_spd(cov: np.ndarray, tol: float = 1e-10) -> bool:
    """True when symmetric within ``tol`` and all eigenvalues exceed ``tol``."""
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=tol):
        return False
    return bool(np.linalg.eigvalsh(cov).min() > tol)
