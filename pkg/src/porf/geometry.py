"""Rotation and pose algebra, two-view geometry and the Sampson distance.

Poses are camera-to-world: ``x_world = R @ x_cam + t``, so ``t`` is the
camera centre. Cameras follow the pinhole convention with +z forward,
+x right and +y down in the image.

Everything here is plain numpy; the differentiable counterparts used during
training live in :mod:`porf.autodiff`-based modules.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InvalidArgument

SMALL_ANGLE = 1e-8
SAMPSON_EPS = 1e-12


def _vec3(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise InvalidArgument(f"{name} must be a 3-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument(f"{name} must be finite")
    return x


def canonical_axis_angle(r):
    """Wrap an axis-angle vector so that its norm lies in [0, pi]."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta <= np.pi:
        return r.copy()
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return r * (wrapped / theta)


@dataclass(frozen=True, eq=False)
class Pose6:
    """Camera-to-world pose: axis-angle rotation ``r`` and camera centre ``t``."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = canonical_axis_angle(_vec3(self.r, "r"))
        t = _vec3(self.t, "t").copy()
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(axis_angle_from_matrix(R), t)

    @property
    def R(self):
        return rodrigues(self.r)

    def as_vector(self):
        return np.concatenate([self.r, self.t])

    def __eq__(self, other):
        if not isinstance(other, Pose6):
            return NotImplemented
        return np.array_equal(self.r, other.r) and np.array_equal(self.t, other.t)

    def __repr__(self):
        return f"Pose6(r={self.r.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidArgument("image size must be integral")

    @classmethod
    def from_fov(cls, width, height, fov_deg):
        """Square pixels, principal point at the image centre, horizontal FOV."""
        fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(fx, fx, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def pixel_rays(self, u, v):
        """Camera-frame (unnormalized, z = 1) directions through pixel coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues(r):
    """Rotation matrix for axis-angle ``r`` (angle ``|r|`` about ``r/|r|``)."""
    r = _vec3(r, "r")
    theta2 = float(r @ r)
    K = skew(r)
    if theta2 < SMALL_ANGLE**2:
        # Taylor expansion; second-order term keeps the result orthonormal to ~1e-24
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_batch(r):
    """Vectorised :func:`rodrigues` over an ``(N, 3)`` array."""
    r = np.asarray(r, dtype=np.float64).reshape(-1, 3)
    theta2 = np.sum(r * r, axis=1)
    small = theta2 < SMALL_ANGLE**2
    theta = np.sqrt(np.where(small, 1.0, theta2))
    a = np.where(small, 1.0, np.sin(theta) / theta)
    b = np.where(small, 0.5, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    K = np.zeros((len(r), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -r[:, 2], r[:, 1]
    K[:, 1, 0], K[:, 1, 2] = r[:, 2], -r[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -r[:, 1], r[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) and abs(np.linalg.det(R) - 1.0) <= tol


def rotation_angle(R):
    """Angle of a rotation matrix in radians, in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R):
        raise InvalidArgument("input is not a rotation matrix")
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def axis_angle_from_matrix(R):
    """Inverse of :func:`rodrigues`, returning ``|r|`` in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, tol=1e-6):
        raise InvalidArgument("input is not a rotation matrix")
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 keeps full precision near 0 and pi, where arccos of the trace does not
    theta = np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0))
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta > 1e-4:
        return w * (theta / (2.0 * np.sin(theta)))
    # near pi the antisymmetric part vanishes; the symmetric part is (1 - cos) a a^T
    S = 0.5 * (R + R.T) - np.cos(theta) * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.linalg.norm(S[:, k])
    if axis @ w < 0:
        axis = -axis
    return canonical_axis_angle(axis * theta)


def relative_pose(pose_i, pose_j):
    """Transform from frame-i camera coordinates to frame-j camera coordinates."""
    Ri, Rj = pose_i.R, pose_j.R
    R_rel = Rj.T @ Ri
    t_rel = Rj.T @ (pose_i.t - pose_j.t)
    return R_rel, t_rel


def fundamental_from_relative(R_rel, t_rel, K_i, K_j):
    t_rel = np.asarray(t_rel, dtype=np.float64)
    if np.linalg.norm(t_rel) <= 1e-12:
        raise DegenerateGeometry("zero baseline between the two cameras")
    F = K_j.K_inv.T @ skew(t_rel) @ R_rel @ K_i.K_inv
    return F / np.linalg.norm(F)


def fundamental_matrix(pose_i, pose_j, K_i, K_j=None):
    """Unit-Frobenius fundamental matrix with ``x_j^T F x_i = 0``."""
    K_j = K_i if K_j is None else K_j
    R_rel, t_rel = relative_pose(pose_i, pose_j)
    return fundamental_from_relative(R_rel, t_rel, K_i, K_j)


def sampson_distance(x, x_prime, F):
    """First-order squared geometric error (pixels^2) of matches under ``F``.

    ``x`` and ``x_prime`` are ``(..., 2)`` pixel coordinates in the first and
    second image; the result has the broadcast leading shape. ``F`` is brought
    to unit Frobenius norm first, which makes the guarded value exactly
    independent of the scale of ``F``.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (3, 3) or not np.all(np.isfinite(F)):
        raise InvalidArgument("F must be a finite 3x3 matrix")
    if not np.any(F):
        raise InvalidArgument("F is all zeros")
    # rescale to unit norm (via the max entry, so tiny or huge F cannot under/overflow)
    F = F / np.max(np.abs(F))
    F = F / np.linalg.norm(F)
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    if x.shape[-1] != 2 or xp.shape[-1] != 2:
        raise InvalidArgument("pixel coordinates must have trailing dimension 2")
    xh = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    xph = np.concatenate([xp, np.ones(xp.shape[:-1] + (1,))], axis=-1)
    Fx = xh @ F.T
    Ftxp = xph @ F
    num = np.sum(xph * Fx, axis=-1) ** 2
    den = Fx[..., 0] ** 2 + Fx[..., 1] ** 2 + Ftxp[..., 0] ** 2 + Ftxp[..., 1] ** 2
    return num / (den + SAMPSON_EPS)


def compose_residual(initial, residual, alpha):
    """Additive residual update ``r + alpha*dr``, ``t + alpha*dt``."""
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (6,) or not np.all(np.isfinite(residual)):
        raise InvalidArgument("residual must be a finite 6-vector")
    if not (np.isfinite(alpha) and alpha > 0):
        raise InvalidArgument("alpha must be positive")
    return Pose6(initial.r + alpha * residual[:3], initial.t + alpha * residual[3:])


def world_to_camera(pose, X):
    """Camera-frame coordinates of world points ``X`` (``(..., 3)``)."""
    X = np.asarray(X, dtype=np.float64)
    return (X - pose.t) @ pose.R


def project(pose, K, X):
    """Pixel coordinates and depths of world points."""
    Xc = world_to_camera(pose, X)
    z = Xc[..., 2]
    uv = np.stack([K.fx * Xc[..., 0] / z + K.cx, K.fy * Xc[..., 1] / z + K.cy], axis=-1)
    return uv, z
