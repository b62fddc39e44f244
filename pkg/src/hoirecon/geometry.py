"""Rigid/similarity transforms, pinhole cameras and point-set alignment.

Camera convention: right-handed, +z forward, +x right, +y down, pixel origin
at the top-left image corner with pixel centers at integer + 0.5. A pose maps
object (world) coordinates into the camera frame: ``x_cam = R @ x_obj + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DEPTH = 1e-6


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# rotations


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion in (x, y, z, w) order to a 3x3 rotation matrix."""
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (x, y, z, w) quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1 - np.cos(theta)) / theta**2) * K @ K
    )


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians, robust near 0 and pi."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) to ``M``."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class SE3Pose:
    q: np.ndarray  # (x, y, z, w)
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise GeometryError("invalid quaternion")
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "SE3Pose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=float))

    @classmethod
    def from_T(cls, T: np.ndarray) -> "SE3Pose":
        return cls.from_matrix(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_mul(self.q, other.q)
        return SE3Pose(q, self.R @ other.t + self.t)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return self.compose(other)

    def inverse(self) -> "SE3Pose":
        qi = self.q * np.array([-1.0, -1.0, -1.0, 1.0])
        return SE3Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def center(self) -> np.ndarray:
        """Camera center in object coordinates."""
        return -(self.R.T @ self.t)


@dataclass(frozen=True)
class Sim3:
    scale: float
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("Sim3 scale must be positive")
        q = np.asarray(self.q, dtype=float).reshape(4)
        object.__setattr__(self, "q", q / np.linalg.norm(q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def from_matrix(cls, scale: float, R: np.ndarray, t) -> "Sim3":
        return cls(float(scale), matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(p, dtype=float) @ self.R.T) + self.t

    def inverse(self) -> "Sim3":
        Ri = self.R.T
        return Sim3.from_matrix(1.0 / self.scale, Ri, -(Ri @ self.t) / self.scale)

    def compose(self, other: "Sim3") -> "Sim3":
        R = self.R @ other.R
        return Sim3.from_matrix(
            self.scale * other.scale, R, self.scale * (self.R @ other.t) + self.t
        )

    def transform_camera(self, pose: SE3Pose) -> SE3Pose:
        """Re-express a world-to-camera pose after the world is mapped by this
        similarity. Camera-frame coordinates are rescaled so the result is a
        rigid pose in the target world's units."""
        Rs = self.R
        R = pose.R @ Rs.T
        return SE3Pose.from_matrix(R, self.scale * pose.t - R @ self.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    @classmethod
    def simple(cls, f: float, size: int) -> "CameraIntrinsics":
        return cls(f, f, size / 2.0, size / 2.0, size, size)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


# ---------------------------------------------------------------------------
# projection


def project(intr: CameraIntrinsics, pose: SE3Pose, p) -> tuple[np.ndarray, float]:
    """Project one object-frame point. Returns ``(pixel, depth)``."""
    pc = pose.apply(np.asarray(p, dtype=float))
    if not pc[2] > MIN_DEPTH:
        raise BehindCameraError(f"point depth {pc[2]:.3g} m is behind the camera")
    u = intr.fx * pc[0] / pc[2] + intr.cx
    v = intr.fy * pc[1] / pc[2] + intr.cy
    return np.array([u, v]), float(pc[2])


def project_points(intr: CameraIntrinsics, pose: SE3Pose, pts: np.ndarray):
    """Vectorized projection; returns ``(pixels, depths, valid)``."""
    pc = np.asarray(pts, dtype=float) @ pose.R.T + pose.t
    z = pc[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    uv = np.stack(
        [intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy], axis=1
    )
    return uv, z, valid


def unproject(intr: CameraIntrinsics, pose: SE3Pose, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise GeometryError("unproject needs a positive depth")
    u, v = pixel
    pc = np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])
    return pose.R.T @ (pc - pose.t)


def unproject_points(intr, pose, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    depths = np.asarray(depths, dtype=float)
    if np.any(~(depths > 0)):
        raise GeometryError("unproject needs positive depths")
    pc = np.stack(
        [
            (pixels[:, 0] - intr.cx) / intr.fx * depths,
            (pixels[:, 1] - intr.cy) / intr.fy * depths,
            depths,
        ],
        axis=1,
    )
    return (pc - pose.t) @ pose.R


def pixel_rays(intr: CameraIntrinsics, pose: SE3Pose, pixels: np.ndarray):
    """Object-frame origin and unit directions of rays through ``pixels``."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    d_cam = np.stack(
        [
            (pixels[:, 0] - intr.cx) / intr.fx,
            (pixels[:, 1] - intr.cy) / intr.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    d = d_cam @ pose.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return pose.center(), d


# ---------------------------------------------------------------------------
# view construction


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> SE3Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=float)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return SE3Pose.from_matrix(R, -R @ eye)


def fibonacci_directions(n: int) -> np.ndarray:
    if n < 1:
        raise GeometryError("need at least one view")
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    k = np.arange(n)
    z = 1.0 - 2.0 * k / (n - 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def fibonacci_sphere_views(n: int, radius: float, look_at_point=(0.0, 0.0, 0.0), intr=None):
    """``n`` deterministic cameras on a sphere, all aimed at its center.

    The first view sits on the +z pole; with ``n > 1`` the last sits on the -z
    pole. ``intr`` is accepted for interface symmetry and unused.
    """
    if not radius > 0:
        raise GeometryError("radius must be positive")
    c = np.asarray(look_at_point, dtype=float)
    return [look_at(c + radius * d, c) for d in fibonacci_directions(n)]


# ---------------------------------------------------------------------------
# alignment


def umeyama_sim3(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3:
    """Least-squares ``dst ≈ s R src + t`` (Umeyama 1991). Collinear sources
    leave the rotation about their line undetermined and are rejected."""
    src, dst = _point_pairs(src, dst)
    if len(src) < 3:
        raise DegenerateConfigurationError("need at least 3 point pairs")
    sv = np.linalg.svd(src - src.mean(0), compute_uv=False)
    if sv[0] == 0 or sv[1] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("source points are collinear")
    return similarity_fit(src, dst, with_scale)


def _point_pairs(src, dst):
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise GeometryError("src and dst must both be (n, 3)")
    return src, dst


def similarity_fit(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3:
    """The Umeyama solution without the degeneracy check. On collinear input
    it returns one of the equally good minimizers, which is all a residual
    computation needs."""
    src, dst = _point_pairs(src, dst)
    n = len(src)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = np.sum(xs**2) / n
    if with_scale and not var > 0:
        raise DegenerateConfigurationError("source points coincide")
    s = float(np.sum(d * np.diag(S)) / var) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return Sim3.from_matrix(s, R, t)


@dataclass
class Trajectory:
    """Ordered ``(frame index, pose)`` pairs with strictly increasing indices."""

    frames: list[int] = field(default_factory=list)
    poses: list[SE3Pose] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise GeometryError("frame/pose count mismatch")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise GeometryError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def translations(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)
