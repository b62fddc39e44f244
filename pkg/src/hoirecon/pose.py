"""Render-and-match object pose recovery.

Pipeline: render reference views of the reconstructed mesh, anchor a pose
provider's relative poses to the object frame through the reference camera
centres, then alternate matching against renders at the current estimate,
per-frame RANSAC-PnP and a joint damped Gauss-Newton refinement whose cost is

    lambda_proj * sum ||proj(R_t P + T_t) - p||^2 + lambda_smooth * sum ||T_t - T_{t-1}||^2

with reprojection residuals in pixels and translations in metres.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DegenerateConfigurationError,
    SE3Pose,
    Sim3,
    Trajectory,
    fibonacci_sphere_views,
    project_to_rotation,
    so3_exp,
    umeyama_sim3,
    unproject_points,
)
from .mesh import DepthMap, MaskImage, TriMesh, rasterize

log = logging.getLogger(__name__)


class PoseError(RuntimeError):
    pass


class RansacError(PoseError):
    pass


@dataclass
class CorrespondenceSet:
    points3d: np.ndarray  # (K, 3) object frame
    pixels: np.ndarray  # (K, 2) query image
    frame: int = 0

    def __post_init__(self):
        self.points3d = np.asarray(self.points3d, dtype=float).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.points3d) != len(self.pixels):
            raise PoseError("point/pixel count mismatch")
        if not (np.all(np.isfinite(self.points3d)) and np.all(np.isfinite(self.pixels))):
            raise PoseError("correspondences must be finite")

    def __len__(self):
        return len(self.points3d)

    def subset(self, keep) -> "CorrespondenceSet":
        return CorrespondenceSet(self.points3d[keep], self.pixels[keep], self.frame)


@dataclass(frozen=True)
class PoseLossWeights:
    lambda_proj: float = 10.0
    lambda_smooth: float = 3.0

    def __post_init__(self):
        if self.lambda_proj < 0 or self.lambda_smooth < 0:
            raise PoseError("loss weights must be nonnegative")


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    sample_size: int = 6
    threshold: float = 3.0
    seed: int = 0
    confidence: float = 0.999  # adaptive stop; 1.0 always runs every iteration

    def __post_init__(self):
        if self.sample_size < 6:
            raise PoseError("the DLT solver needs a sample size of at least 6")
        if self.iterations < 1 or not self.threshold > 0:
            raise PoseError("invalid RANSAC configuration")


@dataclass
class RenderedView:
    pose: SE3Pose
    depth: DepthMap
    mask: MaskImage


# ---------------------------------------------------------------------------
# reference views


def reference_radius(mesh: TriMesh, intr: CameraIntrinsics, fill: float = 0.6) -> tuple[float, np.ndarray]:
    lo, hi = mesh.bounds()
    centre = 0.5 * (lo + hi)
    rho = float(np.max(np.linalg.norm(mesh.vertices - centre, axis=1)))
    return rho * intr.fy / (0.5 * fill * intr.height), centre


def reference_views(
    mesh: TriMesh, intr: CameraIntrinsics, n: int = 30, radius: float | None = None
) -> list[RenderedView]:
    """``n`` Fibonacci-sphere renders. The default radius makes the bounding
    sphere span about 60% of the image height."""
    if mesh.is_empty:
        raise PoseError("cannot render an empty mesh")
    auto, centre = reference_radius(mesh, intr)
    poses = fibonacci_sphere_views(n, radius or auto, centre)
    out = []
    for p in poses:
        depth, mask = rasterize(mesh, intr, p)
        out.append(RenderedView(p, depth, mask))
    return out


# ---------------------------------------------------------------------------
# coarse alignment


class PoseProvider(Protocol):
    def __call__(self, ref_poses: list[SE3Pose], frames: list) -> tuple[list[SE3Pose], list[SE3Pose]]:
        """Returns provider-frame poses for the references and the inputs."""


def perturb_pose(pose: SE3Pose, rot_deg: float, centre_sigma: float, rng: np.random.Generator) -> SE3Pose:
    """Rotate the camera about its own centre by a random axis-angle with RMS
    angle ``rot_deg`` and shift the centre by isotropic noise."""
    w = rng.normal(size=3) * np.radians(rot_deg) / np.sqrt(3.0)
    R = so3_exp(w) @ pose.R
    c = pose.center() + rng.normal(size=3) * centre_sigma
    return SE3Pose.from_matrix(R, -R @ c)


def random_sim3(rng: np.random.Generator) -> Sim3:
    q = rng.normal(size=4)
    return Sim3(float(np.exp(rng.uniform(-1.0, 1.0))), q, rng.normal(size=3))


@dataclass
class NoisyOracleProvider:
    """Stand-in for a learned multi-view pose network: ground-truth input
    poses (taken from the frame records) plus noise, all expressed in a random
    similarity gauge. References get the same noise model."""

    rot_deg: float = 5.0
    centre_sigma: float = 0.0
    seed: int = 0
    gauge: Sim3 | None = None

    def __call__(self, ref_poses, frames):
        rng = np.random.default_rng([self.seed, 0x9A7])
        gauge = self.gauge or random_sim3(rng)
        noisy_refs = [perturb_pose(p, self.rot_deg, self.centre_sigma, rng) for p in ref_poses]
        noisy_inputs = [perturb_pose(f.pose, self.rot_deg, self.centre_sigma, rng) for f in frames]
        return (
            [gauge.inverse().transform_camera(p) for p in noisy_refs],
            [gauge.inverse().transform_camera(p) for p in noisy_inputs],
        )


def coarse_align(
    provider_refs: list[SE3Pose],
    provider_inputs: list[SE3Pose],
    known_refs: list[SE3Pose],
    frames: list[int] | None = None,
) -> Trajectory:
    """Map provider poses into the object frame via a similarity fitted on
    the reference camera centres."""
    if len(provider_refs) != len(known_refs):
        raise PoseError("provider did not return every reference view")
    if len(known_refs) < 3:
        raise PoseError("coarse alignment needs at least 3 reference views")
    src = np.array([p.center() for p in provider_refs])
    dst = np.array([p.center() for p in known_refs])
    try:
        S = umeyama_sim3(src, dst, with_scale=True)
    except DegenerateConfigurationError as e:
        raise PoseError(f"coarse alignment failed: {e}") from e
    poses = [S.transform_camera(p) for p in provider_inputs]
    return Trajectory(list(frames) if frames is not None else list(range(len(poses))), poses)


# ---------------------------------------------------------------------------
# matching and correspondences


Matcher = Callable[[object, RenderedView], tuple[np.ndarray, np.ndarray]]


@dataclass
class SyntheticMatcher:
    """Deterministic harness matcher. Samples rendered object pixels, lifts
    them with the rendered depth, and keeps those visible in the query (mask
    hit and depth agreement under the query's ground-truth pose). A fraction
    of pairs has its query pixel replaced by a uniform random pixel; the rest
    get Gaussian pixel noise. Returns ``(query_px, render_px)``."""

    intr: CameraIntrinsics
    n_matches: int = 400
    outlier_frac: float = 0.0
    noise_px: float = 0.0
    seed: int = 0
    depth_tol: float = 0.02

    def __call__(self, query, rendered: RenderedView, call_id: int = 0):
        intr = self.intr
        rng = np.random.default_rng([self.seed, int(query.index), int(call_id)])
        vs, us = np.nonzero(rendered.mask.values & np.isfinite(rendered.depth.depth))
        if len(us) == 0:
            return np.zeros((0, 2)), np.zeros((0, 2))
        k = min(len(us), 4 * self.n_matches)
        pick = rng.choice(len(us), size=k, replace=False)
        rpx = np.stack([us[pick] + 0.5, vs[pick] + 0.5], axis=1)
        X = unproject_points(intr, rendered.pose, rpx, rendered.depth.depth[vs[pick], us[pick]])
        pc = X @ query.pose.R.T + query.pose.t
        z = pc[:, 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        qpx = np.stack([intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy], axis=1)
        iu = np.floor(qpx[:, 0]).astype(np.int64)
        iv = np.floor(qpx[:, 1]).astype(np.int64)
        ok &= (iu >= 0) & (iu < intr.width) & (iv >= 0) & (iv < intr.height)
        qmask = query.omask.values
        qdepth = query.depth.depth
        vis = np.zeros(len(ok), dtype=bool)
        vis[ok] = qmask[iv[ok], iu[ok]] & (np.abs(qdepth[iv[ok], iu[ok]] - z[ok]) <= self.depth_tol * z[ok])
        idx = np.nonzero(vis)[0][: self.n_matches]
        qpx, rpx = qpx[idx], rpx[idx]
        n = len(idx)
        if n == 0:
            return qpx, rpx
        qpx = qpx + rng.normal(size=qpx.shape) * self.noise_px
        n_out = int(round(self.outlier_frac * n))
        if n_out:
            bad = rng.choice(n, size=n_out, replace=False)
            qpx[bad] = rng.uniform([0, 0], [intr.width, intr.height], size=(n_out, 2))
        qpx[:, 0] = np.clip(qpx[:, 0], 0.0, intr.width - 1e-9)
        qpx[:, 1] = np.clip(qpx[:, 1], 0.0, intr.height - 1e-9)
        return qpx, rpx


def default_matcher(intr: CameraIntrinsics, **kw) -> SyntheticMatcher:
    return SyntheticMatcher(intr, **kw)


def correspondences_from_depth(
    query_px: np.ndarray,
    render_px: np.ndarray,
    depth: DepthMap,
    ref_pose: SE3Pose,
    intr: CameraIntrinsics,
    frame: int = 0,
) -> CorrespondenceSet:
    """Lift the rendered side of each match through the rendered depth at the
    containing pixel; matches on empty depth are dropped."""
    query_px = np.asarray(query_px, dtype=float).reshape(-1, 2)
    render_px = np.asarray(render_px, dtype=float).reshape(-1, 2)
    D = depth.depth
    iu = np.floor(render_px[:, 0]).astype(np.int64)
    iv = np.floor(render_px[:, 1]).astype(np.int64)
    inside = (iu >= 0) & (iu < D.shape[1]) & (iv >= 0) & (iv < D.shape[0])
    d = np.full(len(render_px), np.inf)
    d[inside] = D[iv[inside], iu[inside]]
    keep = np.isfinite(d)
    if not keep.any():
        return CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 2)), frame)
    X = unproject_points(intr, ref_pose, render_px[keep], d[keep])
    return CorrespondenceSet(X, query_px[keep], frame)


# ---------------------------------------------------------------------------
# PnP


def reprojection_errors(pose: SE3Pose, intr: CameraIntrinsics, pts: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Pixel error per correspondence; ``inf`` for points behind the camera."""
    pc = pts @ pose.R.T + pose.t
    z = pc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    uv = np.stack([intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy], axis=1)
    err = np.linalg.norm(uv - px, axis=1)
    return np.where(ok, err, np.inf)


def _normalizer(x: np.ndarray):
    mu = x.mean(0)
    scale = np.sqrt(x.shape[1]) / max(np.sqrt(np.mean(np.sum((x - mu) ** 2, axis=1))), 1e-300)
    T = np.eye(x.shape[1] + 1)
    T[:-1, :-1] *= scale
    T[:-1, -1] = -scale * mu
    return T


def _normalized_coords(px: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return np.stack([(px[:, 0] - intr.cx) / intr.fx, (px[:, 1] - intr.cy) / intr.fy], axis=1)


def _dlt_rt(pts: np.ndarray, xn: np.ndarray, allow_reflection: bool = False):
    """Raw DLT on normalized image coordinates; returns ``(R, t)``."""
    n = len(pts)
    T3 = _normalizer(pts)
    T2 = _normalizer(xn)
    Xh = np.c_[pts, np.ones(n)] @ T3.T
    xh = np.c_[xn, np.ones(n)] @ T2.T
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, 1:2] * Xh
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfigurationError("DLT system is rank deficient")
    P = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3
    depth = pts @ P[2, :3] + P[2, 3]
    if np.sum(depth > 0) < n / 2:
        P = -P
    U, S, Vt3 = np.linalg.svd(P[:, :3])
    if np.linalg.det(U @ Vt3) < 0:
        if not allow_reflection:
            raise DegenerateConfigurationError("DLT produced a reflection")
        U = U * np.array([1.0, 1.0, -1.0])
    return U @ Vt3, P[:, 3] / S.mean()


def _planar_rt(pts: np.ndarray, xn: np.ndarray):
    """Homography from in-plane coordinates to normalized image coordinates,
    decomposed into ``(R, t)``."""
    n = len(pts)
    c = pts.mean(0)
    _, sv, Vt = np.linalg.svd(pts - c, full_matrices=False)
    if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateConfigurationError("3D points are collinear")
    E = Vt.T  # columns e1, e2 span the plane, e3 is the normal
    ab = (pts - c) @ E[:, :2]
    Ta, Tx = _normalizer(ab), _normalizer(xn)
    A_h = np.c_[ab, np.ones(n)] @ Ta.T
    x_h = np.c_[xn, np.ones(n)] @ Tx.T
    M = np.zeros((2 * n, 9))
    M[0::2, 0:3] = A_h
    M[0::2, 6:9] = -x_h[:, :1] * A_h
    M[1::2, 3:6] = A_h
    M[1::2, 6:9] = -x_h[:, 1:2] * A_h
    _, s, V = np.linalg.svd(M, full_matrices=False)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfigurationError("homography system is rank deficient")
    H = np.linalg.inv(Tx) @ V[-1].reshape(3, 3) @ Ta
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if H[2, 2] * lam < 0:  # plane centre must lie in front of the camera
        lam = -lam
    r1, r2 = lam * H[:, 0], lam * H[:, 1]
    R = project_to_rotation(np.stack([r1, r2, np.cross(r1, r2)], axis=1)) @ E.T
    if np.linalg.det(R) < 0:
        raise DegenerateConfigurationError("planar decomposition produced a reflection")
    return R, lam * H[:, 2] - R @ c


def _with_rms(R, t, pts, px, intr) -> tuple[SE3Pose, float]:
    pose = SE3Pose.from_matrix(R, t)
    err = reprojection_errors(pose, intr, pts, px)
    rms = float(np.sqrt(np.mean(err**2))) if np.all(np.isfinite(err)) else float("inf")
    return pose, rms


def pnp_dlt(pts: np.ndarray, px: np.ndarray, intr: CameraIntrinsics) -> tuple[SE3Pose, float]:
    """Normalized 12-parameter DLT; the left 3x3 block is projected onto the
    nearest rotation. Returns ``(pose, reprojection RMS in pixels)``."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    px = np.asarray(px, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 6:
        raise DegenerateConfigurationError(f"DLT needs >= 6 correspondences, got {n}")
    sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    if sv[0] == 0 or sv[2] < 1e-9 * sv[0]:
        raise DegenerateConfigurationError("3D points are coplanar or collinear")
    R, t = _dlt_rt(pts, _normalized_coords(px, intr))
    return _with_rms(R, t, pts, px, intr)


def pnp_planar(pts: np.ndarray, px: np.ndarray, intr: CameraIntrinsics) -> tuple[SE3Pose, float]:
    """Pose from (near-)coplanar points: fit a homography from plane
    coordinates to normalized image coordinates and decompose it."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    px = np.asarray(px, dtype=float).reshape(-1, 2)
    if len(pts) < 4:
        raise DegenerateConfigurationError(f"planar PnP needs >= 4 correspondences, got {len(pts)}")
    R, t = _planar_rt(pts, _normalized_coords(px, intr))
    return _with_rms(R, t, pts, px, intr)


PLANARITY = 0.1


def planarity(pts: np.ndarray) -> float:
    """Ratio of the smallest to largest principal extent of a point set."""
    sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    return float(sv[2] / sv[0]) if sv[0] > 0 else 0.0


def solve_pnp(pts: np.ndarray, px: np.ndarray, intr: CameraIntrinsics) -> tuple[SE3Pose, float]:
    """General DLT, or the planar solver for flat point sets where the
    12-parameter DLT is ill-posed."""
    if planarity(pts) < PLANARITY:
        return pnp_planar(pts, px, intr)
    return pnp_dlt(pts, px, intr)


def _proj_jacobian(pose: SE3Pose, intr: CameraIntrinsics, pts: np.ndarray):
    """Projections and their (K, 2, 6) Jacobian w.r.t. a left-multiplied
    increment ``(omega, dt)``: ``R <- exp(omega) R``, ``t <- t + dt``."""
    return _proj_jacobian_rt(pose.R, pose.t, intr.fx, intr.fy, intr.cx, intr.cy, pts)


def _proj_jacobian_rt(R, t, fx, fy, cx, cy, pts):
    RP = pts @ R.T
    pc = RP + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    uv = np.stack([fx * x * iz + cx, fy * y * iz + cy], axis=1)
    dpi = np.zeros((len(pts), 2, 3))
    dpi[:, 0, 0] = fx * iz
    dpi[:, 0, 2] = -fx * x * iz * iz
    dpi[:, 1, 1] = fy * iz
    dpi[:, 1, 2] = -fy * y * iz * iz
    dX = np.zeros((len(pts), 3, 6))
    dX[:, 0, 1], dX[:, 0, 2] = RP[:, 2], -RP[:, 1]
    dX[:, 1, 0], dX[:, 1, 2] = -RP[:, 2], RP[:, 0]
    dX[:, 2, 0], dX[:, 2, 1] = RP[:, 1], -RP[:, 0]
    dX[:, :, 3:] = np.eye(3)
    return uv, dpi @ dX


def _apply_increment(pose: SE3Pose, delta: np.ndarray) -> SE3Pose:
    R = project_to_rotation(so3_exp(delta[:3]) @ pose.R)
    return SE3Pose.from_matrix(R, pose.t + delta[3:])


def polish_pose(pose: SE3Pose, pts, px, intr, iters: int = 10) -> SE3Pose:
    """Single-frame Levenberg-Marquardt on the reprojection error; only
    steps that lower the squared error are taken."""
    pts = np.asarray(pts, dtype=float)
    px = np.asarray(px, dtype=float)
    k = (intr.fx, intr.fy, intr.cx, intr.cy)
    R, t = pose.R, pose.t

    def cost(R, t):
        z = pts @ R[2] + t[2]
        if np.any(z <= 1e-9):
            return np.inf
        pc = pts @ R.T + t
        du = intr.fx * pc[:, 0] / pc[:, 2] + intr.cx - px[:, 0]
        dv = intr.fy * pc[:, 1] / pc[:, 2] + intr.cy - px[:, 1]
        return float(np.sum(du * du + dv * dv))

    cur = cost(R, t)
    if not np.isfinite(cur):
        return pose
    mu = 1e-3
    for _ in range(iters):
        uv, J = _proj_jacobian_rt(R, t, *k, pts)
        J = J.reshape(-1, 6)
        g = J.T @ (uv - px).reshape(-1)
        H = J.T @ J
        while mu <= 1e12:
            try:
                delta = np.linalg.solve(H + mu * np.eye(6), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            Rn, tn = so3_exp(delta[:3]) @ R, t + delta[3:]
            new = cost(Rn, tn)
            if new < cur:
                R, t, cur = Rn, tn, new
                mu = max(mu / 10.0, 1e-12)
                break
            mu *= 10.0
        else:
            break
    return SE3Pose.from_matrix(project_to_rotation(R), t)


def _batch_normalizer(x: np.ndarray):
    """Per-sample centroid and isotropic scale for stacked point sets."""
    mu = x.mean(1, keepdims=True)
    rms = np.sqrt(np.mean(np.sum((x - mu) ** 2, axis=2), axis=1))
    scale = np.sqrt(x.shape[2]) / np.maximum(rms, 1e-300)
    return mu, scale


def _batch_so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -w[:, 2], w[:, 1]
    K[:, 1, 0], K[:, 1, 2] = w[:, 2], -w[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -w[:, 1], w[:, 0]
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, (1 - np.cos(th)) / th**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def _batch_dlt(pts: np.ndarray, xn: np.ndarray):
    """Stacked DLT over (B, k) samples. Reflections are sign-corrected since
    the Gauss-Newton step that follows repairs small errors. Returns
    ``(R, t, valid)``."""
    B, k, _ = pts.shape
    m3, s3 = _batch_normalizer(pts)
    m2, s2 = _batch_normalizer(xn)
    Xh = np.concatenate([(pts - m3) * s3[:, None, None], np.ones((B, k, 1))], axis=2)
    xh = (xn - m2) * s2[:, None, None]
    A = np.zeros((B, 2 * k, 12))
    A[:, 0::2, 0:4] = Xh
    A[:, 0::2, 8:12] = -xh[:, :, :1] * Xh
    A[:, 1::2, 4:8] = Xh
    A[:, 1::2, 8:12] = -xh[:, :, 1:2] * Xh
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    valid = sv[:, -2] >= 1e-12 * sv[:, 0]
    Pn = Vt[:, -1].reshape(B, 3, 4)
    T3 = np.zeros((B, 4, 4))
    T3[:, [0, 1, 2], [0, 1, 2]] = s3[:, None]
    T3[:, :3, 3] = -s3[:, None] * m3[:, 0]
    T3[:, 3, 3] = 1.0
    T2i = np.zeros((B, 3, 3))
    T2i[:, [0, 1], [0, 1]] = 1.0 / s2[:, None]
    T2i[:, :2, 2] = m2[:, 0]
    T2i[:, 2, 2] = 1.0
    P = T2i @ Pn @ T3
    depth = np.einsum("bkj,bj->bk", pts, P[:, 2, :3]) + P[:, 2, 3:4]
    flip = np.sum(depth > 0, axis=1) < k / 2
    P[flip] *= -1
    U, S, Vt3 = np.linalg.svd(P[:, :, :3])
    refl = np.linalg.det(U @ Vt3) < 0
    U[refl, :, 2] *= -1
    return U @ Vt3, P[:, :, 3] / S.mean(1, keepdims=True), valid


def _batch_planar(pts: np.ndarray, xn: np.ndarray):
    """Stacked homography solver for flat samples. Returns ``(R, t, valid)``."""
    B, k, _ = pts.shape
    c = pts.mean(1, keepdims=True)
    _, sv, Vt = np.linalg.svd(pts - c, full_matrices=False)
    valid = sv[:, 1] >= 1e-9 * sv[:, 0]
    E = np.swapaxes(Vt, 1, 2)  # columns e1, e2 span the plane, e3 is the normal
    ab = np.einsum("bkj,bji->bki", pts - c, E[:, :, :2])
    ma, sa = _batch_normalizer(ab)
    mx, sx = _batch_normalizer(xn)
    Ah = np.concatenate([(ab - ma) * sa[:, None, None], np.ones((B, k, 1))], axis=2)
    xh = (xn - mx) * sx[:, None, None]
    M = np.zeros((B, 2 * k, 9))
    M[:, 0::2, 0:3] = Ah
    M[:, 0::2, 6:9] = -xh[:, :, :1] * Ah
    M[:, 1::2, 3:6] = Ah
    M[:, 1::2, 6:9] = -xh[:, :, 1:2] * Ah
    _, s, V = np.linalg.svd(M, full_matrices=False)
    valid &= s[:, -2] >= 1e-12 * s[:, 0]
    Ta = np.zeros((B, 3, 3))
    Ta[:, [0, 1], [0, 1]] = sa[:, None]
    Ta[:, :2, 2] = -sa[:, None] * ma[:, 0]
    Ta[:, 2, 2] = 1.0
    Txi = np.zeros((B, 3, 3))
    Txi[:, [0, 1], [0, 1]] = 1.0 / sx[:, None]
    Txi[:, :2, 2] = mx[:, 0]
    Txi[:, 2, 2] = 1.0
    H = Txi @ V[:, -1].reshape(B, 3, 3) @ Ta
    lam = 2.0 / np.maximum(np.linalg.norm(H[:, :, 0], axis=1) + np.linalg.norm(H[:, :, 1], axis=1), 1e-300)
    lam = np.where(H[:, 2, 2] * lam < 0, -lam, lam)  # plane centre in front of the camera
    r1, r2 = lam[:, None] * H[:, :, 0], lam[:, None] * H[:, :, 1]
    U, _, W = np.linalg.svd(np.stack([r1, r2, np.cross(r1, r2)], axis=2))
    Rp = U @ W
    valid &= np.linalg.det(Rp) > 0
    R = Rp @ Vt
    valid &= np.linalg.det(R) > 0
    t = lam[:, None] * H[:, :, 2] - np.einsum("bij,bj->bi", R, c[:, 0])
    return R, t, valid


def _batch_gauss_newton(R, t, pts, px, intr, iters: int = 3):
    """Undamped Gauss-Newton on stacked minimal-sample hypotheses; makes the
    projective DLT estimates rigid and metric before scoring."""
    B, k, _ = pts.shape
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    ok = np.ones(B, dtype=bool)
    for _ in range(iters):
        RP = np.einsum("bij,bkj->bki", R, pts)
        pc = RP + t[:, None]
        z = pc[..., 2]
        ok &= np.all(z > 1e-9, axis=1)
        iz = 1.0 / np.where(z > 1e-9, z, 1.0)
        x, y = pc[..., 0], pc[..., 1]
        r = np.stack([fx * x * iz + cx - px[..., 0], fy * y * iz + cy - px[..., 1]], axis=2)
        dpi = np.zeros((B, k, 2, 3))
        dpi[..., 0, 0] = fx * iz
        dpi[..., 0, 2] = -fx * x * iz * iz
        dpi[..., 1, 1] = fy * iz
        dpi[..., 1, 2] = -fy * y * iz * iz
        dX = np.zeros((B, k, 3, 6))
        dX[..., 0, 1], dX[..., 0, 2] = RP[..., 2], -RP[..., 1]
        dX[..., 1, 0], dX[..., 1, 2] = -RP[..., 2], RP[..., 0]
        dX[..., 2, 0], dX[..., 2, 1] = RP[..., 1], -RP[..., 0]
        dX[..., :, 3:] = np.eye(3)
        J = (dpi @ dX).reshape(B, 2 * k, 6)
        H = np.einsum("bki,bkj->bij", J, J)
        g = np.einsum("bki,bk->bi", J, r.reshape(B, 2 * k))
        # a relative ridge keeps singular systems from aborting the batch
        H = H + 1e-12 * np.trace(H, axis1=1, axis2=2)[:, None, None] * np.eye(6)
        delta = -np.linalg.solve(H, g[..., None])[..., 0]
        good = ok & np.all(np.isfinite(delta), axis=1)
        delta[~good] = 0.0
        R = _batch_so3_exp(delta[:, :3]) @ R
        t = t + delta[:, 3:]
    return R, t, ok


def _batch_hypotheses(pts, px, intr):
    """Pose hypotheses for stacked samples: DLT, or the homography solver for
    flat samples, each tightened by Gauss-Newton. Returns ``(R, t, valid)``."""
    xn = np.stack([(px[..., 0] - intr.cx) / intr.fx, (px[..., 1] - intr.cy) / intr.fy], axis=2)
    R, t, valid = _batch_dlt(pts, xn)
    sv = np.linalg.svd(pts - pts.mean(1, keepdims=True), compute_uv=False)
    flat = sv[:, 2] < PLANARITY * np.maximum(sv[:, 0], 1e-300)
    if flat.any():
        R[flat], t[flat], valid[flat] = _batch_planar(pts[flat], xn[flat])
    R, t, ok = _batch_gauss_newton(R, t, pts, px, intr)
    return R, t, valid & ok


def _batch_inliers(R, t, pts, px, intr, thr) -> np.ndarray:
    pc = np.einsum("bij,nj->bni", R, pts) + t[:, None]
    z = pc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    du = intr.fx * pc[..., 0] / zs + intr.cx - px[:, 0]
    dv = intr.fy * pc[..., 1] / zs + intr.cy - px[:, 1]
    return front & (du * du + dv * dv < thr * thr)


HYPOTHESIS_BATCH = 16


def _iterations_needed(inlier_frac: float, k: int, confidence: float) -> float:
    if confidence >= 1.0:
        return np.inf
    p_good = inlier_frac**k
    if p_good >= 1.0:
        return 1
    if p_good <= 0.0:
        return np.inf
    return np.ceil(np.log(1.0 - confidence) / np.log(1.0 - p_good))


def ransac_pnp(corrs: CorrespondenceSet, intr: CameraIntrinsics, cfg: RansacConfig = RansacConfig()):
    """Seeded RANSAC over DLT hypotheses.

    Each hypothesis is a DLT (homography for flat samples) tightened by a few
    Gauss-Newton steps on its own sample, since the projective DLT ignores
    the known intrinsics and is fragile on minimal samples. Hypotheses are
    evaluated in batches of ``HYPOTHESIS_BATCH``; after each batch, sampling
    stops once the best inlier fraction implies, at ``cfg.confidence``, that
    an all-inlier sample has been drawn.
    Correspondences are first put into a canonical (lexicographic) order so the
    sampled hypotheses, and therefore the result, do not depend on the input
    order. Best hypothesis = most inliers, ties to the lowest hypothesis index.
    The final pose is re-fit on the inliers (LM from the best hypothesis) and
    inliers are re-classified against it, up to three times. Returns
    ``(pose, inlier mask)`` in input order.
    """
    n = len(corrs)
    if n < cfg.sample_size:
        raise RansacError(f"need >= {cfg.sample_size} correspondences, got {n}")
    order = np.lexsort(np.c_[corrs.points3d, corrs.pixels].T[::-1])
    pts, px = corrs.points3d[order], corrs.pixels[order]
    rng = np.random.default_rng(cfg.seed)
    best_count, best_inl, best_pose = -1, None, None
    needed = cfg.iterations
    k = 0
    while k < min(cfg.iterations, needed):
        nb = min(HYPOTHESIS_BATCH, cfg.iterations - k)
        samples = np.stack([rng.choice(n, size=cfg.sample_size, replace=False) for _ in range(nb)])
        k += nb
        R, t, valid = _batch_hypotheses(pts[samples], px[samples], intr)
        inl = _batch_inliers(R, t, pts, px, intr, cfg.threshold)
        counts = np.where(valid, inl.sum(1), -1)
        j = int(np.argmax(counts))  # first maximum = lowest hypothesis index
        if counts[j] > best_count:
            best_count, best_inl = int(counts[j]), inl[j]
            best_pose = SE3Pose.from_matrix(project_to_rotation(R[j]), t[j])
            needed = _iterations_needed(best_count / n, cfg.sample_size, cfg.confidence)
    if best_inl is None or best_count < cfg.sample_size:
        raise RansacError(f"no hypothesis reached {cfg.sample_size} inliers")
    inl, pose = best_inl, best_pose
    for _ in range(3):
        pose = polish_pose(pose, pts[inl], px[inl], intr)
        new = reprojection_errors(pose, intr, pts, px) < cfg.threshold
        if new.sum() < cfg.sample_size or np.array_equal(new, inl):
            break
        inl = new
    mask = np.zeros(n, dtype=bool)
    mask[order] = inl
    return pose, mask


# ---------------------------------------------------------------------------
# joint refinement


@dataclass
class RefineReport:
    losses: list[float] = field(default_factory=list)  # after each accepted step (first = initial)
    accepted: int = 0
    pruned: int = 0
    early_stop: bool = False


def trajectory_loss(
    corr_sets: list[CorrespondenceSet], traj: Trajectory, w: PoseLossWeights, intr: CameraIntrinsics
) -> float:
    """Projection residuals are measured on the normalized image plane
    (pixel error divided by focal length) so both terms are metric-scale."""
    total = 0.0
    inv_f = np.array([1.0 / intr.fx, 1.0 / intr.fy])
    for cs, pose in zip(corr_sets, traj.poses):
        if len(cs):
            pc = cs.points3d @ pose.R.T + pose.t
            if np.any(pc[:, 2] <= 1e-9):
                return np.inf
            uv = np.stack([intr.fx * pc[:, 0] / pc[:, 2] + intr.cx, intr.fy * pc[:, 1] / pc[:, 2] + intr.cy], axis=1)
            total += w.lambda_proj * float(np.sum(((uv - cs.pixels) * inv_f) ** 2))
    T = traj.translations()
    total += w.lambda_smooth * float(np.sum((T[1:] - T[:-1]) ** 2))
    return total


def refine_trajectory(
    corr_sets: list[CorrespondenceSet],
    init: Trajectory,
    w: PoseLossWeights,
    intr: CameraIntrinsics,
    iters: int = 30,
    prune: float | None = 3.0,
    prune_every: int = 5,
    max_damping: float = 1e12,
    report: RefineReport | None = None,
) -> tuple[Trajectory, list[CorrespondenceSet]]:
    """Levenberg-Marquardt over a 6-DoF increment per frame.

    Damping starts at 1e-3, x10 on a rejected step, /10 on an accepted one.
    Every ``prune_every`` iterations correspondences whose reprojection error
    exceeds ``prune`` pixels are dropped (which can only lower the loss). Stops
    early once damping exceeds ``max_damping``. Returns the refined trajectory
    and the surviving correspondence sets.
    """
    if len(corr_sets) != len(init):
        raise PoseError("one correspondence set per frame required")
    for k, cs in enumerate(corr_sets):
        # an empty set marks a frame without evidence: smoothness alone moves it
        if 0 < len(cs) < 6 and w.lambda_proj > 0:
            raise PoseError(f"frame {init.frames[k]} has {len(cs)} correspondences (< 6)")
    rep = report if report is not None else RefineReport()
    sets = list(corr_sets)
    poses = list(init.poses)
    F = len(poses)
    lp, ls = np.sqrt(w.lambda_proj), np.sqrt(w.lambda_smooth)
    inv_f = np.array([1.0 / intr.fx, 1.0 / intr.fy])

    def loss_of(ps):
        return trajectory_loss(sets, Trajectory(init.frames, ps), w, intr)

    cur = loss_of(poses)
    rep.losses.append(cur)
    mu = 1e-3
    for it in range(iters):
        if prune is not None and it > 0 and it % prune_every == 0:
            new_sets = []
            for cs, pose in zip(sets, poses):
                keep = reprojection_errors(pose, intr, cs.points3d, cs.pixels) <= prune
                if keep.sum() >= 6:
                    rep.pruned += int(len(cs) - keep.sum())
                    cs = cs.subset(keep)
                new_sets.append(cs)
            sets = new_sets
            cur = loss_of(poses)
            rep.losses.append(cur)
        H = np.zeros((6 * F, 6 * F))
        g = np.zeros(6 * F)
        for k, (cs, pose) in enumerate(zip(sets, poses)):
            if not len(cs) or w.lambda_proj == 0:
                continue
            uv, J = _proj_jacobian(pose, intr, cs.points3d)
            r = lp * ((uv - cs.pixels) * inv_f).reshape(-1)
            J = lp * (J * inv_f[None, :, None]).reshape(-1, 6)
            s = slice(6 * k, 6 * k + 6)
            H[s, s] += J.T @ J
            g[s] += J.T @ r
        if w.lambda_smooth > 0:
            for k in range(1, F):
                r = ls * (poses[k].t - poses[k - 1].t)
                a, b = slice(6 * k + 3, 6 * k + 6), slice(6 * (k - 1) + 3, 6 * (k - 1) + 6)
                H[a, a] += ls * ls * np.eye(3)
                H[b, b] += ls * ls * np.eye(3)
                H[a, b] -= ls * ls * np.eye(3)
                H[b, a] -= ls * ls * np.eye(3)
                g[a] += ls * r
                g[b] -= ls * r
        if not np.any(g):
            break
        while True:
            try:
                delta = np.linalg.solve(H + mu * np.eye(6 * F), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                trial = [_apply_increment(p, delta[6 * k: 6 * k + 6]) for k, p in enumerate(poses)]
                new = loss_of(trial)
                if np.isfinite(new) and new <= cur:
                    improved = new < cur
                    poses, cur = trial, new
                    mu = max(mu / 10.0, 1e-12)
                    rep.accepted += 1
                    rep.losses.append(cur)
                    break
            mu *= 10.0
            if mu > max_damping:
                rep.early_stop = True
                log.debug("refinement stopped early at iteration %d (damping %.1e)", it, mu)
                return Trajectory(list(init.frames), poses), sets
        if not improved:
            break
    return Trajectory(list(init.frames), poses), sets


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class PoseConfig:
    n_refs: int = 30
    rounds: int = 3
    refine_iters: int = 30
    weights: PoseLossWeights = PoseLossWeights()
    ransac: RansacConfig = RansacConfig()


@dataclass
class PoseReport:
    coarse: Trajectory | None = None
    rounds: list[RefineReport] = field(default_factory=list)
    inlier_fractions: list[list[float]] = field(default_factory=list)


def estimate_poses(
    mesh: TriMesh,
    frames: list,
    intr: CameraIntrinsics,
    provider: PoseProvider,
    matcher: Matcher,
    cfg: PoseConfig = PoseConfig(),
    report: PoseReport | None = None,
) -> Trajectory:
    """Object pose per input frame. ``frames`` need ``index`` and whatever the
    provider and matcher consume (the synthetic defaults read ``pose``,
    ``omask`` and ``depth``)."""
    if not frames:
        raise PoseError("need at least one input frame")
    rep = report if report is not None else PoseReport()
    try:
        refs = reference_views(mesh, intr, cfg.n_refs)
    except PoseError as e:
        raise PoseError(f"reference views: {e}") from e
    ref_poses = [r.pose for r in refs]
    try:
        prov_refs, prov_inputs = provider(ref_poses, frames)
        traj = coarse_align(prov_refs, prov_inputs, ref_poses, [f.index for f in frames])
    except PoseError as e:
        raise PoseError(f"coarse alignment: {e}") from e
    rep.coarse = traj
    for rnd in range(cfg.rounds):
        sets, seeds, fracs = [], [], []
        for k, (fr, pose) in enumerate(zip(frames, traj.poses)):
            depth, mask = rasterize(mesh, intr, pose)
            view = RenderedView(pose, depth, mask)
            try:
                qpx, rpx = matcher(fr, view, rnd)
            except TypeError:
                qpx, rpx = matcher(fr, view)
            cs = correspondences_from_depth(qpx, rpx, depth, pose, intr, fr.index)
            rcfg = replace(cfg.ransac, seed=cfg.ransac.seed + 7919 * rnd + k)
            try:
                seed_pose, inl = ransac_pnp(cs, intr, rcfg)
            except RansacError as e:
                # e.g. a hand hiding nearly all of the object: keep the current estimate
                log.warning("round %d frame %d: %s; keeping previous pose", rnd, fr.index, e)
                seed_pose, inl = pose, np.zeros(len(cs), dtype=bool)
            sets.append(cs.subset(inl))
            seeds.append(seed_pose)
            fracs.append(float(inl.mean()) if len(inl) else 0.0)
        if not any(len(s) for s in sets):
            raise PoseError(f"round {rnd}: ransac failed on every frame")
        rep.inlier_fractions.append(fracs)
        rr = RefineReport()
        try:
            traj, _ = refine_trajectory(
                sets, Trajectory(traj.frames, seeds), cfg.weights, intr,
                iters=cfg.refine_iters, prune=cfg.ransac.threshold, report=rr,
            )
        except PoseError as e:
            raise PoseError(f"round {rnd} refinement: {e}") from e
        rep.rounds.append(rr)
    return traj
