"""Hand-to-object alignment from visible contacts.

A single global scale ``s`` and translation ``t`` map hand-frame vertices
``V`` to ``s V + t`` in the object frame. The cost over all frames is

    lambda_contact * sum ||s V_h + t - V_o||                 (metres, unsquared)
  + lambda_kpoints * sum ||proj_f(s V_h + t) - proj_f(V_o)|| (pixels, unsquared)
  + lambda_vsmooth * sum_f sum_i ||C_f(s V_i + t) - C_{f-1}(s V_i + t)||^2

where ``C_f`` maps object-frame points into camera ``f``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose, project_points
from .mesh import DepthMap, MaskImage, TriMesh, ray_cast
from .synth.hand import HandMesh

VIS_TOL = 0.005
D_MAX = 0.02
REPORT_HEADER = ["iter", "loss_contact", "loss_kpoints", "loss_vsmooth", "total", "s", "tx", "ty", "tz"]


class AlignError(ValueError):
    pass


@dataclass(frozen=True)
class AlignWeights:
    lambda_contact: float = 200.0
    lambda_kpoints: float = 20.0
    lambda_vsmooth: float = 20.0

    def __post_init__(self):
        if min(self.lambda_contact, self.lambda_kpoints, self.lambda_vsmooth) < 0:
            raise AlignError("weights must be nonnegative")


@dataclass
class AlignParams:
    s: float = 1.0
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if not self.s > 0:
            raise AlignError("scale must be positive")


@dataclass
class ContactPairs:
    vertex: np.ndarray  # (K,) hand vertex indices
    hand_pts: np.ndarray  # (K, 3)
    obj_pts: np.ndarray  # (K, 3)
    frame: int = 0

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.int64).reshape(-1)
        self.hand_pts = np.asarray(self.hand_pts, dtype=float).reshape(-1, 3)
        self.obj_pts = np.asarray(self.obj_pts, dtype=float).reshape(-1, 3)
        if not len(self.vertex) == len(self.hand_pts) == len(self.obj_pts):
            raise AlignError("contact pair arrays differ in length")

    def __len__(self):
        return len(self.vertex)


def visible_vertices(
    hand: HandMesh,
    intr: CameraIntrinsics,
    pose: SE3Pose,
    depth: DepthMap,
    mask: MaskImage,
    tau: float = VIS_TOL,
) -> np.ndarray:
    """Indices of vertices projecting into the hand mask whose camera depth is
    within ``tau`` of the scene depth at that pixel."""
    uv, z, valid = project_points(intr, pose, hand.vertices)
    iu = np.floor(uv[:, 0]).astype(np.int64)
    iv = np.floor(uv[:, 1]).astype(np.int64)
    ok = valid & (iu >= 0) & (iu < mask.width) & (iv >= 0) & (iv < mask.height)
    vis = np.zeros(len(z), dtype=bool)
    d = depth.depth[iv[ok], iu[ok]].astype(float)
    vis[ok] = mask.values[iv[ok], iu[ok]] & (np.abs(z[ok] - d) <= tau)
    return np.nonzero(vis)[0]


def trace_contacts(
    visible: np.ndarray, hand: HandMesh, obj: TriMesh, d_max: float = D_MAX, frame: int = 0
) -> ContactPairs:
    """Cast from each visible vertex along its negative normal; keep the
    nearest object hit no farther than ``d_max``."""
    visible = np.asarray(visible, dtype=np.int64)
    if obj.is_empty:
        raise AlignError("object mesh is empty")
    if not len(visible):
        return ContactPairs(visible, np.zeros((0, 3)), np.zeros((0, 3)), frame)
    o = hand.vertices[visible]
    d = -hand.normals[visible]
    t, tri = ray_cast(obj, o, d)
    keep = (tri >= 0) & (t <= d_max)
    return ContactPairs(visible[keep], o[keep], o[keep] + t[keep, None] * d[keep], frame)


# ---------------------------------------------------------------------------
# objective


@dataclass
class AlignProblem:
    pairs: list[ContactPairs]
    vertices: np.ndarray  # all hand vertices, hand frame
    intr: CameraIntrinsics
    poses: list[SE3Pose]  # camera poses, one per frame in ``pairs`` order
    w: AlignWeights = AlignWeights()

    def __post_init__(self):
        if sum(len(p) for p in self.pairs) == 0:
            raise AlignError("no contact pairs")
        if len(self.pairs) != len(self.poses):
            raise AlignError("one camera pose per contact set required")
        used = [(cp, pose) for cp, pose in zip(self.pairs, self.poses) if len(cp)]
        self._vh = np.concatenate([cp.hand_pts for cp, _ in used])
        self._vo = np.concatenate([cp.obj_pts for cp, _ in used])
        self._R = np.concatenate([np.repeat(pose.R[None], len(cp), 0) for cp, pose in used])
        self._T = np.concatenate([np.repeat(pose.t[None], len(cp), 0) for cp, pose in used])
        self._po = self._project(np.einsum("kij,kj->ki", self._R, self._vo) + self._T)
        # the smoothness term is a quadratic form in theta = (s, tx, ty, tz)
        Q = np.zeros((4, 4))
        q = np.zeros(4)
        c = 0.0
        V = np.asarray(self.vertices, dtype=float)
        for a, b in zip(self.poses[:-1], self.poses[1:]):
            dR = b.R - a.R
            dT = b.t - a.t
            A = V @ dR.T  # (n, 3), coefficient of s
            Q[0, 0] += np.sum(A * A)
            Q[0, 1:] += A.sum(0) @ dR
            Q[1:, 1:] += len(V) * dR.T @ dR
            q[0] += np.sum(A @ dT)
            q[1:] += len(V) * dR.T @ dT
            c += len(V) * float(dT @ dT)
        Q[1:, 0] = Q[0, 1:]
        self._Q, self._q, self._c = Q, q, c

    def _project(self, pc):
        f = np.array([self.intr.fx, self.intr.fy])
        return f * pc[:, :2] / pc[:, 2:3]

    def terms(self, s: float, t: np.ndarray):
        """Returns ``(contact, kpoints, vsmooth)`` and their gradients w.r.t.
        ``(s, tx, ty, tz)`` as a (3, 4) array."""
        t = np.asarray(t, dtype=float)
        grad = np.zeros((3, 4))
        vh, vo, R = self._vh, self._vo, self._R
        x = s * vh + t
        diff = x - vo
        n = np.linalg.norm(diff, axis=1)
        u = np.divide(diff, n[:, None], out=np.zeros_like(diff), where=n[:, None] > 0)
        lc = float(n.sum())
        grad[0, 0] = np.sum(u * vh)
        grad[0, 1:] = u.sum(0)

        pc = np.einsum("kij,kj->ki", R, x) + self._T
        e = self._project(pc) - self._po
        en = np.linalg.norm(e, axis=1)
        lk = float(en.sum())
        ue = np.divide(e, en[:, None], out=np.zeros_like(e), where=en[:, None] > 0)
        iz = 1.0 / pc[:, 2]
        fx, fy = self.intr.fx, self.intr.fy
        g_pc = np.stack(
            [ue[:, 0] * fx * iz, ue[:, 1] * fy * iz, -(ue[:, 0] * fx * pc[:, 0] + ue[:, 1] * fy * pc[:, 1]) * iz * iz],
            axis=1,
        )
        g_x = np.einsum("ki,kij->kj", g_pc, R)
        grad[1, 0] = np.sum(g_x * vh)
        grad[1, 1:] = g_x.sum(0)

        th = np.array([s, *t])
        lv = float(th @ self._Q @ th + 2 * self._q @ th + self._c)
        grad[2] = 2 * (self._Q @ th + self._q)
        return np.array([lc, lk, max(lv, 0.0)]), grad

    def weights(self) -> np.ndarray:
        return np.array([self.w.lambda_contact, self.w.lambda_kpoints, self.w.lambda_vsmooth])

    def loss(self, s: float, t) -> float:
        vals, _ = self.terms(s, np.asarray(t, dtype=float))
        return float(self.weights() @ vals)


@dataclass
class AlignResult:
    params: AlignParams
    history: list[list[float]]  # rows matching REPORT_HEADER
    converged: bool


def align_hand(
    problem: AlignProblem,
    init: AlignParams | None = None,
    iters: int = 3000,
    step0: float = 1e-4,
    tol: float = 1e-12,
) -> AlignResult:
    """Gradient descent with Armijo backtracking on ``(s, t)``.

    Only strict decreases are accepted, so the recorded loss never increases.
    The step length doubles after each accepted step and halves on rejection.
    """
    p = init or AlignParams()
    x = np.array([p.s, *p.t], dtype=float)
    wts = problem.weights()

    def evaluate(v):
        vals, g = problem.terms(v[0], v[1:])
        return vals, float(wts @ vals), wts @ g

    vals, f, g = evaluate(x)
    hist = [[0, *vals, f, *x]]
    step = step0
    converged = False
    for it in range(1, iters + 1):
        gn = float(g @ g)
        if gn < 1e-16:
            converged = True
            break
        accepted = False
        while step > 1e-16:
            trial = x - step * g
            if trial[0] <= 0:
                step *= 0.5
                continue
            tv, tf, tg = evaluate(trial)
            if tf <= f - 1e-4 * step * gn and tf < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        improvement = f - tf
        x, vals, f, g = trial, tv, tf, tg
        hist.append([it, *vals, f, *x])
        step *= 2.0
        if improvement <= tol * max(1.0, abs(f)):
            converged = True
            break
    return AlignResult(AlignParams(float(x[0]), x[1:].copy()), hist, converged)


def write_align_report(path, result: AlignResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for row in result.history:
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])


def read_align_report(path) -> list[list[float]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        if next(r) != REPORT_HEADER:
            raise AlignError(f"{path}: unexpected alignment report header")
        return [[float(v) for v in row] for row in r]
