"""Capsule-finger hand occluder with 21 keypoints.

Keypoint layout follows the usual hand convention: 0 = wrist, then four
joints per finger (base, middle, distal, tip) for thumb, index, middle, ring
and pinky, so fingertips are keypoints 4, 8, 12, 16 and 20.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import GeometryError
from ..mesh import TriMesh, closest_points
from ..metrics import sample_surface_faces

N_KEYPOINTS = 21
FINGERTIPS = (4, 8, 12, 16, 20)
CONTACT_TOL = 0.005


class PlacementError(RuntimeError):
    pass


@dataclass
class HandMesh:
    mesh: TriMesh
    keypoints: np.ndarray

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
        if len(self.keypoints) != N_KEYPOINTS:
            raise GeometryError(f"hand needs {N_KEYPOINTS} keypoints")
        if self.mesh.normals is None:
            raise GeometryError("hand mesh needs per-vertex normals")
        nn = np.linalg.norm(self.mesh.normals, axis=1)
        if np.any(np.abs(nn - 1.0) > 1e-6):
            raise GeometryError("hand normals must be unit length")

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def normals(self) -> np.ndarray:
        return self.mesh.normals

    def scaled_translated(self, s: float, t) -> "HandMesh":
        m = TriMesh(s * self.mesh.vertices + t, self.mesh.triangles.copy(), self.mesh.normals.copy())
        return HandMesh(m, s * self.keypoints + t)


def _basis(axis: np.ndarray):
    z = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    return x, np.cross(z, x), z


def capsule(a, b, radius: float, n_around: int = 8, n_cap: int = 3) -> TriMesh:
    """Closed capsule mesh between ``a`` and ``b`` with analytic normals."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    x, y, z = _basis(b - a)
    theta = 2 * np.pi * np.arange(n_around) / n_around
    radial = np.cos(theta)[:, None] * x + np.sin(theta)[:, None] * y
    rings = []  # (center, elevation)
    for k in range(1, n_cap + 1):
        rings.append((a, -np.pi / 2 + k * (np.pi / 2) / n_cap))
    for k in range(n_cap):
        rings.append((b, k * (np.pi / 2) / n_cap))
    verts = [a - radius * z]
    norms = [-z]
    for center, phi in rings:
        n = np.cos(phi) * radial + np.sin(phi) * z
        verts.extend(center + radius * n)
        norms.extend(n)
    verts.append(b + radius * z)
    norms.append(z)
    tris = []
    nr = len(rings)
    ring0 = 1
    for i in range(n_around):
        j = (i + 1) % n_around
        tris.append((0, ring0 + j, ring0 + i))
    for r in range(nr - 1):
        s0, s1 = 1 + r * n_around, 1 + (r + 1) * n_around
        for i in range(n_around):
            j = (i + 1) % n_around
            tris.append((s0 + i, s0 + j, s1 + j))
            tris.append((s0 + i, s1 + j, s1 + i))
    top = len(verts) - 1
    last = 1 + (nr - 1) * n_around
    for i in range(n_around):
        j = (i + 1) % n_around
        tris.append((last + i, last + j, top))
    return TriMesh(np.array(verts), np.array(tris), np.array(norms))


def box(center, axes: np.ndarray, half: np.ndarray) -> TriMesh:
    """Oriented box; vertex normals average the three adjacent face normals."""
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    verts = center + (signs * half) @ axes
    norms = signs @ axes
    norms /= np.linalg.norm(norms, axis=1, keepdims=True)
    # index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    tris = []
    for q in quads:
        tris += [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
    return TriMesh(verts, np.array(tris), norms)


def _bezier(p0, c, p1, s):
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * c + s**2 * p1


def build_hand(
    palm_center: np.ndarray,
    normal: np.ndarray,
    u: np.ndarray,
    tip_targets: np.ndarray,
    scale: float = 1.0,
) -> HandMesh:
    """Assemble palm box and finger chains ending exactly at ``tip_targets``
    (5 x 3, thumb first). ``normal`` points from the object towards the palm
    and ``u`` along the fingers."""
    n = normal / np.linalg.norm(normal)
    u = u - n * (u @ n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    half = np.array([0.05, 0.045, 0.014]) * scale  # along u, v, n
    axes = np.stack([u, v, n])
    r_f = 0.012 * scale
    bases = [palm_center - 0.3 * half[0] * u + 1.0 * half[1] * v]
    for off in (0.75, 0.25, -0.25, -0.75):
        bases.append(palm_center + half[0] * u + off * half[1] * v)
    keypoints = [palm_center - half[0] * u]
    parts = [box(palm_center, axes, half)]
    for base, tip in zip(bases, tip_targets):
        span = np.linalg.norm(tip - base)
        ctrl = 0.5 * (base + tip) + n * 0.35 * span
        joints = [base, _bezier(base, ctrl, tip, 0.4), _bezier(base, ctrl, tip, 0.72), tip]
        keypoints.extend(joints)
        for p, q in zip(joints[:-1], joints[1:]):
            parts.append(capsule(p, q, r_f))
    return HandMesh(TriMesh.concatenate(parts), np.array(keypoints))


def fingertip_distances(hand: HandMesh, obj: TriMesh) -> np.ndarray:
    d, _ = closest_points(obj, hand.keypoints[list(FINGERTIPS)])
    return d


def gen_hand_occluder(
    seed: int,
    grasp_offset: float,
    obj: TriMesh,
    scale: float = 1.0,
    max_retries: int = 100,
) -> HandMesh:
    """Place a hand so its fingertips rest ``grasp_offset`` above the object
    surface. Retries with fresh draws from the seeded stream; raises
    :class:`PlacementError` when fewer than two fingertips end up within 5 mm.
    """
    rng = np.random.default_rng(seed)
    normals_all = obj.face_normals()
    for _ in range(max_retries):
        sub = int(rng.integers(2**31))
        pts, tri_of = sample_surface_faces(obj, 1500, seed=sub)
        nrm = normals_all[tri_of]
        k = int(rng.integers(len(pts)))
        contact, n = pts[k], nrm[k]
        tangent = rng.normal(size=3)
        tangent -= n * (tangent @ n)
        if np.linalg.norm(tangent) < 1e-6:
            continue
        tangent /= np.linalg.norm(tangent)
        side = np.cross(n, tangent)
        palm = contact + n * 0.07 * scale
        reach = 0.06 * scale
        targets_plane = [contact - 0.02 * scale * tangent + 0.06 * scale * side]
        for off in (0.03, 0.01, -0.01, -0.03):
            targets_plane.append(contact + reach * tangent + off * scale * side)
        tips = []
        for q in targets_plane:
            j = int(np.argmin(((pts - q) ** 2).sum(1)))
            tips.append(pts[j] + nrm[j] * grasp_offset)
        hand = build_hand(palm, n, tangent, np.array(tips), scale)
        if np.sum(fingertip_distances(hand, obj) <= CONTACT_TOL) >= 2:
            return hand
    raise PlacementError(f"hand placement failed after {max_retries} retries")
