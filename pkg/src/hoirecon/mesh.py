"""Triangle meshes, voxel grids, depth/mask images and the software renderer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import CameraIntrinsics, GeometryError, SE3Pose

DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    """Indexed triangle mesh. Degenerate triangles are dropped on construction
    and counted in ``n_dropped``."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    n_dropped: int = field(default=0, init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise GeometryError("one normal per vertex required")
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise GeometryError("triangle index out of range")
            keep = self.areas() > DEGENERATE_AREA
            self.n_dropped = int((~keep).sum())
            self.triangles = self.triangles[keep]

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def bounds(self):
        return self.vertices.min(0), self.vertices.max(0)

    def transformed(self, pose: SE3Pose) -> "TriMesh":
        normals = None if self.normals is None else self.normals @ pose.R.T
        return TriMesh(pose.apply(self.vertices), self.triangles.copy(), normals)

    @staticmethod
    def concatenate(meshes: list["TriMesh"]) -> "TriMesh":
        verts, tris, norms = [], [], []
        offset = 0
        with_normals = all(m.normals is not None for m in meshes)
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            if with_normals:
                norms.append(m.normals)
            offset += len(m.vertices)
        return TriMesh(
            np.concatenate(verts),
            np.concatenate(tris),
            np.concatenate(norms) if with_normals else None,
        )

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        counts = self.edge_use_counts()
        return bool(counts) and all(c == 2 for c in counts.values())


@dataclass
class VoxelGrid:
    """Occupancy in [0, 1] on a regular grid; ``occupancy[i, j, k]`` covers the
    cell with min corner ``origin + cell_size * (i, j, k)``."""

    occupancy: np.ndarray
    origin: np.ndarray
    cell_size: float

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 2:
            raise GeometryError("voxel grid needs resolution >= 2 on every axis")
        if np.any(self.occupancy < 0) or np.any(self.occupancy > 1):
            raise GeometryError("occupancy must lie in [0, 1]")
        if not self.cell_size > 0:
            raise GeometryError("cell size must be positive")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.occupancy.shape)

    def centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.resolution], indexing="ij"), -1)
        return self.origin + (idx + 0.5) * self.cell_size

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.occupancy >= threshold


@dataclass
class DepthMap:
    depth: np.ndarray  # (height, width), +inf where empty

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        finite = np.isfinite(self.depth)
        if np.any(self.depth[finite] <= 0):
            raise GeometryError("finite depths must be positive")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthMap":
        return cls(np.full((height, width), np.inf))


@dataclass
class MaskImage:
    values: np.ndarray  # (height, width) bool

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype != bool:
            if not np.all((v == 0) | (v == 1)):
                raise GeometryError("mask values must be 0 or 1")
            v = v.astype(bool)
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def count(self) -> int:
        return int(self.values.sum())


# ---------------------------------------------------------------------------
# rasterization


@numba.njit(cache=True)
def _raster_kernel(pc, tris, fx, fy, cx, cy, width, height, min_depth, zbuf, tid):
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        z0, z1, z2 = pc[i0, 2], pc[i1, 2], pc[i2, 2]
        if z0 <= min_depth or z1 <= min_depth or z2 <= min_depth:
            continue
        u0 = fx * pc[i0, 0] / z0 + cx
        v0 = fy * pc[i0, 1] / z0 + cy
        u1 = fx * pc[i1, 0] / z1 + cx
        v1 = fy * pc[i1, 1] / z1 + cy
        u2 = fx * pc[i2, 0] / z2 + cx
        v2 = fy * pc[i2, 1] / z2 + cy
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        # plane n . X = d in camera coordinates
        ax, ay, az = pc[i1, 0] - pc[i0, 0], pc[i1, 1] - pc[i0, 1], pc[i1, 2] - pc[i0, 2]
        bx, by, bz = pc[i2, 0] - pc[i0, 0], pc[i2, 1] - pc[i0, 1], pc[i2, 2] - pc[i0, 2]
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
        d = nx * pc[i0, 0] + ny * pc[i0, 1] + nz * pc[i0, 2]
        xmin = max(int(np.floor(min(u0, u1, u2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(u0, u1, u2) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(v0, v1, v2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(v0, v1, v2) - 0.5)), height - 1)
        for py in range(ymin, ymax + 1):
            pv = py + 0.5
            for px in range(xmin, xmax + 1):
                pu = px + 0.5
                w0 = (u1 - pu) * (v2 - pv) - (u2 - pu) * (v1 - pv)
                w1 = (u2 - pu) * (v0 - pv) - (u0 - pu) * (v2 - pv)
                w2 = (u0 - pu) * (v1 - pv) - (u1 - pu) * (v0 - pv)
                if area > 0:
                    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
                else:
                    inside = w0 <= 0 and w1 <= 0 and w2 <= 0
                if not inside:
                    continue
                rx = (pu - cx) / fx
                ry = (pv - cy) / fy
                den = nx * rx + ny * ry + nz
                if den == 0.0:
                    continue
                z = d / den
                if z > min_depth and z < zbuf[py, px]:
                    zbuf[py, px] = z
                    tid[py, px] = f


def rasterize_ids(mesh: TriMesh, intr: CameraIntrinsics, pose: SE3Pose):
    """Z-buffered depth and per-pixel triangle index (-1 where empty)."""
    zbuf = np.full((intr.height, intr.width), np.inf)
    tid = np.full((intr.height, intr.width), -1, dtype=np.int64)
    if not mesh.is_empty:
        pc = np.ascontiguousarray(mesh.vertices @ pose.R.T + pose.t)
        _raster_kernel(
            pc, np.ascontiguousarray(mesh.triangles), float(intr.fx), float(intr.fy),
            float(intr.cx), float(intr.cy), intr.width, intr.height, 1e-6, zbuf, tid,
        )
    return zbuf, tid


def rasterize(mesh: TriMesh, intr: CameraIntrinsics, pose: SE3Pose) -> tuple[DepthMap, MaskImage]:
    """Sample the nearest surface at every pixel center; no culling.

    Triangles with any vertex behind the near plane are skipped. Equal depths
    keep the lower triangle index.
    """
    zbuf, tid = rasterize_ids(mesh, intr, pose)
    return DepthMap(zbuf), MaskImage(tid >= 0)


# ---------------------------------------------------------------------------
# ray casting


@numba.njit(cache=True)
def _ray_kernel(origins, dirs, v0, e1, e2, t_min, t_out, idx_out):
    n_rays = origins.shape[0]
    n_tri = v0.shape[0]
    for r in range(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = np.inf
        best_i = -1
        for f in range(n_tri):
            ax, ay, az = e1[f, 0], e1[f, 1], e1[f, 2]
            bx, by, bz = e2[f, 0], e2[f, 1], e2[f, 2]
            px = dy * bz - dz * by
            py = dz * bx - dx * bz
            pz = dx * by - dy * bx
            det = ax * px + ay * py + az * pz
            if abs(det) < 1e-15:
                continue
            inv = 1.0 / det
            sx, sy, sz = ox - v0[f, 0], oy - v0[f, 1], oz - v0[f, 2]
            u = (sx * px + sy * py + sz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = sy * az - sz * ay
            qy = sz * ax - sx * az
            qz = sx * ay - sy * ax
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (bx * qx + by * qy + bz * qz) * inv
            if t > t_min and t < best:
                best = t
                best_i = f
        t_out[r] = best
        idx_out[r] = best_i


def ray_cast(mesh: TriMesh, origins: np.ndarray, dirs: np.ndarray):
    """Batch Möller–Trumbore. Returns ``(t, triangle index)`` with ``inf``/-1 on miss."""
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=float)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=float)
    if len(origins) == 1 and len(dirs) > 1:
        origins = np.ascontiguousarray(np.repeat(origins, len(dirs), axis=0))
    t = np.full(len(dirs), np.inf)
    idx = np.full(len(dirs), -1, dtype=np.int64)
    if not mesh.is_empty:
        a, b, c = mesh.corners()
        _ray_kernel(origins, dirs, np.ascontiguousarray(a), np.ascontiguousarray(b - a),
                    np.ascontiguousarray(c - a), 1e-9, t, idx)
    return t, idx


def ray_intersect(mesh: TriMesh, origin, direction):
    """Nearest hit with ``t > 1e-9`` as ``(t, point, triangle)``, or ``None``."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise GeometryError("ray direction must be unit length")
    t, idx = ray_cast(mesh, np.asarray(origin, dtype=float)[None], direction[None])
    if idx[0] < 0:
        return None
    return float(t[0]), np.asarray(origin, dtype=float) + t[0] * direction, int(idx[0])


# ---------------------------------------------------------------------------
# surface extraction

# for each axis: the 4 corner offsets of the +side face, counter-clockwise seen
# from outside (+axis direction)
_FACE_CORNERS = {
    0: [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
    1: [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
    2: [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
}


def voxel_surface(grid: VoxelGrid, threshold: float = 0.5) -> TriMesh:
    """Boundary faces between occupied (>= threshold) and empty cells, two
    outward-wound triangles per face, vertices shared through grid corners."""
    if not 0 < threshold < 1:
        raise GeometryError("threshold must lie in (0, 1)")
    occ = grid.binary(threshold)
    padded = np.pad(occ, 1)
    nx, ny, nz = occ.shape
    quads = []
    for axis in range(3):
        for sign in (1, -1):
            shift = [0, 0, 0]
            shift[axis] = sign
            nb = padded[
                1 + shift[0]: 1 + shift[0] + nx,
                1 + shift[1]: 1 + shift[1] + ny,
                1 + shift[2]: 1 + shift[2] + nz,
            ]
            cells = np.argwhere(occ & ~nb)
            if not len(cells):
                continue
            offs = np.array(_FACE_CORNERS[axis])
            if sign < 0:
                offs = offs[::-1].copy()
                offs[:, axis] = 0
            quads.append(cells[:, None, :] + offs[None, :, :])
    if not quads:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    quads = np.concatenate(quads)
    corners_, inverse = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    ids = inverse.reshape(-1, 4)
    tris = np.concatenate([ids[:, [0, 1, 2]], ids[:, [0, 2, 3]]], axis=1).reshape(-1, 3)
    return TriMesh(grid.origin + corners_ * grid.cell_size, tris)


# ---------------------------------------------------------------------------
# point-to-surface distance


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0 and d2 <= 0:
        return a[0], a[1], a[2]
    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0 and d4 <= d3:
        return b[0], b[1], b[2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return a[0] + v * abx, a[1] + v * aby, a[2] + v * abz
    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0 and d5 <= d6:
        return c[0], c[1], c[2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a[0] + abx * v + acx * w, a[1] + aby * v + acy * w, a[2] + abz * v + acz * w


@numba.njit(cache=True)
def _closest_kernel(points, A, B, C, dist, closest):
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        for f in range(A.shape[0]):
            qx, qy, qz = _closest_on_triangle(px, py, pz, A[f], B[f], C[f])
            d = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
            if d < best:
                best = d
                closest[i, 0], closest[i, 1], closest[i, 2] = qx, qy, qz
        dist[i] = np.sqrt(best)


def closest_points(mesh: TriMesh, points: np.ndarray):
    """Distance from each point to the mesh surface and the closest surface point."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    dist = np.full(len(points), np.inf)
    closest = np.zeros_like(points)
    if not mesh.is_empty:
        a, b, c = (np.ascontiguousarray(x) for x in mesh.corners())
        _closest_kernel(points, a, b, c, dist, closest)
    return dist, closest
