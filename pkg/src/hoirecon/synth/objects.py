"""Procedural objects: unions of primitives voxelized on a cubic grid."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ..io import quantize_occupancy
from ..mesh import TriMesh, VoxelGrid, voxel_surface

PRIMITIVES = ("box", "sphere", "cylinder", "superellipsoid")
SUPERSAMPLE = 4


def _inside(kind: str, p: np.ndarray, size: np.ndarray, eps: tuple[float, float]) -> np.ndarray:
    a, b, c = size
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if kind == "box":
        return np.maximum(np.maximum(np.abs(x) / a, np.abs(y) / b), np.abs(z) / c) <= 1.0
    if kind == "sphere":
        return x * x + y * y + z * z <= a * a
    if kind == "cylinder":
        return (x * x + y * y <= a * a) & (np.abs(z) <= c)
    if kind == "superellipsoid":
        e1, e2 = eps
        xy = (np.abs(x / a) ** (2 / e2) + np.abs(y / b) ** (2 / e2)) ** (e2 / e1)
        return xy + np.abs(z / c) ** (2 / e1) <= 1.0
    raise ValueError(f"unknown primitive {kind!r}")


def _random_primitive(rng: np.random.Generator, kinds, center_scale: float, anchor=None):
    kind = kinds[rng.integers(len(kinds))]
    size = rng.uniform(0.12, 0.28, size=3)
    if kind == "sphere":
        size[:] = size[0]
    elif kind == "cylinder":
        size[1] = size[0]
    eps = tuple(rng.uniform(0.4, 1.6, size=2))
    if anchor is None:
        center = rng.uniform(-0.05, 0.05, size=3)
    else:
        center = anchor + rng.uniform(-center_scale, center_scale, size=3)
    center = np.clip(center, -0.15, 0.15)
    rot = Rotation.from_rotvec(rng.normal(size=3) * (0.0 if kind == "sphere" else 1.0))
    return kind, center, size, eps, rot.as_matrix()


def gen_object(
    seed: int,
    complexity: int,
    resolution: int = 16,
    extent: float = 1.0,
    kinds: tuple[str, ...] = PRIMITIVES,
) -> tuple[VoxelGrid, TriMesh]:
    """Seeded union of ``complexity`` primitives inside a cube of side ``extent``
    centred at the origin.

    Occupancy is the supersampled inside fraction per cell, snapped to the
    byte grid of the voxel file format. Only the largest 6-connected
    component of the occupied (>= 0.5) set is kept.
    """
    if not 1 <= complexity <= 5:
        raise ValueError("complexity must lie in [1, 5]")
    if not 0 < extent <= 1.0:
        raise ValueError("extent must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    # fine sample positions in normalized [-0.5, 0.5] coordinates
    n = resolution * SUPERSAMPLE
    g = (np.arange(n) + 0.5) / n - 0.5
    P = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1)
    inside = np.zeros(P.shape[:3], dtype=bool)
    anchor = None
    for _ in range(complexity):
        kind, center, size, eps, R = _random_primitive(rng, kinds, 0.12, anchor)
        local = (P - center) @ R
        inside |= _inside(kind, local, size, eps)
        pts = np.argwhere(inside)
        anchor = (pts[rng.integers(len(pts))] + 0.5) / n - 0.5
    frac = inside.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE, resolution, SUPERSAMPLE)
    occ = quantize_occupancy(frac.mean(axis=(1, 3, 5)))
    # keep a one-cell empty border so the extracted surface is closed
    occ[[0, -1], :, :] = 0.0
    occ[:, [0, -1], :] = 0.0
    occ[:, :, [0, -1]] = 0.0
    occupied = occ >= 0.5
    labels, count = ndimage.label(occupied)
    if count > 1:
        sizes = ndimage.sum(occupied, labels, index=np.arange(1, count + 1))
        keep = labels == (1 + int(np.argmax(sizes)))
        occ = np.where(occupied & ~keep, 0.0, occ)
    cell = extent / resolution
    grid = VoxelGrid(occ, np.full(3, -extent / 2.0), cell)
    return grid, voxel_surface(grid)


def count_components(grid: VoxelGrid, threshold: float = 0.5) -> int:
    """Number of 6-connected components of the occupied set (flood fill)."""
    occ = grid.binary(threshold)
    seen = np.zeros_like(occ)
    comps = 0
    for start in map(tuple, np.argwhere(occ)):
        if seen[start]:
            continue
        comps += 1
        stack = [start]
        seen[start] = True
        while stack:
            c = stack.pop()
            for axis in range(3):
                for d in (-1, 1):
                    nb = list(c)
                    nb[axis] += d
                    nb = tuple(nb)
                    if all(0 <= nb[k] < occ.shape[k] for k in range(3)) and occ[nb] and not seen[nb]:
                        seen[nb] = True
                        stack.append(nb)
    return comps
