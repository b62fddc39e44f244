"""Procedural per-patch frame features and voxel-carving priors.

Stub feature layout for a ``g x g`` patch grid with ``sub x sub`` sub-cells per
patch (``S = sub * sub``):

image features, ``S + 3`` channels
    ``[0:S]``    occluded-object-mask occupancy of each sub-cell, row-major
    ``[S]``      mean object depth in the patch relative to the frame median
    ``[S + 1]``  std of object depth in the patch
    ``[S + 2]``  fraction of patch pixels with any finite scene depth

hand features, ``S + 3`` channels
    ``[0:S]``    hand-silhouette occupancy of each sub-cell, row-major
    ``[S]``      distance from patch centre to the nearest keypoint / width
    ``[S + 1]``  distance from patch centre to the nearest fingertip / width
    ``[S + 2]``  mean hand depth in the patch relative to the frame median
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics, SE3Pose, project_points
from ..mesh import VoxelGrid, rasterize_ids, voxel_surface
from ..synth.hand import FINGERTIPS

SUB = 4


class FeatureError(ValueError):
    pass


def n_channels(sub: int = SUB) -> int:
    return sub * sub + 3


def _cells(a: np.ndarray, n: int) -> np.ndarray:
    """(H, W) -> (n, n, H/n, W/n) blocks."""
    h, w = a.shape
    return a.reshape(n, h // n, n, w // n).swapaxes(1, 2)


def _masked_mean(v, m, axes):
    cnt = m.sum(axis=axes)
    s = np.where(m, v, 0.0).sum(axis=axes)
    return np.where(cnt > 0, s / np.maximum(cnt, 1), 0.0), cnt


def stub_encode_frame(
    omask: np.ndarray,
    hmask: np.ndarray,
    depth: np.ndarray,
    keypoints2d: np.ndarray,
    g: int,
    sub: int = SUB,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ``(image, hand)`` feature grids, each ``(g, g, S + 3)``."""
    omask = np.asarray(omask, dtype=bool)
    hmask = np.asarray(hmask, dtype=bool)
    depth = np.asarray(depth, dtype=float)
    h, w = omask.shape
    if hmask.shape != omask.shape or depth.shape != omask.shape:
        raise FeatureError("mask and depth sizes differ")
    if h % (g * sub) or w % (g * sub):
        raise FeatureError(f"image {w}x{h} not divisible into {g}x{g} patches of {sub}x{sub} cells")
    S = sub * sub
    finite = np.isfinite(depth)
    obj_d = depth[omask & finite]
    if obj_d.size:
        ref = float(np.median(obj_d))
    elif finite.any():
        ref = float(np.median(depth[finite]))
    else:
        ref = 0.0
    rel = np.where(finite, depth - ref, 0.0)

    n = g * sub
    occ = _cells(omask.astype(float), n).mean(axis=(2, 3))  # (n, n)
    hocc = _cells(hmask.astype(float), n).mean(axis=(2, 3))

    def per_patch(a):  # (n, n) -> (g, g, S)
        return a.reshape(g, sub, g, sub).swapaxes(1, 2).reshape(g, g, S)

    po = _cells(omask & finite, g)
    ph = _cells(hmask & finite, g)
    pr = _cells(rel, g)
    mean_o, cnt_o = _masked_mean(pr, po, (2, 3))
    sq_o, _ = _masked_mean(pr**2, po, (2, 3))
    std_o = np.sqrt(np.maximum(sq_o - mean_o**2, 0.0))
    cover = _cells(finite.astype(float), g).mean(axis=(2, 3))
    mean_h, _ = _masked_mean(pr, ph, (2, 3))

    img = np.concatenate([per_patch(occ), mean_o[..., None], std_o[..., None], cover[..., None]], axis=-1)

    ph_px, pw_px = h / g, w / g
    cy = (np.arange(g) + 0.5) * ph_px
    cx = (np.arange(g) + 0.5) * pw_px
    centres = np.stack(np.meshgrid(cx, cy, indexing="xy"), -1)  # (g, g, 2) as (u, v)
    kp = np.asarray(keypoints2d, dtype=float).reshape(-1, 2)
    if hmask.any() and kp.size:
        d_all = np.linalg.norm(centres[:, :, None, :] - kp[None, None], axis=-1)
        d_kp = d_all.min(-1) / w
        d_tip = d_all[..., list(FINGERTIPS)].min(-1) / w if len(kp) > max(FINGERTIPS) else d_kp
    else:
        d_kp = np.zeros((g, g))
        d_tip = np.zeros((g, g))
    hand = np.concatenate([per_patch(hocc), d_kp[..., None], d_tip[..., None], mean_h[..., None]], axis=-1)
    return img, hand


def mirror_frame(omask, hmask, depth, keypoints2d):
    """Horizontal mirror of a frame's inputs (pixel centres map u -> W - u)."""
    w = np.asarray(omask).shape[1]
    kp = np.asarray(keypoints2d, dtype=float).copy()
    kp[:, 0] = w - kp[:, 0]
    return omask[:, ::-1], hmask[:, ::-1], depth[:, ::-1], kp


def mirror_features(f: np.ndarray, sub: int = SUB) -> np.ndarray:
    """Mirror a ``(g, g, S + k)`` feature grid: patch columns and the column
    order of the sub-cell channels both flip."""
    S = sub * sub
    out = f[:, ::-1].copy()
    cells = out[..., :S].reshape(*out.shape[:2], sub, sub)
    out[..., :S] = cells[..., ::-1].reshape(*out.shape[:2], S)
    return out


def mask_cover(mask: np.ndarray, m: int) -> np.ndarray:
    """``m x m`` cells containing at least one set pixel."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] % m or mask.shape[1] % m:
        raise FeatureError(f"mask {mask.shape} not divisible to {m}x{m}")
    return _cells(mask, m).any(axis=(2, 3))


def inpaint_masks(pred: np.ndarray, visible: np.ndarray, hand_cover: np.ndarray) -> np.ndarray:
    """Keep observed object cells and accept predictions only where the hand
    can hide the object: ``visible | (pred & hand_cover)``."""
    return np.asarray(visible, bool) | (np.asarray(pred, bool) & np.asarray(hand_cover, bool))


def downsample_mask(mask: np.ndarray, m: int) -> np.ndarray:
    """Block-average to ``m x m`` and threshold at 0.5."""
    mask = np.asarray(mask, dtype=float)
    if mask.shape[0] % m or mask.shape[1] % m:
        raise FeatureError(f"mask {mask.shape} not divisible to {m}x{m}")
    return _cells(mask, m).mean(axis=(2, 3)) >= 0.5


# ---------------------------------------------------------------------------
# carving


@dataclass(frozen=True)
class GridSpec:
    resolution: int
    origin: np.ndarray
    cell_size: float

    @classmethod
    def cube(cls, resolution: int, extent: float = 1.0) -> "GridSpec":
        return cls(resolution, np.full(3, -extent / 2.0), extent / resolution)

    def empty(self) -> VoxelGrid:
        r = self.resolution
        return VoxelGrid(np.zeros((r, r, r)), self.origin, self.cell_size)


def _lookup(img: np.ndarray, intr: CameraIntrinsics, pose: SE3Pose, pts: np.ndarray, fill):
    """Sample ``img`` at the pixel containing each projected point; returns
    ``(values, point depths, inside)``."""
    uv, z, valid = project_points(intr, pose, pts)
    iu = np.floor(uv[:, 0]).astype(np.int64)
    iv = np.floor(uv[:, 1]).astype(np.int64)
    inside = valid & (iu >= 0) & (iu < img.shape[1]) & (iv >= 0) & (iv < img.shape[0])
    vals = np.full(len(pts), fill, dtype=img.dtype)
    vals[inside] = img[iv[inside], iu[inside]]
    return vals, z, inside


def carve(
    masks: list[np.ndarray],
    poses: list[SE3Pose],
    intr: CameraIntrinsics,
    spec: GridSpec,
    depths: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Boolean ``(r, r, r)``: voxel centres that project inside every mask.
    Centres projecting outside an image or behind a camera are carved. With
    ``depths``, centres in front of the observed surface are carved as well."""
    pts = spec.empty().centers().reshape(-1, 3)
    keep = np.ones(len(pts), dtype=bool)
    for k, (mask, pose) in enumerate(zip(masks, poses)):
        hit, z, _ = _lookup(np.asarray(mask, dtype=bool), intr, pose, pts, False)
        keep &= hit
        if depths is not None:
            d, _, _ = _lookup(np.asarray(depths[k], dtype=float), intr, pose, pts, np.inf)
            keep &= z >= d
    r = spec.resolution
    return keep.reshape(r, r, r)


def surface_shell(frames, intr: CameraIntrinsics, spec: GridSpec) -> np.ndarray:
    """Voxels whose centre lies within one cell of an observed object surface
    point in some view."""
    pts = spec.empty().centers().reshape(-1, 3)
    near = np.zeros(len(pts), dtype=bool)
    for f in frames:
        d, z, _ = _lookup(np.asarray(f.depth.depth, dtype=float), intr, f.pose, pts, np.inf)
        on_obj, _, _ = _lookup(f.omask.values, intr, f.pose, pts, False)
        near |= on_obj & (np.abs(z - d) <= spec.cell_size)
    r = spec.resolution
    return near.reshape(r, r, r)


def scaled_intrinsics(intr: CameraIntrinsics, size: int) -> CameraIntrinsics:
    sx, sy = size / intr.width, size / intr.height
    return CameraIntrinsics(intr.fx * sx, intr.fy * sy, intr.cx * sx, intr.cy * sy, size, size)


def silhouettes(occ: np.ndarray, spec: GridSpec, poses: list[SE3Pose], intr: CameraIntrinsics, m: int) -> np.ndarray:
    """Rendered ``(N, m, m)`` silhouettes of a binary voxel volume."""
    out = np.zeros((len(poses), m, m), dtype=bool)
    if not occ.any():
        return out
    mesh = voxel_surface(VoxelGrid(occ.astype(float), spec.origin, spec.cell_size))
    small = scaled_intrinsics(intr, m)
    for k, pose in enumerate(poses):
        _, tid = rasterize_ids(mesh, small, pose)
        out[k] = tid >= 0
    return out


def visible_carve(frames, intr: CameraIntrinsics, spec: GridSpec) -> np.ndarray:
    """Baseline: carve from the occluded object masks alone."""
    return carve([f.omask.values for f in frames], [f.pose for f in frames], intr, spec)


def hull_prior(frames, intr: CameraIntrinsics, spec: GridSpec) -> np.ndarray:
    """Carve free space from object-or-hand masks and scene depth; hand pixels
    may hide object behind them, so they are not carved beyond the hand."""
    masks = [f.omask.values | f.hmask.values for f in frames]
    depths = [f.depth.depth for f in frames]
    return carve(masks, [f.pose for f in frames], intr, spec, depths)


# ---------------------------------------------------------------------------
# model inputs


@dataclass
class Conditioning:
    """Inputs for one sample of ``N`` frames (numpy, float64)."""

    image: np.ndarray  # (N, g, g, Ci)
    hand: np.ndarray  # (N, g, g, Ch)
    prior_volume: np.ndarray  # (2, r, r, r) hull and surface shell, in {-1, 1}
    prior_masks: np.ndarray  # (N, m, m) in {-1, 1}
    visible: np.ndarray | None = None  # (N, m, m) bool, downsampled occluded mask
    hand_cover: np.ndarray | None = None  # (N, m, m) bool, cells touching the hand

    @property
    def n_frames(self) -> int:
        return self.image.shape[0]


def encode_frames(frames, g: int, sub: int = SUB):
    feats = [stub_encode_frame(f.omask.values, f.hmask.values, f.depth.depth, f.keypoints2d, g, sub) for f in frames]
    return np.stack([a for a, _ in feats]), np.stack([b for _, b in feats])


def build_conditioning(
    frames,
    intr: CameraIntrinsics,
    spec: GridSpec,
    g: int,
    m: int,
    sub: int = SUB,
    encoded: tuple[np.ndarray, np.ndarray] | None = None,
) -> Conditioning:
    if not frames:
        raise FeatureError("need at least one frame")
    img, hand = encoded if encoded is not None else encode_frames(frames, g, sub)
    hull = hull_prior(frames, intr, spec)
    shell = surface_shell(frames, intr, spec)
    sil = silhouettes(hull, spec, [f.pose for f in frames], intr, m)
    vol = np.stack([hull, shell]).astype(float)
    visible = np.stack([downsample_mask(f.omask.values, m) for f in frames])
    cover = np.stack([mask_cover(f.hmask.values, m) for f in frames])
    return Conditioning(img, hand, 2.0 * vol - 1.0, 2.0 * sil - 1.0, visible, cover)
