"""Scene specification, camera orbits and per-frame rendering."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import CameraIntrinsics, SE3Pose, Trajectory, look_at, project_points
from ..mesh import DepthMap, MaskImage, TriMesh, VoxelGrid, rasterize_ids
from .hand import HandMesh, PlacementError, gen_hand_occluder
from .objects import gen_object

FRUSTUM_MARGIN = 0.05
MAX_STEP_FRACTION = 0.10
MAX_FRAME_OCCLUSION = 0.9  # frames showing under 10% of the object carry no pose signal


class SceneRejected(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    complexity: int = 3
    grasp_offset: float = 0.002
    n_frames: int = 12
    elevation_deg: float = 20.0
    azimuth_offset_deg: float = 0.0
    step_deg: float = 4.0
    radius_scale: float = 1.1
    image_size: int = 64
    focal: float = 64.0
    voxel_res: int = 16
    object_extent: float = 1.0
    hand_scale: float = 3.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if not 1 <= self.complexity <= 5:
            raise ValueError("complexity must lie in [1, 5]")
        if self.image_size < 1 or self.voxel_res < 2:
            raise ValueError("sizes must be positive")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.simple(self.focal, self.image_size)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            if k not in types:
                raise ValueError(f"unknown scene key {k!r}")
            kw[k] = int(v) if types[k] in ("int", int) else float(v)
        return cls(**kw)


def random_scene_spec(seed: int, **overrides) -> SceneSpec:
    """Draw a default-distribution scene specification from ``seed``."""
    rng = np.random.default_rng([seed, 0x5CE7E])
    kw = dict(
        seed=seed,
        complexity=int(rng.integers(1, 6)),
        grasp_offset=float(rng.uniform(0.0, 0.004)),
        n_frames=int(rng.integers(5, 31)),
        elevation_deg=float(rng.uniform(-10.0, 45.0)),
        azimuth_offset_deg=float(rng.uniform(-35.0, 35.0)),
        step_deg=float(rng.uniform(2.0, 5.0)),
        radius_scale=float(rng.uniform(1.0, 1.15)),
    )
    kw.update(overrides)
    return SceneSpec(**kw)


@dataclass
class FrameRecord:
    index: int
    pose: SE3Pose
    omask: MaskImage  # object pixels not hidden by the hand
    cmask: MaskImage  # complete object silhouette
    hmask: MaskImage  # visible hand pixels
    depth: DepthMap  # scene depth, float32
    keypoints2d: np.ndarray  # (21, 2)


@dataclass
class SequenceRecord:
    spec: SceneSpec
    frames: list[FrameRecord]
    object_grid: VoxelGrid
    object_mesh: TriMesh
    hand: HandMesh
    trajectory: Trajectory

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics


def corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def in_frustum(intr: CameraIntrinsics, pose: SE3Pose, pts: np.ndarray, margin: float = FRUSTUM_MARGIN) -> bool:
    uv, _, valid = project_points(intr, pose, pts)
    mx, my = margin * intr.width, margin * intr.height
    return bool(
        np.all(valid)
        and np.all(uv[:, 0] >= mx)
        and np.all(uv[:, 0] <= intr.width - mx)
        and np.all(uv[:, 1] >= my)
        and np.all(uv[:, 1] <= intr.height - my)
    )


JITTER_CORR_FRAMES = 3.0
WOBBLE_PERIOD = 24.0  # frames per elevation oscillation


def smooth_noise(rng: np.random.Generator, shape, sigma: float, corr: float = JITTER_CORR_FRAMES) -> np.ndarray:
    """Zero-mean noise along axis 0 with marginal std ``sigma`` and a
    Gaussian temporal correlation of ``corr`` frames."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    half = int(np.ceil(3 * corr))
    x = np.arange(-half, half + 1)
    ker = np.exp(-0.5 * (x / corr) ** 2)
    ker /= np.linalg.norm(ker)
    white = rng.normal(size=(shape[0] + 2 * half, *shape[1:]))
    out = np.apply_along_axis(lambda v: np.convolve(v, ker, mode="valid"), 0, white)
    return sigma * out


def gen_camera_trajectory(
    spec: SceneSpec,
    bounds: tuple[np.ndarray, np.ndarray],
    preferred_dir: np.ndarray | None = None,
    max_retries: int = 30,
) -> Trajectory:
    """Smooth orbit with small, temporally correlated jitter around the
    content bounding box.

    Every frame keeps all 8 bounding-box corners inside the image with a 5%
    margin; consecutive camera centres move less than 10% of the orbit radius
    (mean distance from the box centre).
    """
    rng = np.random.default_rng([spec.seed, 0xCA3])
    intr = spec.intrinsics
    lo, hi = bounds
    box = corners(lo, hi)
    center = 0.5 * (lo + hi)
    rho = np.max(np.linalg.norm(box - center, axis=1))
    half_fov = np.arctan((0.5 - FRUSTUM_MARGIN) * min(intr.width, intr.height) / max(intr.fx, intr.fy))
    base_dist = rho / np.sin(half_fov)
    az0 = 0.0 if preferred_dir is None else np.degrees(np.arctan2(preferred_dir[1], preferred_dir[0]))
    az0 += spec.azimuth_offset_deg
    n = spec.n_frames
    for attempt in range(max_retries):
        # start tight; the exact corner check below decides acceptance
        dist = base_dist * spec.radius_scale * (0.75 + 0.05 * attempt)
        k = np.arange(n)
        az = np.radians(az0 + spec.step_deg * (k - (n - 1) / 2.0) + smooth_noise(rng, n, 0.3))
        el = np.radians(
            np.clip(spec.elevation_deg + 4.0 * np.sin(2 * np.pi * k / WOBBLE_PERIOD), -60, 70)
            + smooth_noise(rng, n, 0.3)
        )
        radius = dist * (1.0 + smooth_noise(rng, n, 0.01))
        dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        eyes = center + radius[:, None] * dirs
        targets = center + smooth_noise(rng, (n, 3), 0.002)
        poses = [look_at(e, t) for e, t in zip(eyes, targets)]
        steps = np.linalg.norm(np.diff(eyes, axis=0), axis=1)
        if np.all(steps < MAX_STEP_FRACTION * radius.mean()) and all(in_frustum(intr, p, box) for p in poses):
            return Trajectory(list(range(n)), poses)
    raise SceneRejected("camera trajectory violates the frustum constraint")


def render_frame(index, obj: TriMesh, hand: HandMesh | None, intr, pose) -> FrameRecord:
    z_obj, t_obj = rasterize_ids(obj, intr, pose)
    cmask = t_obj >= 0
    if hand is not None:
        z_hand, t_hand = rasterize_ids(hand.mesh, intr, pose)
        hidden = (t_hand >= 0) & (z_hand < z_obj)
        hvis = (t_hand >= 0) & (z_hand <= z_obj)
        depth = np.minimum(z_obj, z_hand)
        uv, _, _ = project_points(intr, pose, hand.keypoints)
    else:
        hidden = np.zeros_like(cmask)
        hvis = np.zeros_like(cmask)
        depth = z_obj
        uv = np.zeros((21, 2))
    return FrameRecord(
        index=index,
        pose=pose,
        omask=MaskImage(cmask & ~hidden),
        cmask=MaskImage(cmask),
        hmask=MaskImage(hvis),
        depth=DepthMap(depth.astype(np.float32)),
        keypoints2d=uv,
    )


def render_sequence(
    spec: SceneSpec,
    grid: VoxelGrid,
    obj: TriMesh,
    hand: HandMesh | None,
    traj: Trajectory,
) -> SequenceRecord:
    """Render object, hand and scene depth for every trajectory frame.

    ``hand=None`` renders the object alone (occluded mask equals complete).
    """
    intr = spec.intrinsics
    frames = [render_frame(i, obj, hand, intr, p) for i, p in zip(traj.frames, traj.poses)]
    return SequenceRecord(spec, frames, grid, obj, hand, traj)


def make_sequence(spec: SceneSpec) -> SequenceRecord:
    """Generate object, hand, orbit and renders for one scene.

    Raises :class:`SceneRejected` when hand placement or the orbit fails, or
    when the hand hides more than 90% of the object in any frame.
    """
    grid, obj = gen_object(spec.seed, spec.complexity, spec.voxel_res, spec.object_extent)
    try:
        hand = gen_hand_occluder(spec.seed, spec.grasp_offset, obj, spec.hand_scale)
    except PlacementError as e:
        raise SceneRejected(str(e)) from e
    lo = np.minimum(obj.vertices.min(0), hand.vertices.min(0))
    hi = np.maximum(obj.vertices.max(0), hand.vertices.max(0))
    hand_dir = hand.keypoints.mean(0) - 0.5 * (obj.vertices.min(0) + obj.vertices.max(0))
    traj = gen_camera_trajectory(spec, (lo, hi), hand_dir)
    rec = render_sequence(spec, grid, obj, hand, traj)
    worst = max(occlusion_ratio(fr) for fr in rec.frames)
    if worst > MAX_FRAME_OCCLUSION:
        raise SceneRejected(f"hand hides {worst:.0%} of the object in one frame")
    return rec


def occlusion_ratio(frame: FrameRecord) -> float:
    c = frame.cmask.count()
    return 0.0 if c == 0 else 1.0 - frame.omask.count() / c
