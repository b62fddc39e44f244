"""Synthetic scenes and brute-force oracles shared by unit and acceptance tests."""
import math

import numpy as np

from hoirecon.geometry import CameraIntrinsics, SE3Pose, Trajectory, look_at, project_points, so3_exp
from hoirecon.pose import CorrespondenceSet

RANSAC_INTR = CameraIntrinsics.simple(256.0, 256)


def ransac_trial(seed, n=100, outliers=0.3, noise_px=1.0, extent=0.5, fill=0.9):
    """Points uniform in a cube of side ``extent`` seen from a random
    direction, the bounding sphere spanning ``fill`` of the image height.
    Returns ``(gt_pose, correspondences, outlier indices, scene diameter)``."""
    rng = np.random.default_rng([6, seed])
    pts = rng.uniform(-extent / 2, extent / 2, size=(n, 3))
    rho = np.linalg.norm(pts, axis=1).max()
    dist = rho * RANSAC_INTR.fy / (0.5 * fill * RANSAC_INTR.height)
    d = rng.normal(size=3)
    pose = look_at(d / np.linalg.norm(d) * dist, np.zeros(3))
    uv, _, _ = project_points(RANSAC_INTR, pose, pts)
    px = uv + rng.normal(scale=noise_px, size=uv.shape)
    bad = rng.choice(n, size=int(round(outliers * n)), replace=False)
    px[bad] = rng.uniform(0, RANSAC_INTR.width, size=(len(bad), 2))
    diam = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1)))
    return pose, CorrespondenceSet(pts, px), bad, diam


def alignment_trial(seed, s_true=1.3, t_max=0.03):
    """Forward-constructed hand misalignment on a generated scene.

    Contacts pair each visible canonical hand vertex ``V`` with the object
    point ``s_true * V + t_true``, so the optimum of the alignment cost is
    exactly ``(s_true, t_true)``. Returns ``(problem, s_true, t_true)``."""
    from hoirecon.align import AlignProblem, ContactPairs, visible_vertices
    from hoirecon.synth.dataset import generate_dataset

    (rec,) = generate_dataset(100 + seed, 1)
    rng = np.random.default_rng([7, seed])
    t_true = rng.normal(size=3)
    t_true *= rng.uniform(0.005, t_max) / np.linalg.norm(t_true)
    hand, intr = rec.hand, rec.intrinsics
    pairs, poses = [], []
    for f in rec.frames:
        v = visible_vertices(hand, intr, f.pose, f.depth, f.hmask)
        pairs.append(ContactPairs(v, hand.vertices[v], s_true * hand.vertices[v] + t_true, f.index))
        poses.append(f.pose)
    return AlignProblem(pairs, hand.vertices, intr, poses), s_true, t_true


# -- metric oracles -------------------------------------------------------------


def brute_nn(a, b):
    out = []
    for p in a.tolist():
        out.append(min(math.sqrt(sum((p[i] - q[i]) ** 2 for i in range(3))) for q in b.tolist()))
    return out


def brute_chamfer(a, b):
    da, db = brute_nn(a, b), brute_nn(b, a)
    return 100.0 * 0.5 * (sum(da) / len(da) + sum(db) / len(db))


def brute_fscore(a, b, tau):
    p = 100.0 * (sum(d < tau for d in brute_nn(a, b)) / len(a))
    r = 100.0 * (sum(d < tau for d in brute_nn(b, a)) / len(b))
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _at(*t):
    return SE3Pose.from_matrix(np.eye(3), np.array(t, float))


def _traj(poses):
    return Trajectory(list(range(len(poses))), poses)


def three_frame_cases():
    """``(name, est, gt, metric, expected)`` worked by hand.

    ``metric`` is ``ate`` (metres), ``rpe_t`` (cm) or ``rpe_r`` (degrees).
    """
    ang = np.radians([90, 210, 330])
    tri = _traj([_at(math.cos(a), math.sin(a), 0.0) for a in ang])
    # dilating by 10% about the centroid: best rigid fit is the identity
    dil = _traj([_at(1.1 * math.cos(a), 1.1 * math.sin(a), 0.0) for a in ang])
    line = _traj([_at(0, 0, 0), _at(1, 0, 0), _at(2, 0, 0)])
    moved = _traj([_at(5, 5, 0), _at(5, 6, 0), _at(5, 7, 0)])
    slip_last = _traj([_at(0, 0, 0), _at(1, 0, 0), _at(2.02, 0, 0)])
    slip_mid = _traj([_at(0, 0, 0), _at(1.02, 0, 0), _at(2, 0, 0)])
    turned = _traj([line.poses[0], line.poses[1], SE3Pose.from_matrix(so3_exp(np.array([0, 0, np.radians(3.0)])), [2, 0, 0])])
    return [
        ("ate dilation", dil, tri, "ate", 0.1),
        ("ate rigid collinear", moved, line, "ate", 0.0),
        ("rpe slip last", slip_last, line, "rpe_t", 100 * 0.02 / math.sqrt(2)),
        ("rpe slip middle", slip_mid, line, "rpe_t", 2.0),
        ("rpe slip rotation", slip_last, line, "rpe_r", 0.0),
        ("rpe turn", turned, line, "rpe_r", 3.0 / math.sqrt(2)),
        ("rpe turn translation", turned, line, "rpe_t", 0.0),
    ]
