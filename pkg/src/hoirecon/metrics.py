"""Reconstruction and trajectory metrics.

Chamfer distance is the symmetric mean of unsquared nearest-neighbour
distances, reported in centimetres. F-scores count a point as matched when its
nearest neighbour is strictly closer than ``tau``.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DegenerateConfigurationError, SE3Pose, Trajectory, rotation_angle, similarity_fit
from .mesh import TriMesh


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    cd_cm: float
    f5_pct: float
    f10_pct: float
    ate_m: float
    rpe_t_cm: float
    rpe_r_deg: float


REPORT_FIELDS = ["cd_cm", "f5_pct", "f10_pct", "ate_m", "rpe_t_cm", "rpe_r_deg"]


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    return sample_surface_faces(mesh, n, seed)[0]


def sample_surface_faces(mesh: TriMesh, n: int, seed: int = 0):
    """Like :func:`sample_surface` but also returns the source triangle indices."""
    if mesh.is_empty:
        raise MetricError("cannot sample an empty mesh")
    if n < 1:
        raise MetricError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[tri] for x in mesh.corners())
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, tri


def _nn_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def _check_sets(a, b):
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("point sets must be nonempty")
    return a, b


def chamfer_cm(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_sets(a, b)
    return float(100.0 * 0.5 * (_nn_dist(a, b).mean() + _nn_dist(b, a).mean()))


def fscore(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    """F-score in percent at distance threshold ``tau`` (metres)."""
    a, b = _check_sets(a, b)
    if not tau > 0:
        raise MetricError("tau must be positive")
    precision = 100.0 * np.mean(_nn_dist(a, b) < tau)
    recall = 100.0 * np.mean(_nn_dist(b, a) < tau)
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def _check_traj(est: Trajectory, gt: Trajectory):
    if list(est.frames) != list(gt.frames):
        raise MetricError("trajectories must cover the same frame indices")


def ate(est: Trajectory, gt: Trajectory, with_scale: bool = False) -> float:
    """RMSE of translation residuals after rigid (optionally similarity)
    alignment of the estimated translations onto ground truth."""
    _check_traj(est, gt)
    if len(est) < 3:
        raise MetricError("ATE needs at least 3 frames")
    pe, pg = est.translations(), gt.translations()
    try:
        S = similarity_fit(pe, pg, with_scale=with_scale)
    except DegenerateConfigurationError as e:
        raise MetricError(f"ATE alignment failed: {e}") from e
    res = S.apply(pe) - pg
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> tuple[float, float]:
    """``(translation RMSE in cm, rotation RMSE in degrees)`` over frame pairs
    ``delta`` apart."""
    _check_traj(est, gt)
    if delta < 1 or len(est) < delta + 1:
        raise MetricError("trajectory too short for the requested delta")
    t_err, r_err = [], []
    for i in range(len(est) - delta):
        rel_gt = gt.poses[i].inverse() @ gt.poses[i + delta]
        rel_est = est.poses[i].inverse() @ est.poses[i + delta]
        E = rel_gt.inverse() @ rel_est
        t_err.append(np.linalg.norm(E.t))
        r_err.append(rotation_angle(E.R))
    t_err, r_err = np.array(t_err), np.array(r_err)
    return (
        float(100.0 * np.sqrt(np.mean(t_err**2))),
        float(np.degrees(np.sqrt(np.mean(r_err**2)))),
    )


def evaluate(
    pred_mesh: TriMesh | None,
    gt_mesh: TriMesh | None,
    est: Trajectory | None,
    gt: Trajectory | None,
    n_samples: int = 10000,
    seed: int = 0,
) -> MetricReport:
    """Full report; absent inputs give NaN fields."""
    cd = f5 = f10 = a = rt = rr = float("nan")
    if pred_mesh is not None and gt_mesh is not None:
        # one stream for both surfaces: identical meshes score exactly zero
        pa = sample_surface(pred_mesh, n_samples, seed)
        pb = sample_surface(gt_mesh, n_samples, seed)
        cd = chamfer_cm(pa, pb)
        f5 = fscore(pa, pb, 0.005)
        f10 = fscore(pa, pb, 0.010)
    if est is not None and gt is not None:
        a = ate(est, gt)
        rt, rr = rpe(est, gt)
    return MetricReport(cd, f5, f10, a, rt, rr)


def write_report_csv(path, rows: dict[str, MetricReport]) -> None:
    """One row per sequence plus a ``mean`` row (NaN-aware)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", *REPORT_FIELDS])
        for name, rep in rows.items():
            w.writerow([name, *(repr(float(v)) for v in asdict(rep).values())])
        if rows:
            arr = np.array([[getattr(r, k) for k in REPORT_FIELDS] for r in rows.values()])
            with np.errstate(all="ignore"):
                means = [
                    float(np.nanmean(col)) if np.any(~np.isnan(col)) else float("nan")
                    for col in arr.T
                ]
            w.writerow(["mean", *(repr(v) for v in means)])


def read_report_csv(path) -> dict[str, MetricReport]:
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["sequence", *REPORT_FIELDS]:
            raise MetricError(f"{path}: unexpected report header")
        for row in reader:
            out[row["sequence"]] = MetricReport(*(float(row[k]) for k in REPORT_FIELDS))
    return out


def rigid_errors(est: SE3Pose, gt: SE3Pose) -> tuple[float, float]:
    """Rotation error (degrees) and translation error (metres) between poses."""
    dR = est.R @ gt.R.T
    return float(np.degrees(rotation_angle(dR))), float(np.linalg.norm(est.t - gt.t))
