import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoirecon.geometry import SE3Pose, Trajectory, so3_exp
from hoirecon.mesh import TriMesh
from hoirecon.metrics import (
    REPORT_FIELDS,
    MetricError,
    MetricReport,
    ate,
    chamfer_cm,
    evaluate,
    fscore,
    read_report_csv,
    rpe,
    sample_surface,
    write_report_csv,
)

from conftest import icosphere, random_pose
from harness import brute_chamfer, brute_fscore


def traj(poses):
    return Trajectory(list(range(len(poses))), poses)


def at(*t):
    return SE3Pose.from_matrix(np.eye(3), np.array(t, float))


# -- surface sampling ---------------------------------------------------------


def unit_square():
    return TriMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]]), np.array([[0, 1, 2], [0, 2, 3]]))


def test_square_sampling_is_uniform():
    from scipy.stats import chisquare

    pts = sample_surface(unit_square(), 10_000, seed=3)
    cells = (pts[:, 0] >= 0.5).astype(int) * 2 + (pts[:, 1] >= 0.5)
    counts = np.bincount(cells, minlength=4)
    assert chisquare(counts).pvalue > 0.01


def test_single_sample_on_surface_and_determinism():
    (p,) = sample_surface(unit_square(), 1, seed=0)
    assert 0 <= p[0] <= 1 and 0 <= p[1] <= 1 and p[2] == 0
    assert np.array_equal(sample_surface(icosphere(1), 50, 4), sample_surface(icosphere(1), 50, 4))
    with pytest.raises(MetricError):
        sample_surface(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 5)


# -- point-set metrics --------------------------------------------------------


def test_chamfer_examples():
    a = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_cm(a, a) == 0
    assert chamfer_cm([[0, 0, 0]], [[0.01, 0, 0]]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(MetricError):
        chamfer_cm(np.zeros((0, 3)), a)


def test_fscore_examples():
    a = np.random.default_rng(1).normal(size=(20, 3))
    assert fscore(a, a, 0.001) == 100.0
    assert fscore([[0, 0, 0]], [[0.02, 0, 0]], 0.005) == 0.0
    with pytest.raises(MetricError):
        fscore(a, a, 0.0)


def test_point_metrics_match_brute_force(rng):
    for _ in range(10):
        a = rng.uniform(0, 0.05, size=(100, 3))
        b = rng.uniform(0, 0.05, size=(100, 3))
        assert abs(chamfer_cm(a, b) - brute_chamfer(a, b)) <= 1e-10
        for tau in (0.005, 0.010):
            assert fscore(a, b, tau) == brute_fscore(a, b, tau)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31))
def test_point_metrics_symmetric(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)) * 0.01, rng.normal(size=(m, 3)) * 0.01
    assert chamfer_cm(a, b) == pytest.approx(chamfer_cm(b, a), abs=1e-12)
    assert fscore(a, b, 0.005) == pytest.approx(fscore(b, a, 0.005), abs=1e-9)
    assert chamfer_cm(a, b) >= 0 and 0 <= fscore(a, b, 0.005) <= 100


# -- trajectory metrics -------------------------------------------------------


def test_ate_zero_cases(rng):
    gt = traj([random_pose(rng) for _ in range(5)])
    assert ate(gt, gt) < 1e-12
    shifted = traj([SE3Pose(p.q, p.t + [1.0, 0, 0]) for p in gt.poses])
    assert ate(shifted, gt) < 1e-12


def test_ate_hand_computed_dilation():
    # an equilateral triangle of circumradius 1 against itself dilated by 10%
    # about the centroid: the best rigid fit is the identity, so every residual
    # is 0.1
    ang = np.radians([90, 210, 330])
    gt = traj([at(math.cos(a), math.sin(a), 0.0) for a in ang])
    est = traj([at(1.1 * math.cos(a), 1.1 * math.sin(a), 0.0) for a in ang])
    assert abs(ate(est, gt) - 0.1) <= 1e-12


def test_ate_collinear_trajectory():
    gt = traj([at(0, 0, 0), at(1, 0, 0), at(2, 0, 0)])
    est = traj([at(5, 5, 0), at(5, 6, 0), at(5, 7, 0)])
    assert ate(est, gt) < 1e-12


def test_ate_matches_scalar_recomputation(rng):
    gt = traj([random_pose(rng, t_scale=0.3) for _ in range(8)])
    est = traj([SE3Pose(p.q, p.t + rng.normal(scale=0.01, size=3)) for p in gt.poses])
    from hoirecon.geometry import umeyama_sim3

    S = umeyama_sim3(est.translations(), gt.translations(), with_scale=False)
    total = 0.0
    for pe, pg in zip(est.translations().tolist(), gt.translations().tolist()):
        q = S.R.tolist()
        x = [sum(q[r][c] * pe[c] for c in range(3)) + S.t[r] for r in range(3)]
        total += sum((x[i] - pg[i]) ** 2 for i in range(3))
    assert ate(est, gt) == pytest.approx(math.sqrt(total / 8), abs=1e-12)


def test_ate_rigid_invariance(rng):
    gt = traj([random_pose(rng, t_scale=0.3) for _ in range(6)])
    est = traj([SE3Pose(p.q, p.t + rng.normal(scale=0.01, size=3)) for p in gt.poses])
    g = random_pose(rng)
    moved = traj([SE3Pose(p.q, g.apply(p.t)) for p in est.poses])
    assert ate(moved, gt) == pytest.approx(ate(est, gt), abs=1e-12)


def test_ate_needs_three_frames():
    with pytest.raises(MetricError):
        ate(traj([at(0, 0, 0)] * 1), traj([at(0, 0, 0)]))
    with pytest.raises(MetricError):
        ate(traj([at(0, 0, 0), at(1, 0, 0)]), traj([at(0, 0, 0), at(1, 0, 0)]))


def test_rpe_zero_cases(rng):
    gt = traj([random_pose(rng) for _ in range(5)])
    t_err, r_err = rpe(gt, gt)
    assert t_err < 1e-12 and r_err < 1e-12
    g = random_pose(rng)
    t_err, r_err = rpe(traj([g @ p for p in gt.poses]), gt)
    assert t_err < 1e-10 and r_err < 1e-6
    h = random_pose(rng)
    a = rpe(traj([g @ p for p in gt.poses]), traj([h @ p for p in gt.poses]))
    assert a[0] < 1e-10


def test_rpe_hand_computed_slip():
    gt = traj([at(0, 0, 0), at(1, 0, 0), at(2, 0, 0)])
    slip_last = traj([at(0, 0, 0), at(1, 0, 0), at(2.02, 0, 0)])
    t_err, r_err = rpe(slip_last, gt)
    assert abs(t_err - 100 * 0.02 / math.sqrt(2)) <= 1e-12 and r_err == 0
    slip_mid = traj([at(0, 0, 0), at(1.02, 0, 0), at(2, 0, 0)])
    assert abs(rpe(slip_mid, gt)[0] - 2.0) <= 1e-12


def test_rpe_hand_computed_rotation():
    gt = traj([at(0, 0, 0), at(1, 0, 0), at(2, 0, 0)])
    turned = SE3Pose.from_matrix(so3_exp(np.array([0, 0, np.radians(3.0)])), [2, 0, 0])
    t_err, r_err = rpe(traj([gt.poses[0], gt.poses[1], turned]), gt)
    assert abs(r_err - 3.0 / math.sqrt(2)) <= 1e-12 and t_err < 1e-12


def test_rpe_delta_and_mismatch():
    gt = traj([at(k, 0, 0) for k in range(4)])
    with pytest.raises(MetricError):
        rpe(gt, gt, delta=4)
    with pytest.raises(MetricError):
        rpe(traj(gt.poses[:3]), gt)
    assert rpe(gt, gt, delta=3) == (0.0, 0.0)


# -- reports ------------------------------------------------------------------


def test_evaluate_and_csv_round_trip(tmp_path, rng):
    gt = traj([random_pose(rng) for _ in range(4)])
    rep = evaluate(icosphere(1), icosphere(1), gt, gt, n_samples=500)
    assert rep.cd_cm < 10 and rep.ate_m < 1e-12
    empty = evaluate(None, None, None, None)
    assert all(math.isnan(getattr(empty, k)) for k in REPORT_FIELDS)
    path = tmp_path / "metrics.csv"
    write_report_csv(path, {"a": rep, "b": MetricReport(1, 2, 3, 4, 5, 6)})
    lines = path.read_text().splitlines()
    assert lines[0] == "sequence,cd_cm,f5_pct,f10_pct,ate_m,rpe_t_cm,rpe_r_deg"
    assert lines[-1].startswith("mean,")
    back = read_report_csv(path)
    assert back["a"] == rep and back["mean"].rpe_r_deg == pytest.approx((rep.rpe_r_deg + 6) / 2)
