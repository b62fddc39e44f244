import math

import numpy as np
import pytest

from hoirecon.align import (
    REPORT_HEADER,
    AlignError,
    AlignParams,
    AlignProblem,
    AlignWeights,
    ContactPairs,
    align_hand,
    read_align_report,
    trace_contacts,
    visible_vertices,
    write_align_report,
)
from hoirecon.geometry import CameraIntrinsics, SE3Pose, so3_exp
from hoirecon.mesh import DepthMap, MaskImage, TriMesh, rasterize
from hoirecon.synth.hand import HandMesh

from conftest import icosphere
from harness import alignment_trial

INTR = CameraIntrinsics.simple(64.0, 64)


def as_hand(mesh: TriMesh, normals) -> HandMesh:
    m = TriMesh(mesh.vertices, mesh.triangles, np.asarray(normals, float))
    return HandMesh(m, np.zeros((21, 3)))


def facing_triangles(zs):
    v, f = [], []
    for k, z in enumerate(zs):
        v += [(-0.2, -0.2, z), (0.2, -0.2, z), (0.0, 0.2, z)]
        f.append((3 * k, 3 * k + 1, 3 * k + 2))
    return TriMesh(np.array(v), np.array(f))


def scene_of(mesh):
    depth, mask = rasterize(mesh, INTR, SE3Pose.identity())
    return depth, mask


# -- visibility ---------------------------------------------------------------


def test_front_triangle_fully_visible():
    mesh = facing_triangles([1.0])
    hand = as_hand(mesh, np.tile([0, 0, -1.0], (3, 1)))
    # the corners sit on coverage edges, so the scene depth is a plane behind them all
    depth = DepthMap(np.full((64, 64), 1.0))
    vis = visible_vertices(hand, INTR, SE3Pose.identity(), depth, MaskImage(np.ones((64, 64), bool)))
    assert vis.tolist() == [0, 1, 2]


def test_far_triangle_hidden():
    mesh = facing_triangles([1.0, 1.5])
    hand = as_hand(mesh, np.tile([0, 0, -1.0], (6, 1)))
    depth, _ = scene_of(mesh)
    # the far corners project inside the near triangle, whose depth wins the z-test
    vis = visible_vertices(hand, INTR, SE3Pose.identity(), depth, MaskImage(np.ones((64, 64), bool)))
    assert not set(vis.tolist()) & {3, 4, 5}


def test_empty_mask_and_monotone_in_mask(tiny_dataset):
    rec = tiny_dataset[0]
    f = rec.frames[0]
    rec_hand, intr, pose, depth, mask = rec.hand, rec.intrinsics, f.pose, f.depth, f.hmask
    assert len(visible_vertices(rec_hand, intr, pose, depth, MaskImage(np.zeros_like(mask.values)))) == 0
    full = set(visible_vertices(rec_hand, intr, pose, depth, mask).tolist())
    assert full and full <= set(range(len(rec_hand.vertices)))
    smaller = mask.values.copy()
    smaller[: smaller.shape[0] // 2] = False
    part = set(visible_vertices(rec_hand, intr, pose, depth, MaskImage(smaller)).tolist())
    assert part <= full


# -- contact tracing ----------------------------------------------------------


def plane(z=0.0, half=1.0):
    v = [(-half, -half, z), (half, -half, z), (half, half, z), (-half, half, z)]
    return TriMesh(np.array(v), np.array([[0, 1, 2], [0, 2, 3]]))


def point_hand(points, normals):
    pts = np.asarray(points, float)
    tris = [(0, 1, 2)] if len(pts) >= 3 else []
    # padding vertices keep the mesh valid; only the listed ones are traced
    pad = np.array([[5.0, 5, 5], [5.1, 5, 5], [5.0, 5.1, 5]])
    m = TriMesh(np.vstack([pts, pad]), np.array([(len(pts), len(pts) + 1, len(pts) + 2)] + tris))
    n = np.vstack([np.asarray(normals, float), np.tile([0, 0, 1.0], (3, 1))])
    return HandMesh(TriMesh(m.vertices, m.triangles, n), np.zeros((21, 3)))


def test_contact_plane_hit():
    hand = point_hand([[0, 0, 0.01]], [[0, 0, 1.0]])
    cp = trace_contacts(np.array([0]), hand, plane())
    assert len(cp) == 1
    assert np.allclose(cp.obj_pts[0], 0) and np.allclose(cp.hand_pts[0], (0, 0, 0.01))


def test_contact_capped():
    hand = point_hand([[0, 0, 0.05]], [[0, 0, 1.0]])
    assert len(trace_contacts(np.array([0]), hand, plane(), d_max=0.02)) == 0


def test_contacts_match_brute_force():
    obj = icosphere(2)
    ang = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    ring = np.stack([1.01 * np.cos(ang), 1.01 * np.sin(ang), 0.1 * np.sin(3 * ang)], 1)
    nrm = ring / np.linalg.norm(ring, axis=1, keepdims=True)
    tilt = so3_exp(np.array([0.0, 0.3, 0.0]))
    nrm = nrm @ tilt.T
    hand = point_hand(ring, nrm)
    cp = trace_contacts(np.arange(24), hand, obj, d_max=0.05)
    assert len(cp) > 0
    assert np.all(np.linalg.norm(cp.hand_pts - cp.obj_pts, axis=1) <= 0.05 + 1e-12)
    for k in range(24):
        o, d = ring[k], -nrm[k]
        best = math.inf
        for a, b, c in zip(*obj.corners()):
            M = np.column_stack([-d, b - a, c - a])
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            t, u, v = np.linalg.solve(M, o - a)
            if u >= -1e-12 and v >= -1e-12 and u + v <= 1 + 1e-12 and 1e-9 < t < best:
                best = t
        if best <= 0.05:
            (j,) = np.nonzero(cp.vertex == k)[0]
            assert np.allclose(cp.obj_pts[j], o + best * d, atol=1e-9)
        else:
            assert k not in cp.vertex


def test_trace_rejects_empty_object():
    hand = point_hand([[0, 0, 0.01]], [[0, 0, 1.0]])
    with pytest.raises(AlignError):
        trace_contacts(np.array([0]), hand, TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


# -- optimization -------------------------------------------------------------


def small_problem(s_true=1.3, t_true=(0.02, 0.0, -0.01), frames=3, w=AlignWeights()):
    rng = np.random.default_rng(0)
    V = rng.uniform(-0.05, 0.05, size=(40, 3))
    t_true = np.asarray(t_true)
    poses = [SE3Pose.from_matrix(so3_exp(np.array([0, 0.1 * k, 0])), [0, 0, 0.6]) for k in range(frames)]
    pairs = [ContactPairs(np.arange(10 * k, 10 * k + 10), V[10 * k: 10 * k + 10],
                          s_true * V[10 * k: 10 * k + 10] + t_true, k) for k in range(frames)]
    return AlignProblem(pairs, V, INTR, poses, w), V


def test_recovers_forward_constructed_alignment():
    prob, _ = small_problem()
    res = align_hand(prob)
    assert abs(res.params.s - 1.3) < 1e-2
    assert np.abs(res.params.t - [0.02, 0, -0.01]).max() < 1e-3
    totals = [row[4] for row in res.history]
    assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_stationary_at_optimum():
    prob, _ = small_problem(1.0, (0, 0, 0))
    res = align_hand(prob, init=AlignParams(1.0, np.zeros(3)))
    assert res.params.s == 1.0 and np.all(res.params.t == 0)
    # one frame: no smoothness term, and the unsquared norms contribute a zero
    # subgradient at zero residual
    prob1, _ = small_problem(1.0, (0, 0, 0), frames=1)
    _, g = prob1.terms(1.0, np.zeros(3))
    assert np.abs(prob1.weights() @ g).max() < 1e-8


def test_single_frame_loss_matches_scalar_oracle():
    w = AlignWeights(200.0, 20.0, 0.0)
    prob, V = small_problem(frames=1, w=w)
    s, t = 1.1, np.array([0.01, -0.02, 0.005])
    pose = prob.poses[0]
    cp = prob.pairs[0]
    contact = kp = 0.0
    for vh, vo in zip(cp.hand_pts.tolist(), cp.obj_pts.tolist()):
        x = [s * vh[i] + t[i] for i in range(3)]
        contact += math.sqrt(sum((x[i] - vo[i]) ** 2 for i in range(3)))
        R = pose.R.tolist()
        cx = [sum(R[r][c] * x[c] for c in range(3)) + pose.t[r] for r in range(3)]
        co = [sum(R[r][c] * vo[c] for c in range(3)) + pose.t[r] for r in range(3)]
        du = INTR.fx * (cx[0] / cx[2] - co[0] / co[2])
        dv = INTR.fy * (cx[1] / cx[2] - co[1] / co[2])
        kp += math.hypot(du, dv)
    assert prob.loss(s, t) == pytest.approx(200.0 * contact + 20.0 * kp, rel=1e-12)


def test_smoothness_term_matches_direct_sum():
    prob, V = small_problem(frames=3)
    s, t = 0.9, np.array([0.01, 0.0, -0.02])
    vals, _ = prob.terms(s, t)
    direct = 0.0
    X = s * V + t
    for a, b in zip(prob.poses[:-1], prob.poses[1:]):
        direct += np.sum((b.apply(X) - a.apply(X)) ** 2)
    assert vals[2] == pytest.approx(direct, rel=1e-10)


def test_gradient_matches_finite_differences():
    prob, _ = small_problem()
    x = np.array([1.1, 0.005, 0.01, -0.003])
    _, g = prob.terms(x[0], x[1:])
    analytic = prob.weights() @ g
    num = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-7
        num[i] = (prob.loss((x + e)[0], (x + e)[1:]) - prob.loss((x - e)[0], (x - e)[1:])) / 2e-7
    assert np.allclose(analytic, num, rtol=1e-5, atol=1e-6)


def test_alignment_on_generated_scene():
    prob, s_true, t_true = alignment_trial(3)
    res = align_hand(prob)
    assert abs(res.params.s - s_true) < 1e-2 and np.abs(res.params.t - t_true).max() < 1e-3
    assert res.history[-1][4] <= res.history[0][4]


def test_input_validation():
    with pytest.raises(AlignError):
        AlignProblem([ContactPairs([], np.zeros((0, 3)), np.zeros((0, 3)))], np.zeros((1, 3)), INTR,
                     [SE3Pose.identity()])
    with pytest.raises(AlignError):
        AlignParams(0.0)
    with pytest.raises(AlignError):
        AlignWeights(-1.0)


def test_report_round_trip(tmp_path):
    prob, _ = small_problem()
    res = align_hand(prob, iters=20)
    path = tmp_path / "align.csv"
    write_align_report(path, res)
    assert path.read_text().splitlines()[0] == ",".join(REPORT_HEADER)
    rows = read_align_report(path)
    assert np.allclose(rows, res.history)
