import numpy as np
import pytest

from hoirecon.geometry import SE3Pose, so3_exp


def random_pose(rng, t_scale=0.1, z=0.6) -> SE3Pose:
    R = so3_exp(rng.normal(size=3))
    t = rng.normal(scale=t_scale, size=3) + np.array([0.0, 0.0, z])
    return SE3Pose.from_matrix(R, t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def icosphere(subdiv: int = 1):
    from hoirecon.mesh import TriMesh

    p = (1 + 5**0.5) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in v]
    for _ in range(subdiv):
        cache, nf = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(verts), np.array(f))


@pytest.fixture(scope="session")
def tiny_dataset():
    from hoirecon.synth.dataset import generate_dataset

    return generate_dataset(11, 4, overrides=dict(n_frames=6))


def central_difference(f, params, eps=1e-6):
    """Numerical gradient of scalar ``f()`` w.r.t. each tensor in ``params``."""
    import torch

    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                hi = f().item()
                flat[i] = old - eps
                lo = f().item()
                flat[i] = old
                gflat[i] = (hi - lo) / (2 * eps)
            out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-4):
    # the floor keeps entries whose true gradient is zero from dividing
    # finite-difference roundoff (~1e-9) by ~0
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.detach().reshape(-1), n.reshape(-1)
        den = (a.abs().maximum(n.abs())).clamp_min(floor)
        worst = max(worst, float(((a - n).abs() / den).max()))
    return worst


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one ``CRITERION n PASS/FAIL`` line for the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
