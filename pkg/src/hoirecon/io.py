"""Readers and writers for the on-disk formats.

All float text output uses ``repr`` so values round-trip bit-exactly.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import SE3Pose, Trajectory
from .mesh import DepthMap, MaskImage, TriMesh, VoxelGrid


class FormatError(ValueError):
    """A file could not be parsed; the message names the file."""


def _r(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, mesh: TriMesh) -> None:
    path = Path(path)
    has_n = mesh.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_n:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines += [
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for i, v in enumerate(mesh.vertices):
        row = [_r(x) for x in v]
        if has_n:
            row += [_r(x) for x in mesh.normals[i]]
        lines.append(" ".join(row))
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    path.write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriMesh:
    path = Path(path)
    try:
        text = path.read_text().splitlines()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    vprops: list[str] = []
    current = None
    i = 1
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[:1] == ["format"] and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if tok[:1] == ["element"]:
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[:1] == ["property"] and current == "vertex":
            vprops.append(tok[-1])
        i += 1
    if i == len(text):
        raise FormatError(f"{path}: missing end_header")
    body = text[i + 1:]
    if len(body) < n_vert + n_face:
        raise FormatError(f"{path}: truncated body")
    try:
        vdata = np.array([[float(x) for x in body[k].split()] for k in range(n_vert)]).reshape(
            n_vert, len(vprops)
        )
        faces = []
        for k in range(n_vert, n_vert + n_face):
            tok = [int(x) for x in body[k].split()]
            if tok[0] != 3:
                raise FormatError(f"{path}: only triangle faces are supported")
            faces.append(tok[1:4])
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    col = {name: j for j, name in enumerate(vprops)}
    verts = vdata[:, [col["x"], col["y"], col["z"]]]
    normals = vdata[:, [col["nx"], col["ny"], col["nz"]]] if "nx" in col else None
    return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), normals)


# ---------------------------------------------------------------------------
# depth maps


def write_depth(path, depth: DepthMap) -> None:
    d = np.asarray(depth.depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"DEPTH {depth.width} {depth.height}\n".encode("ascii"))
        f.write(d.tobytes())


def read_depth(path) -> DepthMap:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    nl = raw.find(b"\n")
    head = raw[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(head) != 3 or head[0] != "DEPTH":
        raise FormatError(f"{path}: bad depth header")
    w, h = int(head[1]), int(head[2])
    payload = raw[nl + 1:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} payload bytes, found {len(payload)}")
    d = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    try:
        return DepthMap(d)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# masks


def write_pgm(path, mask: MaskImage) -> None:
    img = np.where(mask.values, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> MaskImage:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5" or fields[3] != b"255":
        raise FormatError(f"{path}: expected binary PGM with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    if not np.all((data == 0) | (data == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return MaskImage(data.reshape(h, w) == 255)


# ---------------------------------------------------------------------------
# voxel grids


def write_voxels(path, grid: VoxelGrid) -> None:
    occ = np.round(grid.occupancy * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"VOXL1")
        f.write(struct.pack("<3I", *grid.resolution))
        f.write(struct.pack("<d", grid.cell_size))
        f.write(struct.pack("<3d", *grid.origin))
        f.write(occ.tobytes(order="C"))


def read_voxels(path) -> VoxelGrid:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    if raw[:5] != b"VOXL1" or len(raw) < 49:
        raise FormatError(f"{path}: bad voxel header")
    dims = struct.unpack_from("<3I", raw, 5)
    (cell,) = struct.unpack_from("<d", raw, 17)
    origin = struct.unpack_from("<3d", raw, 25)
    body = raw[49:]
    if len(body) != int(np.prod(dims)):
        raise FormatError(f"{path}: occupancy payload size mismatch")
    occ = np.frombuffer(body, dtype=np.uint8).reshape(dims) / 255.0
    return VoxelGrid(occ, np.array(origin), cell)


def quantize_occupancy(occ: np.ndarray) -> np.ndarray:
    """Snap occupancy to the byte grid used by the voxel file format."""
    return np.round(np.asarray(occ) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# TUM trajectories


def write_tum(path, traj: Trajectory) -> None:
    lines = []
    for idx, pose in zip(traj.frames, traj.poses):
        vals = [float(idx), *pose.t, *pose.q]
        lines.append(" ".join(_r(v) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> Trajectory:
    path = Path(path)
    try:
        text = path.read_text().splitlines()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    frames, poses = [], []
    for ln, line in enumerate(text, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 8:
            raise FormatError(f"{path}:{ln}: expected 8 fields")
        v = [float(x) for x in tok]
        frames.append(int(round(v[0])))
        poses.append(SE3Pose(np.array(v[4:8]), np.array(v[1:4])))
    try:
        return Trajectory(frames, poses)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
