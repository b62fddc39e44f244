"""Dataset generation and the on-disk sequence layout.

Layout::

    <root>/manifest.txt
    <root>/<seq_id>/spec.txt            key=value scene spec
    <root>/<seq_id>/frame_%04d.{omask.pgm,cmask.pgm,hmask.pgm,depth.bin}
    <root>/<seq_id>/object.ply, object_voxels.bin, hand.ply
    <root>/<seq_id>/traj_gt.txt         TUM
    <root>/<seq_id>/keypoints.csv       frame,kp,x,y,z,u,v

``manifest.txt`` carries the format version, one ``sequence <id> <split>``
line per sequence and a ``file <relpath> <sha256>`` line per stored file.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..io import (
    FormatError,
    read_depth,
    read_pgm,
    read_ply,
    read_tum,
    read_voxels,
    write_depth,
    write_pgm,
    write_ply,
    write_tum,
    write_voxels,
)
from .hand import HandMesh
from .scene import FrameRecord, SceneRejected, SceneSpec, SequenceRecord, make_sequence, random_scene_spec

log = logging.getLogger(__name__)

MANIFEST_HEADER = "hoirecon-dataset"
VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetManifest:
    version: int = VERSION
    sequences: list[tuple[str, str]] = field(default_factory=list)  # (id, split)
    checksums: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s for s, _ in self.sequences]
        if len(ids) != len(set(ids)):
            raise DatasetError("duplicate sequence ids in manifest")

    def ids(self, split: str | None = None) -> list[str]:
        return [s for s, sp in self.sequences if split is None or sp == split]


def sequence_seed(master_seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([master_seed, index, attempt]).generate_state(1)[0])


def _generate_one(args) -> tuple[int, SequenceRecord]:
    master_seed, index, overrides, max_attempts = args
    for attempt in range(max_attempts):
        spec = random_scene_spec(sequence_seed(master_seed, index, attempt), **overrides)
        try:
            return index, make_sequence(spec)
        except SceneRejected as e:
            log.debug("sequence %d attempt %d rejected: %s", index, attempt, e)
    raise SceneRejected(f"sequence {index}: no valid scene after {max_attempts} attempts")


def generate_dataset(
    master_seed: int,
    n_sequences: int,
    overrides: dict | None = None,
    workers: int = 1,
    max_attempts: int = 20,
) -> list[SequenceRecord]:
    """Generate ``n_sequences`` scenes. Each sequence draws from its own
    stream derived from ``(master_seed, index)``, so any ``workers`` count
    yields identical output."""
    jobs = [(master_seed, i, dict(overrides or {}), max_attempts) for i in range(n_sequences)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            out = dict(ex.map(_generate_one, jobs))
    else:
        out = dict(map(_generate_one, jobs))
    return [out[i] for i in range(n_sequences)]


def default_splits(n: int, val_frac: float = 0.1, test_frac: float = 0.1) -> list[str]:
    n_test = int(round(n * test_frac))
    n_val = int(round(n * val_frac))
    n_train = n - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def seq_id(i: int) -> str:
    return f"seq_{i:04d}"


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x) -> str:
    return repr(float(x))


def write_sequence(rec: SequenceRecord, d: Path) -> list[Path]:
    d.mkdir(parents=True, exist_ok=True)
    written = []

    def out(name):
        p = d / name
        written.append(p)
        return p

    out("spec.txt").write_text(rec.spec.to_text())
    for fr in rec.frames:
        write_pgm(out(f"frame_{fr.index:04d}.omask.pgm"), fr.omask)
        write_pgm(out(f"frame_{fr.index:04d}.cmask.pgm"), fr.cmask)
        write_pgm(out(f"frame_{fr.index:04d}.hmask.pgm"), fr.hmask)
        write_depth(out(f"frame_{fr.index:04d}.depth.bin"), fr.depth)
    write_ply(out("object.ply"), rec.object_mesh)
    write_voxels(out("object_voxels.bin"), rec.object_grid)
    write_ply(out("hand.ply"), rec.hand.mesh)
    write_tum(out("traj_gt.txt"), rec.trajectory)
    with open(out("keypoints.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "kp", "x", "y", "z", "u", "v"])
        nan = "nan"
        for k, p in enumerate(rec.hand.keypoints):
            w.writerow([-1, k, _fmt(p[0]), _fmt(p[1]), _fmt(p[2]), nan, nan])
        for fr in rec.frames:
            for k, uv in enumerate(fr.keypoints2d):
                w.writerow([fr.index, k, nan, nan, nan, _fmt(uv[0]), _fmt(uv[1])])
    return written


def write_dataset(records: list[SequenceRecord], root, splits: list[str] | None = None) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = splits or default_splits(len(records))
    if len(splits) != len(records):
        raise DatasetError("one split label per sequence required")
    manifest = DatasetManifest()
    for i, (rec, split) in enumerate(zip(records, splits)):
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        sid = seq_id(i)
        manifest.sequences.append((sid, split))
        for p in write_sequence(rec, root / sid):
            manifest.checksums[p.relative_to(root).as_posix()] = _sha(p)
    lines = [f"{MANIFEST_HEADER} {manifest.version}"]
    lines += [f"sequence {s} {sp}" for s, sp in manifest.sequences]
    lines += [f"file {k} {v}" for k, v in manifest.checksums.items()]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"{path}: missing manifest")
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != MANIFEST_HEADER:
        raise DatasetError(f"{path}: not a dataset manifest")
    if int(head[1]) != VERSION:
        raise DatasetError(f"{path}: version {head[1]} unsupported (expected {VERSION})")
    seqs, sums = [], {}
    for ln in lines[1:]:
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "sequence" and len(tok) == 3:
            seqs.append((tok[1], tok[2]))
        elif tok[0] == "file" and len(tok) == 3:
            sums[tok[1]] = tok[2]
        else:
            raise DatasetError(f"{path}: malformed line {ln!r}")
    return DatasetManifest(VERSION, seqs, sums)


def _verify(root: Path, manifest: DatasetManifest, sid: str) -> None:
    for rel, digest in manifest.checksums.items():
        if not rel.startswith(sid + "/"):
            continue
        p = root / rel
        if not p.exists():
            raise DatasetError(f"{p}: missing file")
        if _sha(p) != digest:
            raise DatasetError(f"{p}: checksum mismatch")


def read_sequence(root, sid: str, manifest: DatasetManifest | None = None, verify: bool = True) -> SequenceRecord:
    root = Path(root)
    manifest = manifest or read_manifest(root)
    if sid not in manifest.ids():
        raise DatasetError(f"{sid}: not listed in manifest")
    if verify:
        _verify(root, manifest, sid)
    d = root / sid
    try:
        spec = SceneSpec.from_text((d / "spec.txt").read_text())
        traj = read_tum(d / "traj_gt.txt")
        kp3, kp2 = np.zeros((21, 3)), {}
        with open(d / "keypoints.csv", newline="") as f:
            for row in csv.DictReader(f):
                fi, k = int(row["frame"]), int(row["kp"])
                if fi < 0:
                    kp3[k] = [float(row["x"]), float(row["y"]), float(row["z"])]
                else:
                    kp2.setdefault(fi, np.zeros((21, 2)))[k] = [float(row["u"]), float(row["v"])]
        frames = []
        for idx, pose in zip(traj.frames, traj.poses):
            stem = d / f"frame_{idx:04d}"
            frames.append(
                FrameRecord(
                    index=idx,
                    pose=pose,
                    omask=read_pgm(f"{stem}.omask.pgm"),
                    cmask=read_pgm(f"{stem}.cmask.pgm"),
                    hmask=read_pgm(f"{stem}.hmask.pgm"),
                    depth=read_depth(f"{stem}.depth.bin"),
                    keypoints2d=kp2.get(idx, np.zeros((21, 2))),
                )
            )
        grid = read_voxels(d / "object_voxels.bin")
        obj = read_ply(d / "object.ply")
        hand = HandMesh(read_ply(d / "hand.ply"), kp3)
    except FormatError as e:
        raise DatasetError(str(e)) from e
    except FileNotFoundError as e:
        raise DatasetError(f"{e.filename}: missing file") from e
    return SequenceRecord(spec, frames, grid, obj, hand, traj)


def read_dataset(root, verify: bool = True) -> tuple[DatasetManifest, dict[str, SequenceRecord]]:
    manifest = read_manifest(root)
    recs = {sid: read_sequence(root, sid, manifest, verify) for sid in manifest.ids()}
    return manifest, recs
