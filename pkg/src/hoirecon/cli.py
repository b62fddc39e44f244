"""Command-line pipeline driver.

Subcommands: ``gen-data``, ``train``, ``sample``, ``pose``, ``align``,
``eval`` and ``report``. Every run writes its resolved ``config.txt`` into
the output directory.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure,
4 missing checkpoint, 5 trajectory frame-count mismatch.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("hoirecon")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE, EXIT_CHECKPOINT, EXIT_MISMATCH = 0, 2, 3, 4, 5


class CliError(RuntimeError):
    def __init__(self, msg: str, code: int = EXIT_FAILURE):
        super().__init__(msg)
        self.code = code


def _stream_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _need(value: str, key: str) -> Path:
    if not value:
        raise ConfigError(f"config key {key!r} is required for this command")
    return Path(value)


def _load_dataset(cfg: RunConfig):
    from .synth.dataset import DatasetError, read_manifest, read_sequence

    root = _need(cfg.dataset, "dataset")
    try:
        manifest = read_manifest(root)
        ids = cfg.sequence_list() or manifest.ids(cfg.split)
        missing = [s for s in ids if s not in manifest.ids()]
        if missing:
            raise CliError(f"sequences not in dataset: {', '.join(missing)}")
        return root, manifest, ids, (lambda sid: read_sequence(root, sid, manifest))
    except DatasetError as e:
        raise CliError(str(e)) from e


def _model_config(cfg: RunConfig):
    from .model.network import ModelConfig, ModelError

    try:
        return ModelConfig(
            M=cfg.model_M, P=cfg.model_P, heads=cfg.model_heads, d=cfg.model_d, g=cfg.model_g,
            r=cfg.model_r, m=cfg.model_m, n_min=cfg.model_n_min, n_max=cfg.model_n_max,
        )
    except ModelError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, out: Path, threads: int) -> None:
    from .synth.dataset import generate_dataset, write_dataset
    from .synth.scene import SceneRejected

    if cfg.data_sequences < 1:
        raise ConfigError("data_sequences must be >= 1")
    overrides = dict(image_size=cfg.data_image_size, focal=cfg.data_focal, voxel_res=cfg.data_voxel_res)
    try:
        recs = generate_dataset(cfg.seed, cfg.data_sequences, overrides, workers=threads,
                                max_attempts=cfg.data_max_attempts)
    except (SceneRejected, ValueError) as e:
        raise CliError(f"generation failed: {e}") from e
    manifest = write_dataset(recs, out)
    log.info("wrote %d sequences to %s", len(manifest.sequences), out)


def cmd_train(cfg: RunConfig, out: Path, threads: int) -> None:
    import torch

    from .model.checkpoint import save_checkpoint
    from .model.network import DualBranchDenoiser
    from .model.train import TrainConfig, TrainingError, prepare_sequence, train

    mcfg = _model_config(cfg)
    _, _, ids, load = _load_dataset(_with_split(cfg, "train"))
    if not ids:
        raise CliError("no training sequences")
    try:
        seqs = [prepare_sequence(load(s), mcfg) for s in ids]
    except TrainingError as e:
        raise CliError(str(e)) from e
    torch.manual_seed(cfg.seed)
    model = DualBranchDenoiser(mcfg)
    tcfg = TrainConfig(
        epochs=cfg.train_epochs, batch_size=cfg.train_batch_size, lr=cfg.train_lr, beta=cfg.train_beta,
        seed=cfg.seed, grad_clip=cfg.train_grad_clip, warmup_steps=cfg.train_warmup_steps,
    )
    try:
        hist = train(model, seqs, tcfg, loss_csv=out / "loss.csv")
    except TrainingError as e:
        raise CliError(str(e)) from e
    save_checkpoint(out / "checkpoint.fhdb", model, {"epochs": len(hist), "seed": cfg.seed})
    log.info("trained %d epochs on %d sequences; final loss %.4f", len(hist), len(seqs), hist[-1].loss_total)


def _with_split(cfg: RunConfig, split: str) -> RunConfig:
    if cfg.sequences:
        return cfg
    c = RunConfig(**vars(cfg))
    c.split = split
    return c


def _upsample(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    m = mask.shape[0]
    if h % m or w % m:
        return mask
    return np.kron(mask, np.ones((h // m, w // m), dtype=bool)).astype(bool)


def cmd_sample(cfg: RunConfig, out: Path, threads: int) -> None:
    from .io import write_pgm, write_ply, write_voxels
    from .mesh import MaskImage, voxel_surface
    from .model.checkpoint import CheckpointError, load_checkpoint
    from .model.train import TrainingError, conditioning_for, prepare_sequence, sample

    ckpt = _need(cfg.checkpoint, "checkpoint")
    if not ckpt.exists():
        raise CliError(f"{ckpt}: checkpoint not found", EXIT_CHECKPOINT)
    try:
        model, _ = load_checkpoint(ckpt)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_CHECKPOINT) from e
    _, manifest, ids, load = _load_dataset(cfg)
    all_ids = manifest.ids()
    for sid in ids:
        rec = load(sid)
        try:
            seq = prepare_sequence(rec, model.cfg)
        except TrainingError as e:
            raise CliError(f"{sid}: {e}") from e
        n = min(cfg.sample_views, len(seq))
        idx = np.unique(np.linspace(0, len(seq) - 1, n).round().astype(int))
        cond = conditioning_for(seq, idx, model.cfg)
        try:
            grid, masks = sample(
                model, cond, seq.spec, steps=cfg.sample_steps, seed=_stream_seed(cfg.seed, all_ids.index(sid)),
                threshold=cfg.sample_threshold, inpaint=cfg.sample_inpaint,
            )
        except TrainingError as e:
            raise CliError(f"{sid}: {e}") from e
        d = out / sid
        d.mkdir(parents=True, exist_ok=True)
        write_ply(d / "recon.ply", voxel_surface(grid))
        write_voxels(d / "voxels.bin", grid)
        for k, mk in zip(idx, masks):
            fr = rec.frames[k]
            write_pgm(d / f"cmask_pred_{fr.index:04d}.pgm", MaskImage(_upsample(mk.values, fr.cmask.values.shape)))
        log.info("%s: sampled %d views, %d occupied voxels", sid, len(idx), int(grid.binary().sum()))


def cmd_pose(cfg: RunConfig, out: Path, threads: int) -> None:
    from .io import FormatError, read_ply, write_tum
    from .pose import (
        NoisyOracleProvider, PoseConfig, PoseError, PoseLossWeights, RansacConfig, SyntheticMatcher, estimate_poses,
    )

    _, manifest, ids, load = _load_dataset(cfg)
    all_ids = manifest.ids()
    pcfg = PoseConfig(
        n_refs=cfg.pose_n_refs, rounds=cfg.pose_rounds, refine_iters=cfg.pose_refine_iters,
        weights=PoseLossWeights(cfg.pose_lambda_proj, cfg.pose_lambda_smooth),
        ransac=RansacConfig(iterations=cfg.ransac_iterations, threshold=cfg.ransac_threshold,
                            seed=cfg.seed, confidence=cfg.ransac_confidence),
    )
    for sid in ids:
        rec = load(sid)
        mesh = rec.object_mesh
        if cfg.pose_use_recon:
            path = _need(cfg.recon_dir, "recon_dir") / sid / "recon.ply"
            try:
                mesh = read_ply(path)
            except FormatError as e:
                raise CliError(str(e)) from e
        s = _stream_seed(cfg.seed, all_ids.index(sid))
        provider = NoisyOracleProvider(rot_deg=cfg.provider_rot_deg, seed=s)
        matcher = SyntheticMatcher(rec.intrinsics, n_matches=cfg.matcher_matches, outlier_frac=cfg.matcher_outliers,
                                   noise_px=cfg.matcher_noise_px, seed=s)
        try:
            traj = estimate_poses(mesh, rec.frames, rec.intrinsics, provider, matcher, pcfg)
        except PoseError as e:
            raise CliError(f"{sid}: {e}") from e
        (out / sid).mkdir(parents=True, exist_ok=True)
        write_tum(out / sid / "traj_est.txt", traj)
        log.info("%s: estimated %d poses", sid, len(traj))


def _trajectory_for(cfg: RunConfig, sid: str, gt):
    from .io import FormatError, read_tum

    if not cfg.traj_dir:
        return gt
    try:
        est = read_tum(Path(cfg.traj_dir) / sid / "traj_est.txt")
    except FormatError as e:
        raise CliError(str(e)) from e
    if len(est) != len(gt):
        raise CliError(f"{sid}: trajectory has {len(est)} frames, ground truth has {len(gt)}", EXIT_MISMATCH)
    return est


def cmd_align(cfg: RunConfig, out: Path, threads: int) -> None:
    from .align import AlignError, AlignProblem, AlignWeights, align_hand, trace_contacts, visible_vertices
    from .align import ContactPairs, write_align_report
    from .io import write_ply
    from .synth.hand import HandMesh

    _, manifest, ids, load = _load_dataset(cfg)
    all_ids = manifest.ids()
    weights = AlignWeights(cfg.align_lambda_contact, cfg.align_lambda_kpoints, cfg.align_lambda_vsmooth)
    aligned, skipped = 0, []
    for sid in ids:
        rec = load(sid)
        traj = _trajectory_for(cfg, sid, rec.trajectory)
        # the initial hand is the ground-truth hand under a seeded scale/offset
        rng = np.random.default_rng(_stream_seed(cfg.seed, all_ids.index(sid), 0xA1))
        s0 = float(rng.uniform(1.1, 1.4))
        d = rng.normal(size=3)
        t0 = 0.02 * d / np.linalg.norm(d)
        init = HandMesh(
            type(rec.hand.mesh)((rec.hand.vertices - t0) / s0, rec.hand.mesh.triangles.copy(), rec.hand.normals.copy()),
            (rec.hand.keypoints - t0) / s0,
        )
        pairs = []
        for fr, pose in zip(rec.frames, traj.poses):
            vis = visible_vertices(rec.hand, rec.intrinsics, fr.pose, fr.depth, fr.hmask, cfg.align_vis_tol)
            cp = trace_contacts(vis, rec.hand, rec.object_mesh, cfg.align_d_max, fr.index)
            pairs.append(ContactPairs(cp.vertex, init.vertices[cp.vertex], cp.obj_pts, fr.index))
        if sum(len(p) for p in pairs) == 0:
            log.warning("%s: no visible contacts within %.3f m; skipped", sid, cfg.align_d_max)
            skipped.append(sid)
            continue
        try:
            problem = AlignProblem(pairs, init.vertices, rec.intrinsics, list(traj.poses), weights)
            res = align_hand(problem, iters=cfg.align_iters)
        except AlignError as e:
            raise CliError(f"{sid}: {e}") from e
        dd = out / sid
        dd.mkdir(parents=True, exist_ok=True)
        write_align_report(dd / "align_report.csv", res)
        write_ply(dd / "hand_aligned.ply", init.scaled_translated(res.params.s, res.params.t).mesh)
        aligned += 1
        log.info("%s: s=%.4f t=%s (%d pairs)", sid, res.params.s, np.round(res.params.t, 4), sum(map(len, pairs)))
    (out / "align_skipped.txt").write_text("".join(f"{s}\n" for s in skipped))
    if not aligned:
        raise CliError("no sequence had visible contacts")


def cmd_eval(cfg: RunConfig, out: Path, threads: int) -> None:
    from .io import FormatError, read_ply
    from .metrics import MetricError, evaluate, write_report_csv

    _, _, ids, load = _load_dataset(cfg)
    rows = {}
    for sid in ids:
        rec = load(sid)
        if cfg.eval_gt_as_pred:
            pred, est = rec.object_mesh, rec.trajectory
        else:
            pred = est = None
            if cfg.recon_dir:
                try:
                    pred = read_ply(Path(cfg.recon_dir) / sid / "recon.ply")
                except FormatError as e:
                    raise CliError(str(e)) from e
            if cfg.traj_dir:
                est = _trajectory_for(cfg, sid, rec.trajectory)
        try:
            rows[sid] = evaluate(pred, rec.object_mesh, est, rec.trajectory, cfg.eval_samples, cfg.seed)
        except MetricError as e:
            raise CliError(f"{sid}: {e}") from e
    write_report_csv(out / "metrics.csv", rows)
    log.info("wrote metrics for %d sequences", len(rows))


# ---------------------------------------------------------------------------
# report


def _read_table(path: Path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        rows = [row for row in r if row]
    if header is None:
        raise CliError(f"{path}: empty CSV")
    return header, rows


def _plot_csv(path: Path, dest: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .align import REPORT_HEADER
    from .metrics import REPORT_FIELDS
    from .model.train import LOSS_HEADER

    header, rows = _read_table(path)
    out = dest / (path.stem + ".png")
    if header == LOSS_HEADER:
        a = np.array(rows, dtype=float).reshape(-1, 4)
        fig, ax = plt.subplots(figsize=(6, 4))
        for k, name in enumerate(("mask", "voxel", "total"), 1):
            ax.plot(a[:, 0], a[:, k], marker="o", ms=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("flow-matching loss")
        ax.legend()
    elif header == REPORT_HEADER:
        a = np.array(rows, dtype=float).reshape(-1, len(REPORT_HEADER))
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(10, 4))
        for k, name in enumerate(REPORT_HEADER[1:5], 1):
            ax.plot(a[:, 0], np.maximum(a[:, k], 1e-16), label=name)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.legend()
        bx.plot(a[:, 0], a[:, 5])
        bx.set_xlabel("iteration")
        bx.set_ylabel("scale s")
    elif header == ["sequence", *REPORT_FIELDS]:
        names = [r[0] for r in rows if r[0] != "mean"]
        a = np.array([[float(v) for v in r[1:]] for r in rows if r[0] != "mean"]).reshape(len(names), -1)
        fig, axes = plt.subplots(2, 3, figsize=(12, 6))
        for k, (ax, name) in enumerate(zip(axes.ravel(), REPORT_FIELDS)):
            ax.bar(np.arange(len(names)), a[:, k])
            ax.set_title(name)
            ax.set_xticks(np.arange(len(names)), names, rotation=90, fontsize=6)
    else:
        raise CliError(f"{path}: unrecognised CSV header {header}")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def cmd_report(cfg: RunConfig, out: Path | None, inputs: list[str]) -> None:
    paths = []
    for p in map(Path, inputs):
        if p.is_dir():
            paths += sorted(q for q in p.rglob("*.csv"))
        elif p.exists():
            paths.append(p)
        else:
            raise CliError(f"{p}: not found")
    if not paths:
        raise CliError("no CSV files to report")
    for p in paths:
        dest = out if out is not None else p.parent
        dest.mkdir(parents=True, exist_ok=True)
        log.info("wrote %s", _plot_csv(p, dest))


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "pose": cmd_pose,
    "align": cmd_align,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=0, help="worker processes for data generation (0 = auto)")
    p = argparse.ArgumentParser(prog="hoirecon", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    rp = sub.add_parser("report", parents=[common], help="render PNG plots next to loss, metric or alignment CSVs")
    rp.add_argument("inputs", nargs="+", metavar="csv-or-dir")
    return p


def _split_overrides(items) -> dict[str, str]:
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"expected key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


def _resolve_threads(n: int) -> int:
    if n < 0:
        raise ConfigError("--threads must be >= 0")
    if n == 0:
        import os

        return max(1, os.cpu_count() or 1)
    return n


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = _split_overrides(getattr(args, "overrides", []))
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        threads = _resolve_threads(args.threads)
        # torch stays single-threaded so outputs are byte-identical across machines
        import torch

        torch.set_num_threads(1)
        if args.command == "report":
            out = Path(args.out) if args.out else None
            if out is not None:
                cfg.write(out)
            cmd_report(cfg, out, args.inputs)
        else:
            if not args.out:
                raise ConfigError("--out is required")
            out = Path(args.out)
            cfg.write(out)
            COMMANDS[args.command](cfg, out, threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
