"""Joint flow-matching training and Euler sampling of the dual-branch model.

Latents live in ``{-1, 1}``: occupancy and mask targets are mapped through
``2 * value - 1`` and sampled states are binarized at 0 (equivalently 0.5 on
the sigmoid scale).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from ..flow import DEFAULT_STEPS, FlowError, LossWeights, cfm_loss, euler_integrate, joint_loss, reverse_field
from ..mesh import MaskImage, VoxelGrid
from .features import Conditioning, GridSpec, build_conditioning, downsample_mask, encode_frames, inpaint_masks
from .network import DualBranchDenoiser, ModelConfig

log = logging.getLogger(__name__)

LOSS_HEADER = ["epoch", "loss_2d", "loss_3d", "loss_total"]


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedSequence:
    """Per-sequence tensors reused across training steps."""

    frames: list
    intr: object
    spec: GridSpec
    image: np.ndarray  # (T, g, g, C)
    hand: np.ndarray
    cmask: np.ndarray  # (T, m, m) bool
    omask: np.ndarray  # (T, m, m) bool
    occupancy: np.ndarray  # (r, r, r) bool

    def __len__(self):
        return len(self.frames)


def grid_spec_for(rec, cfg: ModelConfig) -> GridSpec:
    if rec.spec.voxel_res != cfg.r:
        raise TrainingError(f"sequence voxel resolution {rec.spec.voxel_res} != model r={cfg.r}")
    return GridSpec.cube(cfg.r, rec.spec.object_extent)


def prepare_sequence(rec, cfg: ModelConfig) -> PreparedSequence:
    img, hand = encode_frames(rec.frames, cfg.g, cfg.sub)
    return PreparedSequence(
        frames=rec.frames,
        intr=rec.intrinsics,
        spec=grid_spec_for(rec, cfg),
        image=img,
        hand=hand,
        cmask=np.stack([downsample_mask(f.cmask.values, cfg.m) for f in rec.frames]),
        omask=np.stack([downsample_mask(f.omask.values, cfg.m) for f in rec.frames]),
        occupancy=rec.object_grid.binary(),
    )


def conditioning_for(seq: PreparedSequence, idx, cfg: ModelConfig) -> Conditioning:
    idx = list(idx)
    return build_conditioning(
        [seq.frames[i] for i in idx], seq.intr, seq.spec, cfg.g, cfg.m, cfg.sub,
        encoded=(seq.image[idx], seq.hand[idx]),
    )


def stack_conditioning(conds: list[Conditioning], dtype=torch.float32) -> dict:
    def t(name):
        return torch.from_numpy(np.stack([getattr(c, name) for c in conds])).to(dtype)

    return {k: t(k) for k in ("image", "hand", "prior_volume", "prior_masks")}


@dataclass
class TrainConfig:
    epochs: int = 35
    batch_size: int = 8
    lr: float = 1e-3
    beta: float = 1.0
    seed: int = 0
    grad_clip: float = 1.0
    warmup_steps: int = 100


@dataclass
class EpochLoss:
    epoch: int
    loss_2d: float
    loss_3d: float
    loss_total: float


def _batch(seqs, order, N, rng, cfg, dtype):
    conds, occ, masks = [], [], []
    for s in order:
        seq = seqs[s]
        n = min(N, len(seq))
        idx = np.sort(rng.choice(len(seq), size=n, replace=False))
        if n < N:  # short sequence: repeat frames to keep the batch rectangular
            idx = np.concatenate([idx, idx[: N - n]])
        conds.append(conditioning_for(seq, idx, cfg))
        occ.append(seq.occupancy)
        masks.append(seq.cmask[idx])
    cond = stack_conditioning(conds, dtype)
    geo = torch.from_numpy(2.0 * np.stack(occ) - 1.0).to(dtype)
    msk = torch.from_numpy(2.0 * np.stack(masks) - 1.0).to(dtype)
    return cond, geo, msk


def train(
    model: DualBranchDenoiser,
    seqs: list[PreparedSequence],
    tcfg: TrainConfig,
    loss_csv=None,
    on_epoch=None,
) -> list[EpochLoss]:
    """Adam on the joint loss. Per step: one view count ``N`` drawn from the
    configured range for the whole batch, and one ``t`` per sample shared by
    both branches. Deterministic given ``tcfg.seed``."""
    if not seqs:
        raise TrainingError("empty training set")
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    weights = LossWeights(tcfg.beta)
    rng = np.random.default_rng([tcfg.seed, 0x7A1])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: min(1.0, (k + 1) / max(tcfg.warmup_steps, 1)))
    history = []
    writer = None
    fh = None
    if loss_csv is not None:
        fh = open(loss_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
    try:
        model.train()
        step = 0
        for epoch in range(tcfg.epochs):
            perm = rng.permutation(len(seqs))
            sums = np.zeros(3)
            count = 0
            for b0 in range(0, len(perm), tcfg.batch_size):
                order = perm[b0: b0 + tcfg.batch_size]
                N = int(rng.integers(cfg.n_min, cfg.n_max + 1))
                cond, geo0, msk0 = _batch(seqs, order, N, rng, cfg, dtype)
                B = len(order)
                t = torch.rand(B, generator=gen, dtype=dtype)
                n_geo = torch.randn(geo0.shape, generator=gen, dtype=dtype)
                n_msk = torch.randn(msk0.shape, generator=gen, dtype=dtype)
                tg = t.view(B, 1, 1, 1)
                tm = t.view(B, 1, 1, 1)
                x_geo = (1 - tg) * geo0 + tg * n_geo
                x_msk = (1 - tm) * msk0 + tm * n_msk
                v_geo, v_msk = model(cond, x_geo, x_msk, t)
                l2 = cfm_loss(v_msk, n_msk - msk0)
                l3 = cfm_loss(v_geo, n_geo - geo0)
                loss = joint_loss(l2, l3, weights)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}: loss_2d={float(l2)} loss_3d={float(l3)}"
                    )
                opt.zero_grad()
                loss.backward()
                if tcfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
                opt.step()
                sched.step()
                step += 1
                sums += [l2.item(), l3.item(), loss.item()]
                count += 1
            rec = EpochLoss(epoch, *(float(x) for x in sums / count))
            history.append(rec)
            log.info("epoch %d loss_2d=%.4f loss_3d=%.4f total=%.4f", epoch, rec.loss_2d, rec.loss_3d, rec.loss_total)
            if writer is not None:
                writer.writerow([epoch, repr(rec.loss_2d), repr(rec.loss_3d), repr(rec.loss_total)])
                fh.flush()
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return history


def read_loss_csv(path) -> list[EpochLoss]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        if next(r) != LOSS_HEADER:
            raise TrainingError(f"{path}: unexpected loss header")
        return [EpochLoss(int(a), float(b), float(c), float(d)) for a, b, c, d in r]


@torch.no_grad()
def sample(
    model: DualBranchDenoiser,
    cond: Conditioning,
    spec: GridSpec,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
    threshold: float = 0.0,
    inpaint: bool = True,
) -> tuple[VoxelGrid, list[MaskImage]]:
    """Jointly integrate both branches from noise and binarize the result.

    With ``inpaint`` the masks keep every observed object cell and take the
    model's prediction only in cells the hand touches, the only place the
    object silhouette can be hidden. ``inpaint=False`` returns the raw
    branch output."""
    cfg = model.cfg
    model.eval()
    dtype = next(model.parameters()).dtype
    c = stack_conditioning([cond], dtype)
    gen = torch.Generator().manual_seed(int(seed))
    N = cond.n_frames
    x0 = (
        torch.randn((1, cfg.r, cfg.r, cfg.r), generator=gen, dtype=dtype),
        torch.randn((1, N, cfg.m, cfg.m), generator=gen, dtype=dtype),
    )

    def learned(x, t, cc):
        return model(cc, x[0], x[1], torch.full((1,), float(t), dtype=dtype))

    try:
        geo, msk = euler_integrate(reverse_field(learned), x0, steps, c)
    except FlowError as e:
        raise TrainingError(f"sampling diverged: {e}") from e
    occ = (geo[0] > threshold).double().numpy()
    pred = (msk[0] > threshold).numpy()
    if inpaint and cond.visible is not None and cond.hand_cover is not None:
        pred = inpaint_masks(pred, cond.visible, cond.hand_cover)
    masks = [MaskImage(pred[k]) for k in range(N)]
    return VoxelGrid(occ, spec.origin, spec.cell_size), masks


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
