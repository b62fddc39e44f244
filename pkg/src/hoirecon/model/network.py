"""Dual-branch denoiser: a geometry branch over a voxel latent and a mask
branch over per-frame 2D latents, exchanging information through
cross-attention at paired depths.

Token layouts
    geometry  ``(B, Tg, d)`` with ``Tg = (r / geo_patch) ** 3``
    masks     ``(B, N, Tm, d)`` with ``Tm = g * g``; mask patches are aligned
              with the conditioning patch grid (``m / g`` pixels per side)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .features import n_channels


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    M: int = 4  # geometry blocks
    P: int = 4  # mask blocks
    heads: int = 4
    d: int = 64
    g: int = 8
    r: int = 16
    m: int = 32
    n_min: int = 2
    n_max: int = 6
    geo_patch: int = 4
    sub: int = 4
    mlp_ratio: int = 4
    prior_channels: int = 2

    def __post_init__(self):
        if self.M < 1 or self.P < 1:
            raise ModelError("M and P must be >= 1")
        if self.d % self.heads:
            raise ModelError("d must be divisible by heads")
        if self.m % self.g:
            raise ModelError("mask size must be a multiple of the patch grid")
        if self.r % self.geo_patch:
            raise ModelError("voxel resolution must be a multiple of geo_patch")
        if not 1 <= self.n_min <= self.n_max:
            raise ModelError("invalid view-count range")

    @property
    def mask_patch(self) -> int:
        return self.m // self.g

    @property
    def geo_tokens(self) -> int:
        return (self.r // self.geo_patch) ** 3

    @property
    def feat_channels(self) -> int:
        return n_channels(self.sub)

    def to_dict(self) -> dict:
        return asdict(self)


def cross_attention(xq, xkv, wq, bq, wk, bk, wv, bv, wo, bo, heads: int):
    """Scaled dot-product multi-head attention. ``xq`` is ``(B, Tq, d)`` and
    ``xkv`` is ``(B, Tk, d)``; returns ``(B, Tq, d)``."""
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // heads
    q = F.linear(xq, wq, bq).view(B, Tq, heads, dh).transpose(1, 2)
    k = F.linear(xkv, wk, bk).view(B, Tk, heads, dh).transpose(1, 2)
    v = F.linear(xkv, wv, bv).view(B, Tk, heads, dh).transpose(1, 2)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if not torch.isfinite(logits).all():
        raise ModelError("non-finite attention logits")
    out = torch.softmax(logits, dim=-1) @ v
    return F.linear(out.transpose(1, 2).reshape(B, Tq, d), wo, bo)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, xq, xkv):
        return cross_attention(
            xq, xkv,
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.o.weight, self.o.bias,
            self.heads,
        )


class FeedForward(nn.Module):
    def __init__(self, d: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class GeoBlock(nn.Module):
    """Self-attention, then frame-weighted cross-attention to per-frame mask
    tokens, then feed-forward; pre-norm residual sublayers."""

    def __init__(self, d: int, heads: int, ratio: int = 4):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads)
        self.norm_ff = nn.LayerNorm(d)
        self.ff = FeedForward(d, ratio)

    def forward(self, y, x, w):
        """``y`` (B, Tg, d), ``x`` (B, N, Tm, d), ``w`` (B, N)."""
        B, N, Tm, d = x.shape
        if N == 0:
            raise ModelError("geometry block needs at least one frame")
        h = self.norm_sa(y)
        y = y + self.self_attn(h, h)
        Tg = y.shape[1]
        q = self.norm_q(y).unsqueeze(1).expand(B, N, Tg, d).reshape(B * N, Tg, d)
        kv = self.norm_kv(x).reshape(B * N, Tm, d)
        ca = self.cross_attn(q, kv).view(B, N, Tg, d)
        y = y + (w[:, :, None, None] * ca).sum(dim=1)
        return y + self.ff(self.norm_ff(y))


class MaskBlock(nn.Module):
    """Per-frame self-attention, cross-attention to geometry tokens and
    feed-forward; parameters shared across frames."""

    def __init__(self, d: int, heads: int, ratio: int = 4):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads)
        self.norm_ff = nn.LayerNorm(d)
        self.ff = FeedForward(d, ratio)

    def forward(self, x, y):
        B, N, Tm, d = x.shape
        Tg = y.shape[1]
        xf = x.reshape(B * N, Tm, d)
        h = self.norm_sa(xf)
        xf = xf + self.self_attn(h, h)
        kv = self.norm_kv(y).unsqueeze(1).expand(B, N, Tg, d).reshape(B * N, Tg, d)
        xf = xf + self.cross_attn(self.norm_q(xf), kv)
        xf = xf + self.ff(self.norm_ff(xf))
        return xf.view(B, N, Tm, d)


def layer_pairing(M: int, P: int) -> tuple[int, ...]:
    """Mask-block depth paired with each geometry block: ``floor(j * P / M)``."""
    if M < 1 or P < 1:
        raise ModelError("M and P must be >= 1")
    return tuple(j * P // M for j in range(M))


def _geo_level_for_mask(pairing: tuple[int, ...], i: int) -> int:
    """Deepest geometry level whose paired mask depth does not exceed ``i``."""
    return max(j for j, p in enumerate(pairing) if p <= i)


class FuseHandImage(nn.Module):
    """Per-patch concatenation of image and hand features mapped to ``d``
    channels by a two-layer perceptron."""

    def __init__(self, c_img: int, c_hand: int, d: int):
        super().__init__()
        self.c_img, self.c_hand = c_img, c_hand
        self.fc1 = nn.Linear(c_img + c_hand, 2 * d)
        self.fc2 = nn.Linear(2 * d, d)

    def forward(self, img, hand):
        if img.shape[:-1] != hand.shape[:-1]:
            raise ModelError(f"patch grid mismatch {tuple(img.shape[:-1])} vs {tuple(hand.shape[:-1])}")
        if img.shape[-1] != self.c_img or hand.shape[-1] != self.c_hand:
            raise ModelError("feature channel count mismatch")
        return self.fc2(F.gelu(self.fc1(torch.cat([img, hand], dim=-1))))


class FusionScore(nn.Module):
    """Softmax over a learned score of each frame's pooled features."""

    def __init__(self, d: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.score = nn.Linear(d, 1)

    def forward(self, feats):
        """``feats`` (B, N, T, d) -> weights (B, N)."""
        if feats.shape[1] < 1:
            raise ModelError("need at least one frame")
        s = self.score(self.norm(feats.mean(dim=2))).squeeze(-1)
        return torch.softmax(s, dim=1)


def compute_fusion_weights(scorer: FusionScore, feats):
    return scorer(feats)


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of ``t`` in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def patchify_volume(v, p: int):
    """(B, C, r, r, r) -> (B, (r/p)^3, C p^3)."""
    B, C, r = v.shape[0], v.shape[1], v.shape[-1]
    n = r // p
    v = v.reshape(B, C, n, p, n, p, n, p).permute(0, 2, 4, 6, 1, 3, 5, 7)
    return v.reshape(B, n**3, C * p**3)


def unpatchify_volume(tok, p: int, r: int):
    """(B, (r/p)^3, p^3) -> (B, r, r, r)."""
    B = tok.shape[0]
    n = r // p
    v = tok.reshape(B, n, n, n, p, p, p).permute(0, 1, 4, 2, 5, 3, 6)
    return v.reshape(B, r, r, r)


def patchify_masks(x, p: int):
    """(B, N, C, m, m) -> (B, N, (m/p)^2, C p^2); tokens row-major."""
    B, N, C, m = x.shape[0], x.shape[1], x.shape[2], x.shape[-1]
    n = m // p
    x = x.reshape(B, N, C, n, p, n, p).permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B, N, n * n, C * p * p)


def unpatchify_masks(tok, p: int, m: int):
    B, N = tok.shape[:2]
    n = m // p
    x = tok.reshape(B, N, n, n, p, p).permute(0, 1, 2, 4, 3, 5)
    return x.reshape(B, N, m, m)


class DualBranchDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        c = cfg.feat_channels
        pg, pm = cfg.geo_patch, cfg.mask_patch
        self.pairing = layer_pairing(cfg.M, cfg.P)
        self.fuse = FuseHandImage(c, c, d)
        self.fusion_score = FusionScore(d)
        self.geo_in = nn.Linear((1 + cfg.prior_channels) * pg**3, d)
        self.mask_in = nn.Linear(2 * pm * pm, d)
        self.geo_pos = nn.Parameter(0.02 * torch.randn(cfg.geo_tokens, d))
        self.mask_pos = nn.Parameter(0.02 * torch.randn(cfg.g * cfg.g, d))
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.geo_blocks = nn.ModuleList(GeoBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.M))
        self.mask_blocks = nn.ModuleList(MaskBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.P))
        self.geo_norm = nn.LayerNorm(d)
        self.geo_out = nn.Linear(d, pg**3)
        self.mask_norm = nn.LayerNorm(d)
        self.mask_out = nn.Linear(d, pm * pm)

    def conditioning_tokens(self, img, hand):
        """(B, N, g, g, C) pairs -> fused tokens (B, N, g*g, d)."""
        B, N, g = img.shape[:3]
        if g != self.cfg.g or img.shape[3] != g:
            raise ModelError(f"feature grid {g}x{img.shape[3]} does not match configured g={self.cfg.g}")
        return self.fuse(img, hand).reshape(B, N, g * g, self.cfg.d)

    def forward(self, cond, x_geo, x_mask, t, weights=None):
        """``cond`` is a mapping with ``image``, ``hand`` (B, N, g, g, C),
        ``prior_volume`` (B, C_p, r, r, r) and ``prior_masks`` (B, N, m, m).
        ``x_geo`` (B, r, r, r), ``x_mask`` (B, N, m, m), ``t`` (B,).
        Returns ``(v_geo, v_mask)`` with the latent shapes."""
        cfg = self.cfg
        B, N = x_mask.shape[:2]
        if N < 1:
            raise ModelError("need at least one frame")
        c = self.conditioning_tokens(cond["image"], cond["hand"])
        w = self.fusion_score(c) if weights is None else weights
        temb = self.time_mlp(timestep_embedding(t, cfg.d))  # (B, d)

        geo_src = torch.cat([x_geo.unsqueeze(1), cond["prior_volume"]], dim=1)
        y = self.geo_in(patchify_volume(geo_src, cfg.geo_patch)) + self.geo_pos + temb[:, None]
        mask_src = torch.stack([x_mask, cond["prior_masks"]], dim=2)
        x = self.mask_in(patchify_masks(mask_src, cfg.mask_patch)) + self.mask_pos + c + temb[:, None, None]

        ys = [y]
        xs = [x]

        def advance_masks(upto):
            while len(xs) - 1 < upto:
                i = len(xs) - 1
                xn = self.mask_blocks[i](xs[i], ys[_geo_level_for_mask(self.pairing, i)])
                if not torch.isfinite(xn).all():
                    raise ModelError(f"non-finite activations in mask block {i}")
                xs.append(xn)

        for j, i in enumerate(self.pairing):
            advance_masks(i)
            yn = self.geo_blocks[j](ys[j], xs[i], w)
            if not torch.isfinite(yn).all():
                raise ModelError(f"non-finite activations in geometry block {j}")
            ys.append(yn)
        advance_masks(cfg.P)

        v_geo = unpatchify_volume(self.geo_out(self.geo_norm(ys[-1])), cfg.geo_patch, cfg.r)
        v_mask = unpatchify_masks(self.mask_out(self.mask_norm(xs[-1])), cfg.mask_patch, cfg.m)
        return v_geo, v_mask
