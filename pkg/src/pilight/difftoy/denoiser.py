"""Transformer denoiser whose attention spans all batch slots of one sample."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import torch
from torch import nn
import torch.nn.functional as F

SlotsLike = Union[torch.Tensor, Sequence[torch.Tensor]]


def _stack_slots(slots: SlotsLike) -> torch.Tensor:
    if isinstance(slots, torch.Tensor):
        if slots.ndim != 4:
            raise ValueError(f"expected (B, S, N, d) tokens, got {tuple(slots.shape)}")
        return slots
    counts = {s.shape[-2] for s in slots}
    if len(counts) != 1:
        raise ValueError(f"all slots need the same token count, got {sorted(counts)}")
    return torch.stack(list(slots), dim=1)


def self_first_order(n_slots: int) -> list:
    return [[i] + [j for j in range(n_slots) if j != i] for i in range(n_slots)]


def cross_batch_attention(slots: SlotsLike, w_q: torch.Tensor, w_k: torch.Tensor,
                          w_v: torch.Tensor, heads: int = 1,
                          key_order: Optional[Sequence[Sequence[int]]] = None) -> torch.Tensor:
    """Attention where slot ``i`` queries keys/values concatenated over every slot.

    ``slots`` is ``(B, S, N, d)`` or a list of ``S`` tensors ``(B, N, d)``.
    The projections are shared by all slots.  ``key_order[i]`` lists the slot
    order used to build slot ``i``'s key/value sequence (self first by
    default).  Returns ``(B, S, N, d_model)``.
    """
    x = _stack_slots(slots)
    b, s, n, _ = x.shape
    q, k, v = x @ w_q.T, x @ w_k.T, x @ w_v.T
    dm = q.shape[-1]
    if dm % heads:
        raise ValueError(f"model dim {dm} not divisible by {heads} heads")
    dh = dm // heads
    order = torch.as_tensor(key_order if key_order is not None else self_first_order(s))
    if tuple(order.shape) != (s, s):
        raise ValueError(f"key_order must be ({s}, {s}), got {tuple(order.shape)}")
    kc = k[:, order].reshape(b, s, s * n, heads, dh).transpose(2, 3)
    vc = v[:, order].reshape(b, s, s * n, heads, dh).transpose(2, 3)
    qh = q.reshape(b, s, n, heads, dh).transpose(2, 3)
    att = torch.softmax(qh @ kc.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    return (att @ vc).transpose(2, 3).reshape(b, s, n, dm)


class CrossBatchAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        y = cross_batch_attention(x, self.q.weight, self.k.weight, self.v.weight, self.heads)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossBatchAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class DenoiserConfig:
    n_slots: int = 4
    n_labels: int = 4
    latent_channels: int = 4
    cond_channels: int = 4
    n_tokens: int = 64
    dim: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


class CrossBatchDenoiser(nn.Module):
    """V-prediction network over ``S`` slots of ``n_tokens`` tokens each.

    Every latent pixel is one token (1x1 patches).  Per-slot conditions are
    concatenated to the noisy latent before the patch embedding; the slot's
    one-hot label, the timestep and a mean-pooled condition summary are added
    to its tokens.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        d, n_tok = cfg.dim, cfg.n_tokens
        self.patch = nn.Linear(cfg.latent_channels + cfg.cond_channels, d)
        self.pos = nn.Parameter(torch.randn(n_tok, d) * 0.02)
        self.label = nn.Linear(cfg.n_labels, d, bias=False)
        self.global_cond = nn.Linear(cfg.cond_channels, d)
        self.time = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.latent_channels)

    def forward(self, z_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
                labels: torch.Tensor) -> torch.Tensor:
        """``z_t (B,S,C,h,w)``, ``cond (B,S,Cc,h,w)``, ``t (B,)``, ``labels (S, n_labels)``."""
        cfg = self.cfg
        b, s, c, h, w = z_t.shape
        if s != cfg.n_slots or cond.shape[:2] != (b, s) or h * w != cfg.n_tokens:
            raise ValueError(f"expected {cfg.n_slots} slots, got z_t {tuple(z_t.shape)}, "
                             f"cond {tuple(cond.shape)}")
        x = torch.cat([z_t, cond], dim=2).flatten(3).transpose(2, 3)  # (B,S,N,C+Cc)
        tok = self.patch(x) + self.pos
        temb = self.time(timestep_embedding(t, cfg.dim).to(tok.dtype))
        tok = tok + temb[:, None, None, :]
        tok = tok + self.label(labels.to(tok.dtype))[None, :, None, :]
        tok = tok + self.global_cond(cond.mean(dim=(3, 4)))[:, :, None, :]
        for blk in self.blocks:
            tok = blk(tok)
        out = self.head(self.norm(tok))  # (B,S,N,C)
        return out.transpose(2, 3).reshape(b, s, c, h, w)


def one_hot_labels(n_slots: int, n_labels: int = None) -> torch.Tensor:
    return F.one_hot(torch.arange(n_slots), n_labels or n_slots).float()
