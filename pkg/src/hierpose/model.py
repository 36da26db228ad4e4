"""Hierarchical spatial/temporal transformer denoiser."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .skeleton import SkeletonTopology, bones_to_joints, compose_t


@dataclass
class DenoiserConfig:
    num_joints: int = 17
    num_frames: int = 27
    dim: int = 64
    num_loops: int = 2
    num_heads: int = 4
    dropout: float = 0.0
    ffn_ratio: int = 2
    timestep_embedding: bool = True
    input_bias: bool = True
    use_hierarchical_embedding: bool = True
    use_hrst: bool = True
    use_hrtt: bool = True
    disentangle_input: bool = True
    disentangle_output: bool = False

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.num_loops < 1:
            raise ValueError("num_loops must be >= 1")

    @property
    def in_channels(self) -> int:
        # 2D joint + 3D noisy data (length + direction, or raw coordinates)
        return 2 + (4 if self.disentangle_input else 3)

    def to_json(self) -> dict:
        return asdict(self)


def scaled_attention(q, k, v, bias_fn=None):
    """Softmax(Q K^T / sqrt(d)) V for (..., Z, d) tensors.

    ``bias_fn`` may rewrite the pre-softmax map before normalization. Returns the
    output and the softmaxed weights.
    """
    a = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias_fn is not None:
        a = bias_fn(a)
    w = a.softmax(dim=-1)
    return w @ v, w


def hrst_adjust(a, triplets):
    """Average every (j, j_c) and (j_c, j) entry with the parent edge weight A[j_p, j].

    Parent-edge values are read from the unmodified map, so the result does not
    depend on triplet order. Works on numpy arrays or torch tensors of shape (..., J, J).
    """
    if not triplets:
        return a
    jp, j, jc = (np.asarray(x) for x in zip(*triplets))
    J = a.shape[-1]
    if max(jp.max(), j.max(), jc.max()) >= J or min(jp.min(), j.min(), jc.min()) < 0:
        raise IndexError(f"triplet index outside a {J}x{J} map")
    parent_edge = a[..., jp, j]
    fwd = (a[..., j, jc] + parent_edge) / 2.0
    back = (a[..., jc, j] + parent_edge) / 2.0
    out = a.clone() if isinstance(a, torch.Tensor) else a.copy()
    out[..., j, jc] = fwd
    out[..., jc, j] = back
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.last_weights = None

    def split(self, x):
        *lead, z, d = x.shape
        return x.reshape(*lead, z, self.heads, d // self.heads).transpose(-2, -3)

    def merge(self, x):
        x = x.transpose(-2, -3)
        return x.reshape(*x.shape[:-2], -1)

    def forward(self, x, bias_fn=None):
        q, k, v = self.split(self.q(x)), self.split(self.k(x)), self.split(self.v(x))
        out, w = scaled_attention(q, k, v, bias_fn)
        self.last_weights = w.detach()
        return self.drop(self.proj(self.merge(out)))


class FeedForward(nn.Sequential):
    def __init__(self, dim, ratio, dropout):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim), nn.Dropout(dropout))


class SpatialBlock(nn.Module):
    """Per-frame attention over joints; with triplets the map goes through hrst_adjust."""

    def __init__(self, cfg: DenoiserConfig, triplets=()):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.num_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_ratio, cfg.dropout)
        self.triplets = tuple(triplets)

    def forward(self, x):  # (B, N, J, C)
        bias = (lambda a: hrst_adjust(a, self.triplets)) if self.triplets else None
        x = x + self.attn(self.norm1(x), bias)
        return x + self.ffn(self.norm2(x))


class TemporalBlock(nn.Module):
    """Per-joint attention over frames.

    With a child-averaging matrix the block adds the cross map between the joint's
    queries and keys of its child-averaged features to the self map before softmax.
    """

    def __init__(self, cfg: DenoiserConfig, child_mean: torch.Tensor | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.num_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_ratio, cfg.dropout)
        if child_mean is not None:
            self.register_buffer("child_mean", child_mean, persistent=False)
        else:
            self.child_mean = None

    def attend(self, f):  # f: (B, J, N, C)
        attn = self.attn
        q, k, v = attn.split(attn.q(f)), attn.split(attn.k(f)), attn.split(attn.v(f))
        bias_fn = None
        if self.child_mean is not None:
            f_c = torch.einsum("ij,bjnc->binc", self.child_mean.to(f.dtype), f)
            k_c = attn.split(attn.k(f_c))
            a_c = q @ k_c.transpose(-1, -2) / math.sqrt(q.shape[-1])
            bias_fn = lambda a_s: a_s + a_c  # noqa: E731
        out, w = scaled_attention(q, k, v, bias_fn)
        attn.last_weights = w.detach()
        return attn.drop(attn.proj(attn.merge(out)))

    def forward(self, x):  # (B, N, J, C)
        x = x.transpose(1, 2)
        x = x + self.attend(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x.transpose(1, 2)


def child_mean_matrix(topo: SkeletonTopology) -> torch.Tensor:
    """Row j averages joint j with its children."""
    J = topo.num_joints
    m = torch.zeros(J, J)
    for j in range(J):
        group = [j] + topo.children(j)
        m[j, group] = 1.0 / len(group)
    return m


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class HSTDenoiser(nn.Module):
    """Input lift + HSP/TP embeddings, one plain spatial/temporal layer, then
    ``num_loops`` rounds of hierarchical spatial and temporal layers, then a
    per-joint regression head."""

    def __init__(self, cfg: DenoiserConfig, topo: SkeletonTopology):
        super().__init__()
        if cfg.num_joints != topo.num_joints:
            raise ValueError(f"config has {cfg.num_joints} joints, topology {topo.num_joints}")
        self.cfg = cfg
        self.topo = topo
        d = cfg.dim
        self.embed = nn.Linear(cfg.in_channels, d, bias=cfg.input_bias)
        self.joint_pos = nn.Parameter(torch.zeros(cfg.num_joints, d))
        self.level_pos = nn.Parameter(torch.zeros(topo.num_levels, d))
        self.temporal_pos = nn.Parameter(torch.zeros(cfg.num_frames, d))
        for p in (self.joint_pos, self.level_pos, self.temporal_pos):
            nn.init.trunc_normal_(p, std=0.02)
        self.register_buffer("hierarchy", torch.tensor(np.asarray(topo.hierarchy)), persistent=False)
        if cfg.timestep_embedding:
            self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

        self.first_spatial = SpatialBlock(cfg)
        self.first_temporal = TemporalBlock(cfg)
        triplets = topo.triplets if cfg.use_hrst else ()
        cm = child_mean_matrix(topo) if cfg.use_hrtt else None
        self.spatial = nn.ModuleList([SpatialBlock(cfg, triplets) for _ in range(cfg.num_loops)])
        self.temporal = nn.ModuleList([TemporalBlock(cfg, cm) for _ in range(cfg.num_loops)])
        self.head_norm = nn.LayerNorm(d)
        # joints (3) plus, for disentangled output, bone length (1) and direction (3)
        self.head = nn.Linear(d, 7 if cfg.disentangle_output else 3)

    def hsp(self):
        emb = self.joint_pos
        if self.cfg.use_hierarchical_embedding:
            emb = emb + self.level_pos[self.hierarchy]
        return emb

    def embed_inputs(self, noisy: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """noisy: (B, N, J, 4 or 3) per-joint noisy channels, cond: (B, N, J, 2), t: (B,)."""
        if cond.shape[-2] != self.cfg.num_joints:
            raise ValueError(f"condition has {cond.shape[-2]} joints, expected {self.cfg.num_joints}")
        x = self.embed(torch.cat([cond, noisy], dim=-1))
        N = x.shape[1]
        if N > self.cfg.num_frames:
            raise ValueError(f"{N} frames exceed configured {self.cfg.num_frames}")
        x = x + self.hsp() + self.temporal_pos[:N, None, :]
        if self.cfg.timestep_embedding:
            te = self.time_mlp(timestep_embedding(t, self.cfg.dim).to(x.dtype))
            x = x + te[:, None, None, :]
        return x

    def features(self, x):
        x = self.first_temporal(self.first_spatial(x))
        for i, (s, tm) in enumerate(zip(self.spatial, self.temporal)):
            x = tm(s(x))
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after loop {i}")
        return x

    def forward(self, noisy, cond, t, root=None):
        """Return predicted joints (B, N, J, 3).

        ``noisy`` is either per-bone lengths/directions packed as (B, N, J-1, 4) or raw
        joints (B, N, J, 3) depending on ``disentangle_input``. With disentangled output
        the pose is composed from ``root`` (default: the head's root estimate).
        """
        if self.cfg.disentangle_input:
            noisy = bones_to_joints(noisy, self.topo)
        if t.ndim == 0:
            t = t.expand(noisy.shape[0])
        out = self.head(self.head_norm(self.features(self.embed_inputs(noisy, cond, t))))
        joints = out[..., :3]
        if not self.cfg.disentangle_output:
            return joints
        r = self.topo.root
        bone_idx = torch.as_tensor(self.topo.bone_children, device=out.device)
        lengths = out[..., bone_idx, 3:4]
        directions = F.normalize(out[..., bone_idx, 4:7], dim=-1, eps=1e-6)
        if root is None:
            root = joints[..., r, :]
        return compose_t(root, lengths, directions, self.topo)


class DenoiserAdapter:
    """Wrap an HSTDenoiser as the numpy callable expected by the sampler."""

    def __init__(self, model: HSTDenoiser, batch_size: int = 64):
        self.model = model
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, noisy, cond, t):
        model = self.model
        model.eval()
        dtype = next(model.parameters()).dtype
        if hasattr(noisy, "lengths_t"):
            x = np.concatenate([noisy.lengths_t, noisy.directions_t], axis=-1)
        else:
            x = noisy.joints_t
        x = torch.as_tensor(x, dtype=dtype)
        H = x.shape[0]
        c = torch.as_tensor(np.asarray(cond), dtype=dtype).expand(H, *np.shape(cond))
        outs = []
        for s in range(0, H, self.batch_size):
            xb, cb = x[s:s + self.batch_size], c[s:s + self.batch_size]
            tt = torch.full((xb.shape[0],), int(t), dtype=torch.long)
            outs.append(model(xb, cb, tt))
        return torch.cat(outs).double().numpy()
