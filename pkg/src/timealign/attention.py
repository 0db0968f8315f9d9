"""Multi-scale 1D deformable attention and the encoder/decoder layers."""

from __future__ import annotations

import math
from typing import Callable, List, Optional

import torch
import torch.nn.functional as F
from torch import nn


def deformable_sample(level_features: torch.Tensor, location) -> torch.Tensor:
    """Linearly interpolate a ``(T, D)`` matrix at a fractional row index.

    Locations outside ``[0, T-1]`` are clamped to the border rows.
    """
    loc = torch.as_tensor(location, dtype=level_features.dtype)
    out = sample_level(level_features.unsqueeze(1), loc.reshape(1, 1, 1))
    return out.reshape(-1)


def sample_level(values: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Sample per-head values at fractional indices.

    values: ``(T, H, Dh)``; loc: ``(N, H, P)`` fractional indices, clamped to
    ``[0, T-1]``.  Returns ``(N, H, P, Dh)``.
    """
    return _grid_sample(values, loc).permute(2, 0, 3, 1)


def _grid_sample(values: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    # returns (H, Dh, N, P); border padding + align_corners == clamp then lerp
    T = values.shape[0]
    inp = values.permute(1, 2, 0).unsqueeze(2)
    loc = loc.transpose(0, 1)
    if T > 1:
        x = loc.clamp(0.0, T - 1) * (2.0 / (T - 1)) - 1.0
    else:
        x = loc * 0.0
    grid = torch.stack([x, torch.zeros_like(x)], dim=-1)
    return F.grid_sample(inp, grid, mode="bilinear", padding_mode="border", align_corners=True)


class DeformableAttention(nn.Module):
    """Sparse attention over ``levels x points`` sampled locations per head.

    ``locate`` maps the raw offset tensor ``(N, H, L, P)`` to fractional
    indices on each level, so callers decide whether offsets are index
    units (encoder) or fractions of a segment width (decoder).
    """

    def __init__(self, dim: int, heads: int, levels: int, points: int, init_span: float = 1.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.sampling_offsets = nn.Linear(dim, heads * levels * points)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset_parameters(init_span)

    def _reset_parameters(self, init_span: float):
        nn.init.zeros_(self.sampling_offsets.weight)
        # heads look in alternating directions, points spread outward
        direction = torch.tensor([(-1.0) ** h for h in range(self.heads)]).view(-1, 1, 1)
        steps = torch.arange(1, self.points + 1, dtype=torch.float32).view(1, 1, -1) / self.points
        bias = (direction * steps * init_span).expand(self.heads, self.levels, self.points)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(bias.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(
        self,
        query: torch.Tensor,
        values: List[torch.Tensor],
        locate: Callable[[torch.Tensor], List[torch.Tensor]],
        return_weights: bool = False,
    ):
        N = query.shape[0]
        H, L, P = self.heads, self.levels, self.points
        Dh = self.dim // H
        raw = self.sampling_offsets(query).view(N, H, L, P)
        weights = self.attention_weights(query).view(N, H, L * P).softmax(-1).view(N, H, L, P)
        locations = locate(raw)
        out = query.new_zeros(H, Dh, N)
        for l, v in enumerate(values):
            v = self.value_proj(v).view(-1, H, Dh)
            sampled = _grid_sample(v, locations[l])  # (H, Dh, N, P)
            w = weights[:, :, l].transpose(0, 1).unsqueeze(1)  # (H, 1, N, P)
            out = out + (sampled * w).sum(-1)
        out = self.output_proj(out.permute(2, 0, 1).reshape(N, self.dim))
        if return_weights:
            return out, weights
        return out


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden)
        self.linear2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.linear2(F.relu(self.linear1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim, ffn_dim, heads, levels, points, self_attn=True):
        super().__init__()
        self.use_self_attn = self_attn
        self.self_attn = DeformableAttention(dim, heads, levels, points) if self_attn else None
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, src, pos, level_sizes, locate):
        if self.self_attn is not None:
            levels = list(torch.split(src, level_sizes))
            src = self.norm1(src + self.self_attn(src + pos, levels, locate))
        return self.norm2(src + self.ffn(src))


class DecoderLayer(nn.Module):
    def __init__(self, dim, ffn_dim, heads, levels, points, self_attn=True, cross_attn=True):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True) if self_attn else None
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = DeformableAttention(dim, heads, levels, points, init_span=0.5) if cross_attn else None
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, query_pos, memory_levels, locate):
        if self.self_attn is not None:
            q = (tgt + query_pos).unsqueeze(0)
            attn, _ = self.self_attn(q, q, tgt.unsqueeze(0), need_weights=False)
            tgt = self.norm1(tgt + attn.squeeze(0))
        if self.cross_attn is not None:
            tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, memory_levels, locate))
        return self.norm3(tgt + self.ffn(tgt))


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, num_layers=2, zero_last=False):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_embedding(pos: torch.Tensor, dim: int, temperature: float = 10000.0, scale: float = 1.0) -> torch.Tensor:
    """Sinusoidal embedding of a ``(N,)`` coordinate into ``(N, dim)``."""
    half = dim // 2
    freq = temperature ** (-torch.arange(half, dtype=pos.dtype, device=pos.device) / max(half, 1))
    angles = (pos * scale).unsqueeze(-1) * freq
    emb = torch.cat([angles.sin(), angles.cos()], dim=-1)
    if emb.shape[-1] < dim:
        emb = F.pad(emb, (0, dim - emb.shape[-1]))
    return emb
