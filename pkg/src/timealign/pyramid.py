"""Input projection and the stride-2 temporal feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import torch
from torch import nn

from .coords import ReferenceGrid, level_length
from .timeline import FeatureSequence


@dataclass
class PyramidConfig:
    model_dim: int = 64
    num_levels: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        if self.model_dim < 1 or self.num_levels < 1:
            raise ValueError("model_dim and num_levels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")


@dataclass(eq=False)
class FeaturePyramid:
    levels: List[torch.Tensor]  # level l has shape (T_l, D)
    grids: List[ReferenceGrid]

    @property
    def lengths(self) -> list[int]:
        return [z.shape[0] for z in self.levels]


def pyramid_lengths(T1: int, num_levels: int) -> list[int]:
    return [level_length(T1, l) for l in range(1, num_levels + 1)]


class FeaturePyramidNet(nn.Module):
    """Kernel-1 projection followed by ``LayerNorm(Conv_stride2(.))`` per level.

    No activation is applied anywhere: the pyramid is linear up to the
    layer normalization.
    """

    def __init__(self, in_channels: int, cfg: PyramidConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.proj = nn.Conv1d(in_channels, cfg.model_dim, kernel_size=1, bias=False)
        pad = cfg.kernel_size // 2
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.model_dim, cfg.model_dim, cfg.kernel_size, stride=2, padding=pad, bias=False)
            for _ in range(cfg.num_levels - 1)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(cfg.model_dim) for _ in range(cfg.num_levels - 1))

    def embed(self, x) -> torch.Tensor:
        """Project a ``(T0, C)`` matrix (or FeatureSequence) to ``(T0, D)``."""
        if isinstance(x, FeatureSequence):
            x = torch.as_tensor(x.values, dtype=self.proj.weight.dtype)
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        return self.proj(x.t().unsqueeze(0)).squeeze(0).t()

    def build_pyramid(self, z1: torch.Tensor) -> List[torch.Tensor]:
        if z1.shape[0] < 1:
            raise ValueError("empty level-1 features")
        levels = [z1]
        z = z1.t().unsqueeze(0)
        for conv, norm in zip(self.convs, self.norms):
            z = conv(z)
            z_t = norm(z.squeeze(0).t())
            levels.append(z_t)
            z = z_t.t().unsqueeze(0)
        return levels

    def forward(self, x) -> List[torch.Tensor]:
        return self.build_pyramid(self.embed(x))
