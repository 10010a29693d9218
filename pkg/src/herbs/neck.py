"""Top-down (FPN) and bottom-up (path aggregation) feature fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeMismatchError

ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": nn.LeakyReLU,
    "gelu": nn.GELU,
    "silu": nn.SiLU,
    "identity": nn.Identity,
}


def make_activation(name: str) -> nn.Module:
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


@dataclass
class FusedFeatures:
    top_down: list[torch.Tensor]
    bottom_up: list[torch.Tensor]

    @property
    def neck_dim(self) -> int:
        return self.bottom_up[0].shape[1]


def _check_ratio(fine: torch.Tensor, coarse: torch.Tensor) -> None:
    fh, fw = fine.shape[-2:]
    ch, cw = coarse.shape[-2:]
    if (fh, fw) != (2 * ch, 2 * cw):
        raise ShapeMismatchError(f"cannot align {tuple(coarse.shape[-2:])} with {tuple(fine.shape[-2:])}: ratio must be 2")


def _smoother(dim: int, norm: bool) -> nn.Module:
    if not norm:
        return nn.Conv2d(dim, dim, 3, padding=1)
    groups = next(g for g in (8, 4, 2, 1) if dim % g == 0 and (dim // g >= 4 or g == 1))
    return nn.Sequential(nn.Conv2d(dim, dim, 3, padding=1), nn.GroupNorm(groups, dim))


class PathAggregationNeck(nn.Module):
    """FPN top-down pass followed by a PANet-style bottom-up pass.

    Top-down: ``m_n = lat_n(s_n)``, ``m_i = lat_i(s_i) + up(m_{i+1})`` and the
    emitted map is ``act(smooth(m_i))`` with ``smooth`` a 3x3 conv (+ GroupNorm).
    Bottom-up: ``b_1 = act(smooth(proj_1(t_1)))`` and
    ``b_i = act(smooth(proj_i(t_i) + down_i(b_{i-1})))``. Upsampling is
    nearest-neighbour x2, downsampling a stride-2 3x3 conv.

    ``norm=False`` with ``act="identity"`` makes the neck affine in its
    inputs; ``smooth=False`` removes the smoothing convs altogether.
    """

    def __init__(self, in_channels: Sequence[int], dim: int = 64, act: str = "gelu",
                 smooth: bool = True, norm: bool = True):
        super().__init__()
        n = len(in_channels)
        self.dim = dim
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_channels)
        self.proj = nn.ModuleList(nn.Conv2d(dim, dim, 1) for _ in range(n))
        self.down = nn.ModuleList(nn.Conv2d(dim, dim, 3, stride=2, padding=1) for _ in range(n - 1))
        if smooth:
            self.td_smooth = nn.ModuleList(_smoother(dim, norm) for _ in range(n))
            self.bu_smooth = nn.ModuleList(_smoother(dim, norm) for _ in range(n))
        else:
            self.td_smooth = nn.ModuleList(nn.Identity() for _ in range(n))
            self.bu_smooth = nn.ModuleList(nn.Identity() for _ in range(n))
        self.act = make_activation(act)

    def top_down(self, stages: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(stages) != len(self.lateral):
            raise ShapeMismatchError(f"expected {len(self.lateral)} stages, got {len(stages)}")
        merged = [None] * len(stages)
        merged[-1] = self.lateral[-1](stages[-1])
        for i in range(len(stages) - 2, -1, -1):
            _check_ratio(stages[i], merged[i + 1])
            merged[i] = self.lateral[i](stages[i]) + F.interpolate(merged[i + 1], scale_factor=2, mode="nearest")
        return [self.act(sm(m)) for sm, m in zip(self.td_smooth, merged)]

    def bottom_up(self, top_down: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        out = [self.act(self.bu_smooth[0](self.proj[0](top_down[0])))]
        for i in range(1, len(top_down)):
            _check_ratio(out[-1], top_down[i])
            merged = self.proj[i](top_down[i]) + self.down[i - 1](out[-1])
            out.append(self.act(self.bu_smooth[i](merged)))
        return out

    def forward(self, stages: Sequence[torch.Tensor]) -> FusedFeatures:
        td = self.top_down(stages)
        return FusedFeatures(td, self.bottom_up(td))


def top_down_fuse(stages: Sequence[torch.Tensor], neck: PathAggregationNeck) -> list[torch.Tensor]:
    return neck.top_down(stages)


def bottom_up_fuse(top_down: Sequence[torch.Tensor], neck: PathAggregationNeck) -> list[torch.Tensor]:
    return neck.bottom_up(top_down)
