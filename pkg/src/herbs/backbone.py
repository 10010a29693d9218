"""Multi-stage feature extractors.

Every backbone maps an image batch ``[B, 3, H, W]`` to ``n`` stage maps
``[B, C_i, H / s_i, W / s_i]`` with strictly increasing strides ``s_i``
and non-decreasing channel counts ``C_i``. Two small toy backbones are
provided for CPU-scale experiments, and :class:`BackboneAdapter` taps the
stages of an externally built network through forward hooks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DimensionMismatchError

MIN_BASE_WIDTH = 4


@dataclass
class StageFeatures:
    stages: list[torch.Tensor]
    strides: list[int]

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.stages[i]


def _group_count(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """Stride-2 conv downsample followed by a residual 3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(_group_count(out_ch), out_ch)
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_group_count(out_ch), out_ch)

    def forward(self, x):
        x = F.gelu(self.norm1(self.down(x)))
        return F.gelu(x + self.norm2(self.conv(x)))


class ToyConvBackbone(nn.Module):
    """Plain convolutional stages, width doubling at every stride-2 step.

    A stride-2 stem precedes the first stage so the strides come out as
    4, 8, 16, 32 for the default four stages.
    """

    kind = "conv"

    def __init__(self, base_width: int = 16, num_stages: int = 4):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, base_width, 3, stride=2, padding=1),
            nn.GroupNorm(_group_count(base_width), base_width),
            nn.GELU(),
        )
        self.stage_channels = [base_width * 2**i for i in range(num_stages)]
        self.stage_strides = [4 * 2**i for i in range(num_stages)]
        chans = [base_width] + self.stage_channels
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(num_stages))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out


def _window_size(size: int, limit: int) -> int:
    for w in range(min(size, limit), 0, -1):
        if size % w == 0:
            return w
    return 1


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, H, W, C]
        B, H, W, C = x.shape
        wh, ww = _window_size(H, self.window), _window_size(W, self.window)
        t = x.view(B, H // wh, wh, W // ww, ww, C).permute(0, 1, 3, 2, 4, 5)
        t = t.reshape(-1, wh * ww, C)
        q, k, v = self.qkv(t).chunk(3, dim=-1)
        hd = C // self.heads
        q, k, v = (z.reshape(z.shape[0], z.shape[1], self.heads, hd).transpose(1, 2) for z in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-2, -1) * hd**-0.5, dim=-1)
        t = (attn @ v).transpose(1, 2).reshape(-1, wh * ww, C)
        t = self.proj(t).view(B, H // wh, W // ww, wh, ww, C).permute(0, 1, 3, 2, 4, 5)
        return t.reshape(B, H, W, C)

    def forward(self, x):
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, out_dim)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduce(self.norm(x))


class ToyAttentionBackbone(nn.Module):
    """Swin-flavoured toy: 4x4 patch embedding, windowed attention, patch merging."""

    kind = "attention"

    def __init__(self, base_width: int = 16, num_stages: int = 4, window: int = 4):
        super().__init__()
        self.stage_channels = [base_width * 2**i for i in range(num_stages)]
        self.stage_strides = [4 * 2**i for i in range(num_stages)]
        self.embed = nn.Conv2d(3, base_width, 4, stride=4)
        self.embed_norm = nn.LayerNorm(base_width)
        self.merges = nn.ModuleList(
            PatchMerge(self.stage_channels[i - 1], self.stage_channels[i]) for i in range(1, num_stages)
        )
        self.blocks = nn.ModuleList(
            WindowAttention(c, heads=max(1, c // 16), window=window) for c in self.stage_channels
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.embed_norm(self.embed(x).permute(0, 2, 3, 1))
        out = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.merges[i - 1](x)
            x = block(x)
            out.append(x.permute(0, 3, 1, 2).contiguous())
        return out


class BackboneAdapter(nn.Module):
    """Expose an arbitrary network as a multi-stage backbone.

    ``stage_names`` are dotted submodule names whose outputs become the stage
    maps. Set ``channels_last`` for modules emitting ``[B, H, W, C]`` (Swin
    style); flattened ``[B, L, C]`` token outputs are reshaped to a square
    grid. Pretrained weights, if any, are the caller's business.
    """

    def __init__(
        self,
        model: nn.Module,
        stage_names: Sequence[str],
        stage_channels: Sequence[int],
        stage_strides: Sequence[int],
        channels_last: bool = False,
        run: Callable[[nn.Module, torch.Tensor], object] | None = None,
    ):
        super().__init__()
        if len(stage_names) != len(stage_channels) or len(stage_names) != len(stage_strides):
            raise ConfigError("stage_names, stage_channels and stage_strides must have equal length")
        self.model = model
        self.stage_names = list(stage_names)
        self.stage_channels = list(stage_channels)
        self.stage_strides = list(stage_strides)
        self.channels_last = channels_last
        self._run = run
        modules = dict(model.named_modules())
        missing = [n for n in self.stage_names if n not in modules]
        if missing:
            raise ConfigError(f"unknown stage modules: {missing}")
        self._taps = [modules[n] for n in self.stage_names]

    def _to_nchw(self, t: torch.Tensor) -> torch.Tensor:
        if t.dim() == 3:
            B, L, C = t.shape
            side = int(round(L**0.5))
            t = t.view(B, side, side, C)
            return t.permute(0, 3, 1, 2).contiguous()
        if self.channels_last:
            return t.permute(0, 3, 1, 2).contiguous()
        return t

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        captured: dict[int, torch.Tensor] = {}
        handles = [
            m.register_forward_hook(lambda _m, _in, out, i=i: captured.__setitem__(i, out))
            for i, m in enumerate(self._taps)
        ]
        try:
            if self._run is not None:
                self._run(self.model, x)
            else:
                self.model(x)
        finally:
            for h in handles:
                h.remove()
        return [self._to_nchw(captured[i]) for i in range(len(self._taps))]


_KINDS = {"conv": ToyConvBackbone, "attention": ToyAttentionBackbone}


def build_toy_backbone(kind: str, base_width: int = 16, seed: int = 0, num_stages: int = 4) -> nn.Module:
    """Deterministically initialised toy backbone; identical seeds give identical weights."""
    if kind not in _KINDS:
        raise ConfigError(f"unsupported backbone kind {kind!r}; expected one of {sorted(_KINDS)}")
    if base_width < MIN_BASE_WIDTH:
        raise ConfigError(f"base_width must be >= {MIN_BASE_WIDTH}, got {base_width}")
    if num_stages < 1:
        raise ConfigError("num_stages must be >= 1")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _KINDS[kind](base_width=base_width, num_stages=num_stages)
    return net


def num_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_input(pixels: torch.Tensor, backbone: nn.Module) -> None:
    if pixels.dim() != 4 or pixels.shape[1] != 3:
        raise DimensionMismatchError(f"expected pixels of shape [B, 3, H, W], got {tuple(pixels.shape)}")
    multiple = backbone.stage_strides[-1]
    h, w = pixels.shape[-2:]
    if h % multiple or w % multiple:
        raise DimensionMismatchError(f"input {h}x{w} is not divisible by the backbone stride {multiple}")


def extract_stages(pixels: torch.Tensor, backbone: nn.Module) -> StageFeatures:
    check_input(pixels, backbone)
    stages = backbone(pixels)
    h, w = pixels.shape[-2:]
    for i, (s, stride) in enumerate(zip(stages, backbone.stage_strides)):
        if s.shape[-2:] != (h // stride, w // stride):
            raise DimensionMismatchError(
                f"stage {i} has spatial size {tuple(s.shape[-2:])}, expected {(h // stride, w // stride)}"
            )
    return StageFeatures(list(stages), list(backbone.stage_strides))
