"""HERBS network, the ablation variants and nine-classifier fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import extract_stages
from .errors import ConfigError, NonFiniteLossError, ShapeMismatchError
from .neck import PathAggregationNeck
from .refinement import TemperatureSchedule, attach_refinement, refinement_loss, temperature_at
from .suppression import (
    DEFAULT_NUM_SELECTS,
    BsLossWeights,
    GraphCombiner,
    bs_total,
    classify_locations,
    combine,
    dropped_loss,
    layer_logits,
    merged_loss,
    select_topk,
)

VARIANTS = ("a", "b", "c", "d", "e")
LOSS_FIELDS = ("merged", "dropped", "layer", "refine", "bs", "classification", "total")


@dataclass
class HerbsConfig:
    num_classes: int
    neck_dim: int = 64
    num_selects: tuple[int, ...] = DEFAULT_NUM_SELECTS
    weights: BsLossWeights = field(default_factory=BsLossWeights)
    refine_weight: float = 1.0
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    dropped_mode: str = "tanh"
    readout: str = "avgpool"  # or "topk": mean logits over the selected locations
    act: str = "gelu"
    t_squared: bool = False
    head_bias_init: float = -3.0  # bottom-up heads start on the background side of tanh

    def __post_init__(self):
        ks = tuple(self.num_selects)
        if any(a <= b for a, b in zip(ks, ks[1:])):
            raise ConfigError(f"num_selects must be strictly decreasing, got {ks}")
        if self.readout not in ("avgpool", "topk"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.refine_weight < 0:
            raise ConfigError("refine_weight must be nonnegative")
        self.num_selects = ks


@dataclass
class PredictionBundle:
    top_down_logits: list[torch.Tensor]
    bottom_up_logits: list[torch.Tensor]
    combiner_logits: torch.Tensor | None
    fused_probs: torch.Tensor
    class_maps: list[torch.Tensor] = field(default_factory=list)  # [B, C, H_i, W_i]
    selection_masks: list[torch.Tensor] = field(default_factory=list)  # [B, H_i, W_i] bool

    @property
    def all_logits(self) -> list[torch.Tensor]:
        extra = [] if self.combiner_logits is None else [self.combiner_logits]
        return [*self.top_down_logits, *self.bottom_up_logits, *extra]


@dataclass
class LossBreakdown:
    merged: torch.Tensor
    dropped: torch.Tensor
    layer: torch.Tensor
    refine: torch.Tensor
    bs: torch.Tensor
    classification: torch.Tensor
    total: torch.Tensor
    temperature: float = math.nan
    refine_weight: float = 1.0

    def as_dict(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in LOSS_FIELDS}
        out["temperature"] = self.temperature
        return out

    def check_finite(self, step: int | None = None) -> None:
        for k in LOSS_FIELDS:
            v = float(getattr(self, k).detach())
            if not math.isfinite(v):
                raise NonFiniteLossError(k, v, step)


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return ref.new_zeros(())


def fuse_predictions(logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Softmax of the summed logit vectors.

    Values are sorted elementwise before summation so the float result is
    bitwise independent of list order.
    """
    if not logits:
        raise ShapeMismatchError("nothing to fuse")
    shapes = {tuple(t.shape) for t in logits}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"logit vectors disagree in shape: {sorted(shapes)}")
    stacked = torch.stack(list(logits), dim=0)
    return torch.softmax(torch.sort(stacked, dim=0).values.sum(0), dim=-1)


class HerbsNet(nn.Module):
    """Backbone + path-aggregation neck + suppression selector/combiner + refinement."""

    variant = "e"

    def __init__(self, backbone: nn.Module, config: HerbsConfig):
        super().__init__()
        n = len(backbone.stage_channels)
        if len(config.num_selects) != n:
            raise ConfigError(f"{len(config.num_selects)} K values for {n} stages")
        self.config = config
        self.backbone = backbone
        self.neck = PathAggregationNeck(backbone.stage_channels, config.neck_dim, act=config.act)
        self.td_heads = nn.ModuleList(nn.Linear(config.neck_dim, config.num_classes) for _ in range(n))
        self.bu_heads = nn.ModuleList(nn.Linear(config.neck_dim, config.num_classes) for _ in range(n))
        with torch.no_grad():
            for h in self.bu_heads:
                h.bias.fill_(config.head_bias_init)
        self.combiner = GraphCombiner(config.neck_dim, config.num_classes, act=config.act)
        attach_refinement(self, "full")

    @property
    def num_heads(self) -> int:
        return len(self.td_heads) + len(self.bu_heads) + 1

    def forward(self, pixels, labels=None, epoch: int = 0, compute_loss: bool | None = None,
                teachers: Sequence[torch.Tensor] | None = None):
        """``teachers`` replaces the bottom-up logits used as refinement targets;
        finite-difference checks pass the unperturbed values to mirror the
        stop-gradient on the teacher side."""
        cfg = self.config
        if compute_loss is None:
            compute_loss = labels is not None
        stages = extract_stages(pixels, self.backbone)
        fused = self.neck(stages.stages)
        cmaps = [classify_locations(f, h) for f, h in zip(fused.bottom_up, self.bu_heads)]
        sels = [select_topk(cm, f, k) for cm, f, k in zip(cmaps, fused.bottom_up, cfg.num_selects)]
        comb = combine(sels, self.combiner)
        if cfg.readout == "avgpool":
            bu = [layer_logits(f, h) for f, h in zip(fused.bottom_up, self.bu_heads)]
            td = [layer_logits(f, h) for f, h in zip(fused.top_down, self.td_heads)]
        else:
            bu = [s.selected_logits.mean(1) for s in sels]
            td = [_gather_mean(classify_locations(f, h).logits, s.selected_idx)
                  for f, h, s in zip(fused.top_down, self.td_heads, sels)]
        bundle = PredictionBundle(
            top_down_logits=td,
            bottom_up_logits=bu,
            combiner_logits=comb,
            fused_probs=fuse_predictions([*td, *bu, comb]),
            class_maps=[cm.logits for cm in cmaps],
            selection_masks=[s.mask(*f.shape[-2:]) for s, f in zip(sels, fused.bottom_up)],
        )
        if not compute_loss:
            return bundle, None

        loss_m = merged_loss(comb, labels)
        drops = [s.dropped_logits for s in sels if s.dropped_logits.shape[1] > 0]
        if drops:
            loss_d = torch.stack([dropped_loss(d, cfg.dropped_mode) for d in drops]).mean()
        else:
            loss_d = _zero(comb)
        if cfg.readout == "avgpool":
            loss_l = sum(F.cross_entropy(z, labels) for z in bu)
        else:
            loss_l = sum(F.cross_entropy(layer_logits(f, h), labels)
                         for f, h in zip(fused.bottom_up, self.bu_heads))
        targets = bu if teachers is None else list(teachers)
        heads = {**{f"td{i}": z for i, z in enumerate(td)}, **{f"bu{i}": z for i, z in enumerate(targets)}}
        temp = temperature_at(epoch, cfg.schedule)
        loss_r = refinement_loss([(heads[s], heads[t]) for s, t in self.refinement_pairs], temp, cfg.t_squared)
        loss_bs = bs_total(loss_m, loss_d, loss_l, cfg.weights)
        total = loss_bs + cfg.refine_weight * loss_r
        return bundle, LossBreakdown(
            merged=loss_m, dropped=loss_d, layer=loss_l, refine=loss_r, bs=loss_bs,
            classification=_zero(total), total=total, temperature=temp, refine_weight=cfg.refine_weight,
        )

    def classification_maps(self, pixels) -> list[torch.Tensor]:
        bundle, _ = self.forward(pixels, compute_loss=False)
        return bundle.class_maps


def _gather_mean(logits: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    B, C = logits.shape[:2]
    flat = logits.reshape(B, C, -1).transpose(1, 2)
    return flat.gather(1, idx.unsqueeze(-1).expand(-1, -1, C)).mean(1)


def _per_location(feat: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return classify_locations(feat, head).logits


class BackboneClassifier(nn.Module):
    """Variant (a): the plain backbone with one classifier on its final block.

    :func:`attach_refinement` in ``basic`` mode adds a second classifier on the
    block before it and a refinement loss between the two.
    """

    variant = "a"

    def __init__(self, backbone: nn.Module, num_classes: int,
                 schedule: TemperatureSchedule | None = None, refine_weight: float = 1.0):
        super().__init__()
        self.backbone = backbone
        self.num_classes = num_classes
        self.head = nn.Linear(backbone.stage_channels[-1], num_classes)
        self.penultimate = None
        self.refinement_pairs: list[tuple[str, str]] = []
        self.schedule = schedule or TemperatureSchedule()
        self.refine_weight = refine_weight

    def add_penultimate_head(self) -> None:
        if self.penultimate is None:
            self.penultimate = nn.Linear(self.backbone.stage_channels[-2], self.num_classes)

    @property
    def num_heads(self) -> int:
        return 1 if self.penultimate is None else 2

    def forward(self, pixels, labels=None, epoch: int = 0, compute_loss: bool | None = None):
        if compute_loss is None:
            compute_loss = labels is not None
        stages = extract_stages(pixels, self.backbone).stages
        final = layer_logits(stages[-1], self.head)
        td = [] if self.penultimate is None else [layer_logits(stages[-2], self.penultimate)]
        bundle = PredictionBundle(td, [final], None, fuse_predictions([*td, final]),
                                  class_maps=[_per_location(stages[-1], self.head)])
        if not compute_loss:
            return bundle, None
        ce = F.cross_entropy(final, labels)
        zero = _zero(ce)
        refine, temp = zero, math.nan
        if self.refinement_pairs:
            temp = temperature_at(epoch, self.schedule)
            refine = refinement_loss([(td[0], final)], temp)
        total = ce + self.refine_weight * refine
        return bundle, LossBreakdown(zero, zero, zero, refine, zero, ce, total, temp, self.refine_weight)

    def classification_maps(self, pixels) -> list[torch.Tensor]:
        return self.forward(pixels, compute_loss=False)[0].class_maps


class PathAggregationClassifier(nn.Module):
    """Variants (b)-(d): backbone + neck with plain cross-entropy heads.

    ``heads`` is ``"last"`` (one head on the last bottom-up map), ``"bottom_up"``
    (one per bottom-up map) or ``"both"`` (top-down and bottom-up maps). The
    loss is the unweighted mean of the per-head cross-entropies.
    """

    def __init__(self, backbone: nn.Module, num_classes: int, heads: str = "last",
                 neck_dim: int = 64, act: str = "gelu"):
        super().__init__()
        if heads not in ("last", "bottom_up", "both"):
            raise ConfigError(f"unknown head layout {heads!r}")
        n = len(backbone.stage_channels)
        self.backbone = backbone
        self.layout = heads
        self.variant = {"last": "b", "bottom_up": "c", "both": "d"}[heads]
        self.neck = PathAggregationNeck(backbone.stage_channels, neck_dim, act=act)
        n_bu = 1 if heads == "last" else n
        self.bu_heads = nn.ModuleList(nn.Linear(neck_dim, num_classes) for _ in range(n_bu))
        self.td_heads = nn.ModuleList(
            nn.Linear(neck_dim, num_classes) for _ in range(n if heads == "both" else 0)
        )

    @property
    def num_heads(self) -> int:
        return len(self.bu_heads) + len(self.td_heads)

    def _maps(self, pixels):
        fused = self.neck(extract_stages(pixels, self.backbone).stages)
        bu_maps = fused.bottom_up[-1:] if self.layout == "last" else fused.bottom_up
        return fused.top_down, bu_maps

    def forward(self, pixels, labels=None, epoch: int = 0, compute_loss: bool | None = None):
        if compute_loss is None:
            compute_loss = labels is not None
        td_maps, bu_maps = self._maps(pixels)
        bu = [layer_logits(f, h) for f, h in zip(bu_maps, self.bu_heads)]
        td = [layer_logits(f, h) for f, h in zip(td_maps, self.td_heads)]
        maps = [_per_location(f, h) for f, h in zip(bu_maps, self.bu_heads)]
        maps += [_per_location(f, h) for f, h in zip(td_maps, self.td_heads)]
        bundle = PredictionBundle(td, bu, None, fuse_predictions([*td, *bu]), class_maps=maps)
        if not compute_loss:
            return bundle, None
        ce = torch.stack([F.cross_entropy(z, labels) for z in (*td, *bu)]).mean()
        zero = _zero(ce)
        return bundle, LossBreakdown(zero, zero, zero, zero, zero, ce, ce)

    def classification_maps(self, pixels) -> list[torch.Tensor]:
        return self.forward(pixels, compute_loss=False)[0].class_maps


def build_variant(variant: str, backbone: nn.Module, config: HerbsConfig, seed: int | None = None) -> nn.Module:
    """Ablation ladder: (a) backbone, (b) +PA, (c) +4 bottom-up heads,
    (d) +8 top-down/bottom-up heads, (e) full HERBS.

    With ``seed`` set, the new (non-backbone) parameters are initialised from
    that seed without touching the global RNG stream.
    """
    if seed is None:
        return _build(variant, backbone, config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _build(variant, backbone, config)


def _build(variant: str, backbone: nn.Module, config: HerbsConfig) -> nn.Module:
    if variant == "a":
        return BackboneClassifier(backbone, config.num_classes, config.schedule, config.refine_weight)
    if variant in ("b", "c", "d"):
        layout = {"b": "last", "c": "bottom_up", "d": "both"}[variant]
        return PathAggregationClassifier(backbone, config.num_classes, layout, config.neck_dim, config.act)
    if variant == "e":
        return HerbsNet(backbone, config)
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
