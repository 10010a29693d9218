"""High-temperature refinement: the epoch temperature schedule and the
softened KL loss that teaches each top-down head its bottom-up partner."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch.nn import functional as F

from .errors import ConfigError, MissingHeadsError


@dataclass(frozen=True)
class TemperatureSchedule:
    """Halve the temperature every ``halving_interval`` epochs.

    ``scaled`` (default) starts at ``initial`` and returns
    ``initial * 0.5 ** (e // halving_interval)``. ``literal`` evaluates
    ``0.5 ** floor(e / -log2(0.0625 / initial))`` exactly, which starts at 1
    whatever the initial value.
    """

    initial: float = 64.0
    mode: str = "scaled"

    def __post_init__(self):
        if not self.initial > 0:
            raise ConfigError(f"temperature must be positive, got {self.initial}")
        if self.mode not in ("scaled", "literal"):
            raise ConfigError(f"unknown temperature mode {self.mode!r}")
        if self.divisor <= 0:
            raise ConfigError(f"temperature {self.initial} <= 0.0625 has no decay interval")

    @property
    def divisor(self) -> float:
        return -math.log2(0.0625 / self.initial)

    @property
    def halving_interval(self) -> int:
        # the tiny slack absorbs log2 rounding for exact powers of two
        return max(1, math.floor(self.divisor + 1e-9))

    def __call__(self, epoch: int) -> float:
        return temperature_at(epoch, self)


def temperature_at(epoch: int, schedule: TemperatureSchedule) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if schedule.mode == "literal":
        return 0.5 ** math.floor(epoch / schedule.divisor)
    return schedule.initial * 0.5 ** (epoch // schedule.halving_interval)


def pair_kl(student: torch.Tensor, teacher: torch.Tensor, temperature: float) -> torch.Tensor:
    """Per-sample KL(teacher_T || student_T), teacher detached. Shapes [B, C] -> [B]."""
    log_q = F.log_softmax(student / temperature, dim=-1)
    log_p = F.log_softmax(teacher.detach() / temperature, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1)


def refinement_loss(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor]],
    temperature: float,
    t_squared: bool = False,
) -> torch.Tensor:
    """Mean over pairs and batch of the softened student/teacher KL.

    Each pair is ``(student_logits, teacher_logits)``. No ``T**2`` factor
    unless ``t_squared`` is set.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not pairs:
        raise MissingHeadsError("refinement needs at least one classifier pair")
    loss = torch.stack([pair_kl(s, t, temperature).mean() for s, t in pairs]).mean()
    if t_squared:
        loss = loss * temperature**2
    return loss


def attach_refinement(net, mode: str = "full"):
    """Register refinement pairs on ``net`` and return it.

    ``full`` pairs every top-down head with the bottom-up head of the same
    stage; the net must already own ``td_heads`` and ``bu_heads``. ``basic``
    adds a classifier on the second-to-last backbone block of a plain
    backbone classifier, which learns from the final classifier.
    """
    if mode == "full":
        td, bu = getattr(net, "td_heads", None), getattr(net, "bu_heads", None)
        if td is None or bu is None or len(td) != len(bu) or len(td) == 0:
            raise MissingHeadsError("full refinement needs matching top-down and bottom-up heads")
        net.refinement_pairs = [(f"td{i}", f"bu{i}") for i in range(len(td))]
        return net
    if mode == "basic":
        if not hasattr(net, "add_penultimate_head"):
            raise MissingHeadsError("basic refinement needs a plain backbone classifier")
        if len(net.backbone.stage_channels) < 2:
            raise MissingHeadsError("basic refinement needs at least two backbone blocks")
        net.add_penultimate_head()
        net.refinement_pairs = [("penultimate", "final")]
        return net
    raise ConfigError(f"unknown refinement mode {mode!r}")
