"""Central finite-difference check of analytic parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import build_toy_backbone
from .model import HerbsConfig, build_variant


@dataclass
class GradEntry:
    module: str
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    entries: list[GradEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def per_module(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.module] = max(out.get(e.module, 0.0), e.rel_error)
        return out

    def format(self) -> str:
        lines = [f"{'module':<12} {'max rel. error':>14}"]
        lines += [f"{m:<12} {v:>14.3e}" for m, v in self.per_module().items()]
        lines.append(f"{'overall':<12} {self.max_rel_error:>14.3e}  ({len(self.entries)} parameters)")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)``. The floor sits well above the
    difference-quotient rounding noise (about ``eps * |loss| / h``) so that
    entries whose true gradient is zero are not scored on noise."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def _loss(net, pixels, labels, epoch, teachers=None) -> torch.Tensor:
    if teachers is None:
        return net(pixels, labels, epoch=epoch)[1].total
    return net(pixels, labels, epoch=epoch, teachers=teachers)[1].total


def _frozen_teachers(net, pixels):
    """Refinement targets at the unperturbed parameters, or None for nets without them."""
    if not hasattr(net, "td_heads") or not getattr(net, "refinement_pairs", None):
        return None
    with torch.no_grad():
        return [z.detach() for z in net(pixels, compute_loss=False)[0].bottom_up_logits]


def check_gradients(net: nn.Module, pixels: torch.Tensor, labels: torch.Tensor, num_params: int = 24,
                    h: float = 1e-5, seed: int = 0, epoch: int = 0) -> GradcheckReport:
    """Compare autograd against central differences on sampled parameter entries.

    Entries are drawn round-robin over the top-level submodules so every
    module is covered. The refinement teacher is detached in the loss, so
    the perturbed evaluations reuse the unperturbed teacher logits. Run in
    float64 for meaningful agreement.
    """
    rng = np.random.default_rng(seed)
    groups: dict[str, list[tuple[str, nn.Parameter]]] = {}
    for name, p in net.named_parameters():
        if p.requires_grad:
            groups.setdefault(name.split(".", 1)[0], []).append((name, p))
    teachers = _frozen_teachers(net, pixels)
    net.zero_grad(set_to_none=True)
    _loss(net, pixels, labels, epoch).backward()
    report = GradcheckReport()
    modules = list(groups)
    for n in range(num_params):
        module = modules[n % len(modules)]
        name, p = groups[module][rng.integers(len(groups[module]))]
        index = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[index])
        with torch.no_grad():
            orig = p[index].item()
            p[index] = orig + h
            plus = float(_loss(net, pixels, labels, epoch, teachers))
            p[index] = orig - h
            minus = float(_loss(net, pixels, labels, epoch, teachers))
            p[index] = orig
        numeric = (plus - minus) / (2 * h)
        report.entries.append(GradEntry(module, name, index, analytic, numeric, relative_error(analytic, numeric)))
    return report


def tiny_herbs(num_classes: int = 5, base_width: int = 8, seed: int = 0) -> nn.Module:
    """Small float64 HERBS net for 32x32 inputs (stage maps 8, 4, 2, 1)."""
    backbone = build_toy_backbone("conv", base_width, seed=seed)
    config = HerbsConfig(num_classes=num_classes, neck_dim=16, num_selects=(16, 4, 2, 1))
    return build_variant("e", backbone, config, seed=seed + 1).double()


def run_tiny_gradcheck(num_params: int = 24, seed: int = 0, batch: int = 2) -> GradcheckReport:
    net = tiny_herbs(seed=seed)
    g = torch.Generator().manual_seed(seed)
    pixels = torch.randn(batch, 3, 32, 32, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 5, (batch,), generator=g)
    return check_gradients(net, pixels, labels, num_params=num_params, seed=seed)
