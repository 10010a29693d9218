"""Background suppression: per-location classification, foreground selection,
graph-convolution combiner and the merged / dropped / layer losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, SelectionRangeError, ShapeMismatchError
from .neck import make_activation

DEFAULT_NUM_SELECTS = (256, 128, 64, 32)


@dataclass
class BsLossWeights:
    merged: float = 1.0
    dropped: float = 5.0
    layer: float = 0.3

    def __post_init__(self):
        if min(self.merged, self.dropped, self.layer) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class ClassificationMap:
    logits: torch.Tensor  # [B, C, H, W]
    max_score: torch.Tensor  # [B, H, W]


@dataclass
class SelectionResult:
    selected_idx: torch.Tensor  # [B, K] flat location indices
    selected_feats: torch.Tensor  # [B, K, D]
    selected_logits: torch.Tensor  # [B, K, C]
    dropped_idx: torch.Tensor  # [B, HW - K]
    dropped_logits: torch.Tensor  # [B, HW - K, C]

    def mask(self, height: int, width: int) -> torch.Tensor:
        """Boolean [B, H, W] grid, True at selected locations."""
        B = self.selected_idx.shape[0]
        m = torch.zeros(B, height * width, dtype=torch.bool, device=self.selected_idx.device)
        m.scatter_(1, self.selected_idx, True)
        return m.view(B, height, width)


def classify_locations(feat: torch.Tensor, head: nn.Linear) -> ClassificationMap:
    """Apply a linear head independently at every spatial location of ``feat``."""
    if feat.shape[1] != head.in_features:
        raise ShapeMismatchError(f"feature dim {feat.shape[1]} != head input dim {head.in_features}")
    logits = torch.einsum("bdhw,cd->bchw", feat, head.weight)
    if head.bias is not None:
        logits = logits + head.bias.view(1, -1, 1, 1)
    return ClassificationMap(logits, max_score(logits))


def max_score(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1).amax(dim=1)


def rank_locations(scores: torch.Tensor) -> torch.Tensor:
    """Flat location order by descending score, ties by ascending index. scores: [B, L]."""
    # stable ascending sort of the negated scores keeps equal scores in index order
    return torch.sort(-scores, dim=1, stable=True).indices


def select_topk(cmap: ClassificationMap, feat: torch.Tensor, k: int) -> SelectionResult:
    """Keep the ``k`` most confident locations; everything else is dropped.

    Selection indices carry no gradient; gradients reach the gathered feature
    and logit values only.
    """
    B, D, H, W = feat.shape
    L = H * W
    if not 1 <= k <= L:
        raise SelectionRangeError(f"K={k} outside [1, {L}] for a {H}x{W} map")
    order = rank_locations(cmap.max_score.detach().reshape(B, L))
    sel, drop = order[:, :k], order[:, k:]
    flat_feat = feat.reshape(B, D, L).transpose(1, 2)
    flat_logits = cmap.logits.reshape(B, -1, L).transpose(1, 2)
    C = flat_logits.shape[-1]
    return SelectionResult(
        selected_idx=sel,
        selected_feats=flat_feat.gather(1, sel.unsqueeze(-1).expand(B, k, D)),
        selected_logits=flat_logits.gather(1, sel.unsqueeze(-1).expand(B, k, C)),
        dropped_idx=drop,
        dropped_logits=flat_logits.gather(1, drop.unsqueeze(-1).expand(B, L - k, C)),
    )


class GraphCombiner(nn.Module):
    """Merge selected tokens with one graph-convolution layer.

    Adjacency is the row-softmax of scaled dot products between projected
    tokens, so it is row-normalised and equivariant to token order. The
    updated tokens are mean-pooled and classified.
    """

    def __init__(self, dim: int, num_classes: int, act: str = "gelu"):
        super().__init__()
        self.query = nn.Linear(dim, dim, bias=False)
        self.weight = nn.Linear(dim, dim, bias=False)
        self.act = make_activation(act)
        self.classifier = nn.Linear(dim, num_classes)

    def adjacency(self, tokens: torch.Tensor) -> torch.Tensor:
        z = self.query(tokens)
        return torch.softmax(z @ z.transpose(1, 2) / z.shape[-1] ** 0.5, dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] == 0:
            raise SelectionRangeError("combiner received no tokens")
        mixed = self.act(self.weight(self.adjacency(tokens) @ tokens))
        return self.classifier(mixed.mean(dim=1))


def combine(selections: Sequence[SelectionResult], combiner: GraphCombiner) -> torch.Tensor:
    if not selections:
        raise SelectionRangeError("empty selection")
    dims = {s.selected_feats.shape[-1] for s in selections}
    if len(dims) != 1:
        raise ShapeMismatchError(f"selected features disagree on channel dim: {sorted(dims)}")
    return combiner(torch.cat([s.selected_feats for s in selections], dim=1))


def merged_loss(merged_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(merged_logits, labels)


def dropped_loss(dropped_logits: torch.Tensor, mode: str = "tanh") -> torch.Tensor:
    """Push dropped-location logits to the background target.

    ``tanh`` mode targets -1 per class; ``softmax`` mode targets the uniform
    1/C. The squared error is summed over classes and averaged over batch and
    locations, so an empty drop set gives 0.
    """
    if dropped_logits.shape[-2] == 0:
        return dropped_logits.sum() * 0.0
    if mode == "tanh":
        err = torch.tanh(dropped_logits) + 1.0
    elif mode == "softmax":
        err = torch.softmax(dropped_logits, dim=-1) - 1.0 / dropped_logits.shape[-1]
    else:
        raise ConfigError(f"unknown dropped-loss mode {mode!r}")
    return err.pow(2).sum(-1).mean()


def layer_logits(feat: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return head(feat.mean(dim=(2, 3)))


def layer_loss(feats: Sequence[torch.Tensor], heads: Sequence[nn.Linear], labels: torch.Tensor) -> torch.Tensor:
    if len(feats) != len(heads):
        raise ShapeMismatchError(f"{len(feats)} feature maps but {len(heads)} heads")
    return sum(F.cross_entropy(layer_logits(f, h), labels) for f, h in zip(feats, heads))


def bs_total(loss_m, loss_d, loss_l, weights: BsLossWeights | None = None):
    w = weights or BsLossWeights()
    return w.merged * loss_m + w.dropped * loss_d + w.layer * loss_l
