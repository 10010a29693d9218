"""Heat maps from per-location classification maps, and PNG export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigError, HerbsError

SOURCES = ("max_score", "target_class")


class NonFiniteModelError(HerbsError, ValueError):
    code = "E_NONFINITE_PARAMS"


@dataclass
class HeatMap:
    response: np.ndarray  # [H_img, W_img] in [0, 1]
    source: str


def normalize(response: torch.Tensor) -> torch.Tensor:
    """Min-max scale to [0, 1]; a constant map becomes all zeros.

    Spreads within a few dozen ulps count as constant: resampling a constant
    map leaves rounding ripple that would otherwise be stretched to [0, 1].
    """
    lo, hi = response.min(), response.max()
    tol = 64 * torch.finfo(response.dtype).eps * max(float(hi.abs()), float(lo.abs()))
    if not float(hi - lo) > tol:
        return torch.zeros_like(response)
    return (response - lo) / (hi - lo)


def _upsampled_mean(maps: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
    """Average ``[B, h_i, w_i]`` maps after bilinear upsampling to ``size``."""
    ups = [F.interpolate(m.unsqueeze(1), size=size, mode="bilinear", align_corners=False)[:, 0] for m in maps]
    return torch.stack(ups).mean(0)


def _check_finite(net) -> None:
    for name, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteModelError(f"parameter {name} has non-finite values")


@torch.no_grad()
def raw_responses(net, pixels: torch.Tensor, source: str = "max_score") -> torch.Tensor:
    """Unnormalised ``[B, H_img, W_img]`` responses for a normalised image batch."""
    if source not in SOURCES:
        raise ConfigError(f"unknown heat-map source {source!r}; expected one of {SOURCES}")
    _check_finite(net)
    bundle, _ = net(pixels, compute_loss=False)
    probs = [torch.softmax(cm, dim=1) for cm in bundle.class_maps]
    if source == "max_score":
        maps = [p.amax(dim=1) for p in probs]
    else:
        target = bundle.fused_probs.argmax(dim=-1)
        maps = [p[torch.arange(p.shape[0]), target] for p in probs]
    return _upsampled_mean(maps, tuple(pixels.shape[-2:]))


def render_heatmap(net, image: torch.Tensor, source: str = "max_score") -> HeatMap:
    """Heat map for one normalised ``[3, H, W]`` image."""
    was_training = net.training
    net.eval()
    try:
        raw = raw_responses(net, image.unsqueeze(0), source)[0]
    finally:
        net.train(was_training)
    return HeatMap(normalize(raw).double().numpy(), source)


@torch.no_grad()
def background_activation(net, pixels: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Per-image mean ``|tanh(Y)|`` over background pixels.

    ``Y`` is every class logit of every per-location classification map. Each
    map is averaged over classes, upsampled to image size and averaged over
    maps. ``masks`` is ``[B, H, W]`` bool, True on the foreground.
    """
    bundle, _ = net(pixels, compute_loss=False)
    maps = [torch.tanh(cm).abs().mean(dim=1) for cm in bundle.class_maps]
    resp = _upsampled_mean(maps, tuple(pixels.shape[-2:]))
    bg = ~masks.bool()
    return (resp * bg).flatten(1).sum(1) / bg.flatten(1).sum(1).clamp_min(1)


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)


def save_heatmap_pngs(heat: HeatMap, image: torch.Tensor, out_dir: str | Path, image_id: str,
                      alpha: float = 0.5) -> tuple[Path, Path]:
    """Write ``<id>_<source>.png`` (grayscale) and ``<id>_<source>_overlay.png``.

    ``image`` is the un-normalised ``[3, H, W]`` picture in [0, 1].
    """
    from matplotlib import colormaps
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = str(image_id).replace("/", "_")
    gray_path = out_dir / f"{stem}_{heat.source}.png"
    overlay_path = out_dir / f"{stem}_{heat.source}_overlay.png"
    Image.fromarray(_to_uint8(heat.response), mode="L").save(gray_path)
    rgb = image.detach().double().permute(1, 2, 0).numpy()
    if rgb.shape[:2] != heat.response.shape:
        raise ConfigError(f"image {rgb.shape[:2]} and heat map {heat.response.shape} differ in size")
    colour = colormaps["jet"](heat.response)[..., :3]
    Image.fromarray(_to_uint8((1 - alpha) * rgb + alpha * colour), mode="RGB").save(overlay_path)
    return gray_path, overlay_path
