"""Training harness: flat config, cosine SGD with gradient accumulation,
deterministic data order and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .backbone import build_toy_backbone
from .data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    SYNTHETIC_MEAN,
    SYNTHETIC_STD,
    ImageFolderDataset,
    SyntheticSpec,
    augment,
    make_synthetic_dataset,
    resize_for,
)
from .errors import ConfigError
from .model import HerbsConfig, build_variant
from .refinement import TemperatureSchedule
from .suppression import BsLossWeights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 5e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    clip_grad: float = 0.0  # max global grad norm per optimizer step; 0 disables
    batch_size: int = 8
    accum_steps: int = 4
    epochs: int = 80
    seed: int = 0
    input_size: int = 384
    resize_size: int = 0  # 0: derived from input_size
    augment: bool = True
    dtype: str = "float32"
    # model
    variant: str = "e"
    backbone: str = "conv"
    base_width: int = 16
    neck_dim: int = 64
    num_selects: tuple = (256, 128, 64, 32)
    lambda_m: float = 1.0
    lambda_d: float = 5.0
    lambda_l: float = 0.3
    lambda_r: float = 1.0
    temperature: float = 64.0
    temperature_mode: str = "scaled"
    t_squared: bool = False
    dropped_mode: str = "tanh"
    readout: str = "avgpool"
    act: str = "gelu"
    head_bias_init: float = -3.0
    # data
    dataset: str = "synthetic"  # or a directory with train/ and test/ class folders
    normalization: str = "synthetic"  # or "imagenet"
    num_generic: int = 5
    fine_per_generic: int = 2
    patch_size: int = 10
    noise_level: float = 0.1
    samples_per_class: int = 20
    test_samples_per_class: int = 10
    distractors: int = 0
    data_seed: int = 0
    # artifacts
    checkpoint: str = ""

    def __post_init__(self):
        if isinstance(self.num_selects, str):
            self.num_selects = tuple(int(v) for v in self.num_selects.replace(" ", "").split(",") if v)
        self.num_selects = tuple(self.num_selects)
        if self.resize_size == 0:
            self.resize_size = resize_for(self.input_size)
        if self.batch_size < 1 or self.accum_steps < 1 or self.epochs < 0:
            raise ConfigError("batch_size and accum_steps must be >= 1, epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_steps

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def norm_stats(self):
        if self.normalization == "synthetic":
            return SYNTHETIC_MEAN, SYNTHETIC_STD
        if self.normalization == "imagenet":
            return IMAGENET_MEAN, IMAGENET_STD
        raise ConfigError(f"unknown normalization {self.normalization!r}")

    def herbs_config(self, num_classes: int) -> HerbsConfig:
        return HerbsConfig(
            num_classes=num_classes,
            neck_dim=self.neck_dim,
            num_selects=self.num_selects,
            weights=BsLossWeights(self.lambda_m, self.lambda_d, self.lambda_l),
            refine_weight=self.lambda_r,
            schedule=TemperatureSchedule(self.temperature, self.temperature_mode),
            dropped_mode=self.dropped_mode,
            readout=self.readout,
            act=self.act,
            t_squared=self.t_squared,
            head_bias_init=self.head_bias_init,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_generic=self.num_generic,
            fine_per_generic=self.fine_per_generic,
            image_size=self.input_size,
            patch_size=self.patch_size,
            noise_level=self.noise_level,
            samples_per_class=self.samples_per_class,
            test_samples_per_class=self.test_samples_per_class,
            distractors=self.distractors,
        )

    # flat key/value text -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], base: "TrainConfig | None" = None) -> "TrainConfig":
        values = dataclasses.asdict(base) if base is not None else {}
        if base is not None and values.get("resize_size") == resize_for(base.input_size):
            values["resize_size"] = 0
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in pairs:
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(raw, getattr(cls, key, None) if key != "num_selects" else ())
        return cls(**values)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_pairs(parse_pairs(text), base)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, overrides: Sequence[str]) -> "TrainConfig":
        return TrainConfig.from_pairs([split_pair(o) for o in overrides], self)


def split_pair(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"expected key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            pairs.append(split_pair(line))
        except ConfigError:
            raise ConfigError(f"line {n}: expected 'key = value'") from None
    return pairs


def _parse_value(raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def steps_per_epoch(num_samples: int, batch_size: int, accum_steps: int) -> int:
    """Optimizer steps per epoch; a trailing partial window still steps."""
    return math.ceil(math.ceil(num_samples / batch_size) / accum_steps)


def accumulate_and_step(
    optimizer: torch.optim.Optimizer,
    window: Sequence,
    loss_fn: Callable[[object], torch.Tensor],
    lr: float | None = None,
    clip_grad: float = 0.0,
) -> list:
    """One optimizer step over a window of micro-batches, gradients averaged.

    ``loss_fn(batch)`` returns either a scalar loss or ``(loss, aux)``;
    the per-batch outputs are returned.
    """
    optimizer.zero_grad(set_to_none=True)
    outs = []
    for batch in window:
        out = loss_fn(batch)
        loss = out[0] if isinstance(out, tuple) else out
        (loss / len(window)).backward()
        outs.append(out)
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    if clip_grad > 0:
        params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, clip_grad)
    optimizer.step()
    return outs


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


class EpochView(Dataset):
    """Augmented view of a dataset whose draws depend only on (seed, epoch, index)."""

    def __init__(self, dataset, cfg: TrainConfig, epoch: int, phase: str = "train"):
        self.dataset, self.cfg, self.epoch, self.phase = dataset, cfg, epoch, phase

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, i):
        image, label, _ = self.dataset[i]
        cfg = self.cfg
        mean, std = cfg.norm_stats
        if cfg.augment or self.phase == "test":
            rng = np.random.default_rng([cfg.seed, self.epoch, i]) if self.phase == "train" else None
            image = augment(image, self.phase, cfg.input_size, cfg.resize_size, mean, std, rng)
        else:
            image = (image - torch.tensor(mean).view(3, 1, 1)) / torch.tensor(std).view(3, 1, 1)
        return image, label


def num_workers() -> int:
    return max(0, int(os.environ.get("HERBS_NUM_WORKERS", "0")))


def epoch_batches(dataset, cfg: TrainConfig, epoch: int, phase: str = "train"):
    """Deterministic micro-batches ``(pixels, labels)`` for one epoch."""
    if phase == "train":
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset)).tolist()
    else:
        order = list(range(len(dataset)))
    chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    loader = DataLoader(EpochView(dataset, cfg, epoch, phase), batch_sampler=chunks, num_workers=num_workers())
    for pixels, labels in loader:
        yield pixels.to(cfg.torch_dtype), labels


def build_model(cfg: TrainConfig, num_classes: int) -> nn.Module:
    backbone = build_toy_backbone(cfg.backbone, cfg.base_width, seed=cfg.seed)
    net = build_variant(cfg.variant, backbone, cfg.herbs_config(num_classes), seed=cfg.seed + 1)
    return net.to(cfg.torch_dtype)


def load_datasets(cfg: TrainConfig):
    """(train, test, fine_to_generic) for the configured data source."""
    if cfg.dataset == "synthetic":
        data = make_synthetic_dataset(cfg.synthetic_spec(), seed=cfg.data_seed)
        return data.train, data.test, data.fine_to_generic
    root = Path(cfg.dataset)
    if not (root / "train").is_dir() or not (root / "test").is_dir():
        raise ConfigError(f"{root} must contain train/ and test/ class folders")
    train, test = ImageFolderDataset(root / "train"), ImageFolderDataset(root / "test")
    return train, test, train.fine_to_generic


# checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, net: nn.Module, cfg: TrainConfig, epoch: int,
                    optimizer: torch.optim.Optimizer | None = None, step: int = 0, num_classes: int | None = None):
    torch.save(
        {
            "model": net.state_dict(),
            "config": cfg.to_text(),
            "epoch": epoch,
            "step": step,
            "num_classes": num_classes,
            "optimizer": None if optimizer is None else optimizer.state_dict(),
            "rng_state": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path: str | Path):
    """Returns ``(net, cfg, state)``; ``state`` holds epoch/step/optimizer/rng entries."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_text(state["config"])
    net = build_model(cfg, state["num_classes"])
    net.load_state_dict(state["model"])
    return net, cfg, state


# training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    net: nn.Module
    optimizer: torch.optim.Optimizer
    history: list[dict] = field(default_factory=list)
    step: int = 0
    epoch: int = 0


def train(
    net: nn.Module,
    dataset,
    cfg: TrainConfig,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    step: int = 0,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    num_classes: int | None = None,
    end_epoch: int | None = None,
) -> TrainResult:
    """SGD with cosine decay over ``cfg.epochs``; every epoch appends one log record.

    Training may stop early at ``end_epoch`` and later resume from a
    checkpoint: data order, augmentation draws and the lr schedule depend
    only on the config, so a resumed run matches an uninterrupted one.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    optimizer = make_optimizer(net.parameters(), cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    per_epoch = steps_per_epoch(len(dataset), cfg.batch_size, cfg.accum_steps)
    total = max(1, per_epoch * cfg.epochs)
    end_epoch = cfg.epochs if end_epoch is None else end_epoch
    result = TrainResult(net, optimizer, step=step, epoch=start_epoch)
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, end_epoch):
            net.train()
            sums: dict[str, float] = {}
            correct = seen = 0

            def loss_fn(batch, epoch=epoch):
                pixels, labels = batch
                bundle, losses = net(pixels, labels, epoch=epoch)
                losses.check_finite(result.step)
                return losses.total, (bundle, losses, labels)

            batches = list(epoch_batches(dataset, cfg, epoch))
            lr = cfg.lr
            for w in range(0, len(batches), cfg.accum_steps):
                lr = lr_at(result.step, total, cfg.lr)
                outs = accumulate_and_step(optimizer, batches[w:w + cfg.accum_steps], loss_fn, lr, cfg.clip_grad)
                result.step += 1
                for _, (bundle, losses, labels) in outs:
                    n = len(labels)
                    for k, v in losses.as_dict().items():
                        sums[k] = sums.get(k, 0.0) + v * n
                    correct += int((bundle.fused_probs.argmax(-1) == labels).sum())
                    seen += n
            record = {"epoch": epoch, "lr": lr, "steps": result.step}
            record.update({k: v / seen for k, v in sums.items()})
            if not math.isfinite(record["temperature"]):
                record["temperature"] = None
            record["train_acc"] = 100.0 * correct / seen
            result.history.append(record)
            result.epoch = epoch + 1
            log.info("epoch %d %s", epoch, record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, net, cfg, epoch + 1, optimizer, result.step, num_classes)
    finally:
        if log_file:
            log_file.close()
    return result
