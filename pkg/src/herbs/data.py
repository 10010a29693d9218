"""Datasets and augmentation.

The synthetic generator builds a two-level label hierarchy: every generic
class owns a background texture, and every fine class inside it owns a small
coloured patch dropped at a random location. Stored patch masks let tests
ask where a trained model looks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import Dataset
from torchvision.transforms.v2 import functional as TF

from .errors import ConfigError, DimensionMismatchError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SYNTHETIC_MEAN = (0.5, 0.5, 0.5)
SYNTHETIC_STD = (0.5, 0.5, 0.5)
BLUR_KERNEL = 5
BLUR_SIGMA = (0.1, 2.0)


def resize_for(input_size: int) -> int:
    """Pre-crop resize side: 384 -> 510, 448 -> 600, else proportional to 510/384."""
    return {384: 510, 448: 600}.get(input_size, round(input_size * 510 / 384))


def augment(
    image: torch.Tensor,
    phase: str,
    input_size: int,
    resize_size: int | None = None,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
    rng: np.random.Generator | None = None,
    flip_p: float = 0.5,
    blur_p: float = 0.5,
) -> torch.Tensor:
    """Resize, crop, (flip, blur,) normalise a ``[3, H, W]`` image in [0, 1].

    Train phase draws crop offset, flip and blur from ``rng``; test phase is
    deterministic (center crop).
    """
    resize_size = resize_for(input_size) if resize_size is None else resize_size
    if resize_size < input_size:
        raise DimensionMismatchError(f"resize {resize_size} is smaller than crop {input_size}")
    image = TF.resize(image, [resize_size, resize_size], antialias=True)
    if phase == "train":
        if rng is None:
            raise ConfigError("train-phase augmentation needs an rng")
        top = int(rng.integers(0, resize_size - input_size + 1))
        left = int(rng.integers(0, resize_size - input_size + 1))
        image = image[:, top:top + input_size, left:left + input_size]
        if rng.random() < flip_p:
            image = image.flip(-1)
        if rng.random() < blur_p:
            sigma = float(rng.uniform(*BLUR_SIGMA))
            image = TF.gaussian_blur(image, [BLUR_KERNEL, BLUR_KERNEL], [sigma, sigma])
    elif phase == "test":
        image = TF.center_crop(image, [input_size, input_size])
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    return TF.normalize(image, list(mean), list(std))


@dataclass
class SyntheticSpec:
    num_generic: int = 5
    fine_per_generic: int = 2
    image_size: int = 64
    patch_size: int = 10
    noise_level: float = 0.1
    samples_per_class: int = 20
    test_samples_per_class: int | None = None  # defaults to samples_per_class // 2
    distractors: int = 0  # patches of other generic classes' fine classes pasted as clutter

    @property
    def num_classes(self) -> int:
        return self.num_generic * self.fine_per_generic

    def validate(self) -> None:
        if self.num_generic < 1 or self.fine_per_generic < 1 or self.samples_per_class < 1:
            raise ConfigError("class and sample counts must be positive")
        if self.patch_size < 1 or self.patch_size > self.image_size - 2:
            raise ConfigError(f"patch {self.patch_size} does not fit strictly inside a {self.image_size} image")
        if self.distractors and self.num_generic < 2:
            raise ConfigError("distractors need at least two generic classes")


class ImageDataset(Dataset):
    """In-memory labelled images; ``__getitem__`` yields (image, fine, generic)."""

    def __init__(self, images, labels, generic_labels, ids, masks=None, fine_to_generic=None):
        self.images = images
        self.labels = labels
        self.generic_labels = generic_labels
        self.ids = list(ids)
        self.masks = masks
        self.fine_to_generic = fine_to_generic or {}

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int):
        return self.images[i], int(self.labels[i]), int(self.generic_labels[i])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class SyntheticData:
    train: ImageDataset
    test: ImageDataset
    fine_to_generic: dict[int, str]
    spec: SyntheticSpec


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(2, 6)
        phase = rng.uniform(0, 2 * math.pi)
        tex += np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    tint = rng.uniform(-1, 1, size=3)
    img = base[:, None, None] + 0.08 * tex[None] * tint[:, None, None]
    return img.clip(0, 1)


def _patch(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = rng.integers(0, 2, size=(3, 3, 3)).astype(float)
    idx = np.minimum(np.arange(size) * 3 // size, 2)
    return cells[:, idx][:, :, idx]


def _paste(img: np.ndarray, patch: np.ndarray, rng: np.random.Generator, mask: np.ndarray | None = None):
    size, p = img.shape[-1], patch.shape[-1]
    top, left = rng.integers(1, size - p, size=2)
    img[:, top:top + p, left:left + p] = patch
    if mask is not None:
        mask[top:top + p, left:left + p] = True


def make_synthetic_dataset(spec: SyntheticSpec, seed: int = 0) -> SyntheticData:
    """Generate deterministic train/test splits for ``spec`` and ``seed``."""
    spec.validate()
    n_test = spec.test_samples_per_class
    if n_test is None:
        n_test = spec.samples_per_class // 2
    rng = np.random.default_rng(seed)
    size, C = spec.image_size, spec.num_classes
    backgrounds = [_texture(rng, size) for _ in range(spec.num_generic)]
    patches = [_patch(rng, spec.patch_size) for _ in range(C)]
    generic_of = [c // spec.fine_per_generic for c in range(C)]
    fine_to_generic = {c: f"generic{generic_of[c]}" for c in range(C)}

    def split(name: str, per_class: int, split_rng: np.random.Generator) -> ImageDataset:
        n = per_class * C
        images = np.empty((n, 3, size, size), dtype=np.float32)
        masks = np.zeros((n, size, size), dtype=bool)
        labels = np.repeat(np.arange(C), per_class)
        for i, c in enumerate(labels):
            img = backgrounds[generic_of[c]].copy()
            others = [o for o in range(C) if generic_of[o] != generic_of[c]]
            for _ in range(spec.distractors):
                _paste(img, patches[others[split_rng.integers(len(others))]], split_rng)
            _paste(img, patches[c], split_rng, masks[i])
            if spec.noise_level > 0:
                img = img + split_rng.normal(0, spec.noise_level, size=img.shape)
            images[i] = img.clip(0, 1)
        return ImageDataset(
            torch.from_numpy(images),
            torch.from_numpy(labels),
            torch.tensor([generic_of[c] for c in labels]),
            [f"{name}_{i:05d}" for i in range(n)],
            torch.from_numpy(masks),
            fine_to_generic,
        )

    train_rng, test_rng = (np.random.default_rng([seed, k]) for k in (1, 2))
    return SyntheticData(
        split("train", spec.samples_per_class, train_rng),
        split("test", n_test, test_rng),
        fine_to_generic,
        spec,
    )


IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}


def load_image(path: str | Path) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


class ImageFolderDataset(Dataset):
    """``root/<class_name>/<image>`` layout (CUB-200 and NA-Birds train/test
    folders follow it). Class indices follow sorted folder names. An optional
    ``generic_of`` maps each class name to its generic class name.
    """

    def __init__(self, root: str | Path, generic_of: dict[str, str] | None = None):
        root = Path(root)
        self.classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        if not self.classes:
            raise ConfigError(f"no class folders under {root}")
        self.samples = [
            (p, ci)
            for ci, c in enumerate(self.classes)
            for p in sorted((root / c).iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES
        ]
        generic_of = generic_of or {}
        names = sorted(set(generic_of.get(c, c) for c in self.classes))
        self.fine_to_generic = {ci: generic_of.get(c, c) for ci, c in enumerate(self.classes)}
        self._generic_idx = {n: i for i, n in enumerate(names)}
        self.ids = [str(p.relative_to(root)) for p, _ in self.samples]
        self.masks = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int):
        path, label = self.samples[i]
        return load_image(path), label, self._generic_idx[self.fine_to_generic[label]]

    @property
    def num_classes(self) -> int:
        return len(self.classes)
