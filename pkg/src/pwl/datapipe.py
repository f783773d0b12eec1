"""Dataset ingestion, augmentation and normalisation.

CIFAR-10/100 are read from the official *binary* archives (no network
access). A seeded synthetic image set stands in for them in tests and
desk-scale experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_SHAPE = (3, 32, 32)
_RECORD_PIXELS = 3 * 32 * 32

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

DATASETS = ("cifar10", "cifar100", "synthetic")


class DatasetError(IOError):
    """Missing or corrupt dataset files."""


class Sample(NamedTuple):
    image: torch.Tensor  # (3, 32, 32)
    label: int


@dataclass(frozen=True)
class AugmentPolicy:
    crop_padding: int = 4
    hflip_prob: float = 0.5
    rotation_deg: float = 15.0

    def __post_init__(self):
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be >= 0")

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(0, 0.0, 0.0)


class ImageDataset:
    """Images as one (N, C, H, W) float tensor in [0, 1] plus integer labels."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, num_classes: int,
                 mean=None, std=None, name: str = ""):
        if images.shape[0] != labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError("label out of range")
        self.images = images
        self.labels = labels.long()
        self.num_classes = num_classes
        channels = images.shape[1]
        self.mean = tuple(mean) if mean is not None else (0.5,) * channels
        self.std = tuple(std) if std is not None else (0.25,) * channels
        self.name = name

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes,
                            self.mean, self.std, self.name)

    def split(self, n_first: int) -> tuple["ImageDataset", "ImageDataset"]:
        n = len(self)
        return self.subset(range(n_first)), self.subset(range(n_first, n))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_records(path: Path, label_bytes: int, label_index: int) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + _RECORD_PIXELS
    if raw.size == 0 or raw.size % record:
        raise DatasetError(f"corrupt dataset file (size {raw.size} is not a multiple of "
                           f"{record}): {path}")
    raw = raw.reshape(-1, record)
    return raw[:, label_bytes:].reshape(-1, *IMAGE_SHAPE), raw[:, label_index].copy()


def _cifar(root: Path, name: str, split: str) -> ImageDataset:
    if name == "cifar10":
        base = root / "cifar-10-batches-bin"
        files = ([f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
        label_bytes, label_index, classes = 1, 0, 10
        mean, std = CIFAR10_MEAN, CIFAR10_STD
    else:
        base = root / "cifar-100-binary"
        files = ["train.bin" if split == "train" else "test.bin"]
        # coarse label byte first, fine label second
        label_bytes, label_index, classes = 2, 1, 100
        mean, std = CIFAR100_MEAN, CIFAR100_STD
    images, labels = [], []
    for f in files:
        im, lb = _read_records(base / f, label_bytes, label_index)
        if lb.size and lb.max() >= classes:
            raise DatasetError(f"corrupt dataset file (label {lb.max()} >= {classes}): {base / f}")
        images.append(im)
        labels.append(lb)
    x = torch.from_numpy(np.concatenate(images)).float().div_(255.0)
    y = torch.from_numpy(np.concatenate(labels).astype(np.int64))
    return ImageDataset(x, y, classes, mean, std, name)


def make_synthetic(n: int, num_classes: int = 2, seed: int = 0, noise: float = 0.1,
                   image_size: int = 32, max_shift: int = 0, templates_seed: int | None = None,
                   mix: float = 0.0, detail: int = 4) -> ImageDataset:
    """Seeded toy images: each class is a smooth random template, each sample a
    (possibly shifted) copy of its class template plus Gaussian pixel noise.

    With the defaults the two classes are linearly separable. ``max_shift``,
    ``noise``, ``mix`` (weight of a second, random class template blended in) and
    ``detail`` (resolution of the random grid the templates are upsampled from)
    make the task harder. ``templates_seed`` fixes the class templates
    independently of the per-sample seed, so train and test splits can share them.
    """
    if n < 0 or num_classes < 2:
        raise ValueError("need n >= 0 and num_classes >= 2")
    tgen = torch.Generator().manual_seed(seed if templates_seed is None else templates_seed)
    coarse = torch.rand(num_classes, 3, detail, detail, generator=tgen)
    templates = F.interpolate(coarse, size=(image_size, image_size), mode="bilinear",
                              align_corners=False)
    gen = torch.Generator().manual_seed(seed + 1_000_003)
    labels = torch.arange(n) % num_classes
    labels = labels[torch.randperm(n, generator=gen)]
    images = templates[labels].clone()
    if mix > 0:
        other = torch.randint(0, num_classes, (n,), generator=gen)
        weight = mix * torch.rand(n, 1, 1, 1, generator=gen)
        images = (1 - weight) * images + weight * templates[other]
    if max_shift > 0:
        shifts = torch.randint(-max_shift, max_shift + 1, (n, 2), generator=gen)
        images = torch.stack([torch.roll(img, (int(dy), int(dx)), dims=(1, 2))
                              for img, (dy, dx) in zip(images, shifts)])
    images = (images + noise * torch.randn(images.shape, generator=gen)).clamp_(0.0, 1.0)
    return ImageDataset(images, labels, num_classes, name="synthetic")


def load_dataset(name: str, split: str = "train", root: str | Path = "data",
                 n: int = 1000, seed: int = 0, **synthetic_kw) -> ImageDataset:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if name == "synthetic":
        # disjoint sample seeds per split over shared class templates
        offset = 0 if split == "train" else 7919
        synthetic_kw.setdefault("templates_seed", seed)
        return make_synthetic(n, seed=seed + offset, **synthetic_kw)
    if name in ("cifar10", "cifar100"):
        return _cifar(Path(root), name, split)
    raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")


# ---------------------------------------------------------------------------
# augmentation / normalisation
# ---------------------------------------------------------------------------

def _crop_offsets(n: int, padding: int, generator) -> torch.Tensor:
    return torch.randint(0, 2 * padding + 1, (n, 2), generator=generator)


def pad_crop(images: torch.Tensor, padding: int, offsets: torch.Tensor) -> torch.Tensor:
    """Zero-pad every side by ``padding`` then cut the original size at ``offsets``
    (row, column) in the padded frame."""
    h, w = images.shape[-2:]
    padded = F.pad(images, (padding,) * 4)
    return torch.stack([padded[i, :, r:r + h, c:c + w]
                        for i, (r, c) in enumerate(offsets.tolist())])


def rotate(images: torch.Tensor, degrees: torch.Tensor) -> torch.Tensor:
    """Rotate each image about its centre; bilinear, zeros outside."""
    theta = degrees.to(images.dtype) * (math.pi / 180.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    zero = torch.zeros_like(cos)
    mats = torch.stack([torch.stack([cos, -sin, zero], -1),
                        torch.stack([sin, cos, zero], -1)], 1)
    grid = F.affine_grid(mats, list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=False)


def augment_batch(images: torch.Tensor, policy: AugmentPolicy,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """crop -> flip -> rotate on a (N, C, H, W) batch of un-normalised images."""
    n = images.shape[0]
    out = images
    if policy.crop_padding > 0:
        out = pad_crop(out, policy.crop_padding, _crop_offsets(n, policy.crop_padding, generator))
    if policy.hflip_prob > 0:
        flip = torch.rand(n, generator=generator) < policy.hflip_prob
        out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    if policy.rotation_deg > 0:
        angles = (torch.rand(n, generator=generator) * 2 - 1) * policy.rotation_deg
        out = rotate(out, angles)
    return out


def augment(sample: Sample, policy: AugmentPolicy,
            generator: torch.Generator | None = None) -> Sample:
    return Sample(augment_batch(sample.image[None], policy, generator)[0], sample.label)


def _channel_stats(mean, std, like: torch.Tensor):
    mean = torch.as_tensor(mean, dtype=like.dtype).reshape(-1, 1, 1)
    std = torch.as_tensor(std, dtype=like.dtype).reshape(-1, 1, 1)
    if (std <= 0).any():
        raise ValueError("std must be positive in every channel")
    return mean, std


def normalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    """(x - mean) / std per channel; works on (C,H,W) and (N,C,H,W)."""
    m, s = _channel_stats(mean, std, images)
    return (images - m) / s


def denormalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    m, s = _channel_stats(mean, std, images)
    return images * s + m


def normalize_sample(sample: Sample, mean, std) -> Sample:
    return Sample(normalize(sample.image, mean, std), sample.label)


def iterate_batches(data: ImageDataset, batch_size: int, *, shuffle: bool = False,
                    policy: AugmentPolicy | None = None,
                    generator: torch.Generator | None = None
                    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield normalised (x, y) batches; augmentation happens before normalisation."""
    n = len(data)
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = data.images[idx]
        if policy is not None:
            x = augment_batch(x, policy, generator)
        yield normalize(x, data.mean, data.std), data.labels[idx]
