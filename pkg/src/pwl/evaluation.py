"""Accuracy of pure and hybrid models."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .datapipe import ImageDataset, iterate_batches
from .hybrid import ORDERS, ReplacementMask, compose_forward, prefix_masks


@torch.no_grad()
def accuracy(model, data: ImageDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``model(x)`` over the whole split, in [0, 1]."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    correct = 0
    for x, y in iterate_batches(data, batch_size):
        correct += int((model(x).argmax(-1) == y).sum())
    if was_training:
        model.train()
    return correct / max(len(data), 1)


@torch.no_grad()
def eval_mask(student, teacher, bank, mask: ReplacementMask, data: ImageDataset,
              batch_size: int = 256) -> float:
    """Top-1 accuracy of the hybrid selected by ``mask``."""
    modes = [(m, m.training) for m in (student, teacher, bank)]
    for m, _ in modes:
        m.eval()
    try:
        correct = 0
        for x, y in iterate_batches(data, batch_size):
            logits = compose_forward(student, teacher, bank, x, mask)
            correct += int((logits.argmax(-1) == y).sum())
    finally:
        for m, flag in modes:
            m.train(flag)
    return correct / max(len(data), 1)


@dataclass
class CrossAccuracyResult:
    masks: list[str]
    accuracies: list[float]
    mean: float = field(init=False)

    def __post_init__(self):
        self.mean = sum(self.accuracies) / len(self.accuracies) if self.accuracies else float("nan")


def cross_accuracy(student, teacher, bank, data: ImageDataset,
                   batch_size: int = 256) -> CrossAccuracyResult:
    """Mean accuracy over the intermediate prefix hybrids {1}, ..., {1..L-1}."""
    L = student.num_blocks
    if L < 2:
        raise ValueError("cross accuracy needs at least two blocks")
    masks = prefix_masks(L)[1:-1]
    accs = [eval_mask(student, teacher, bank, m, data, batch_size) for m in masks]
    return CrossAccuracyResult([str(m) for m in masks], accs)


def staged_accuracies(student, teacher, bank, data: ImageDataset, order: str = "prefix",
                      batch_size: int = 256) -> list[tuple[str, float]]:
    """(mask, accuracy) for every mask of a loading order, endpoints included."""
    return [(str(m), eval_mask(student, teacher, bank, m, data, batch_size))
            for m in ORDERS[order](student.num_blocks)]
