"""Teacher pretraining and progressive-loading distillation loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import torch
import torch.nn as nn

from .blocknet import BlockNet, BlockNetSpec, SpecError, build, check_pair
from .converter import CONVERTER_LR_SCALE, ConverterBank, build_bank
from .datapipe import AugmentPolicy, ImageDataset, iterate_batches
from .evaluation import accuracy, cross_accuracy
from .losses import LossWeights, combine, feature_loss, hard_loss, recon_loss, total_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "hard", "soft", "feature", "recon", "random_cross", "total",
                  "val_acc", "cross_acc"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimSchedule:
    optimizer: str = "sgd"  # "sgd" (momentum) or "adamw"
    base_lr: float = 5e-2
    end_lr: float = 1e-5
    schedule: str = "cosine"  # or "constant"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 160
    batch_size: int = 128
    converter_lr_scale: float = CONVERTER_LR_SCALE
    augment: bool = True
    # two-stage (ViT) runs
    stage1_epochs: int = 0  # 0 -> same as ``epochs``
    finetune_epochs: int = 5
    finetune_lr: float = 5e-5

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0 or self.end_lr < 0:
            raise ValueError("learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        """Base learning rate during ``epoch`` (0-based); hits ``end_lr`` on the last."""
        if self.schedule == "constant" or self.epochs == 1:
            return self.base_lr
        t = epoch / (self.epochs - 1)
        return self.end_lr + (self.base_lr - self.end_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    # (base lr, converter lr) actually used at every optimisation step
    step_lrs: list[tuple[float, float]] = field(default_factory=list)

    def last(self) -> dict:
        return self.rows[-1] if self.rows else {}


_NORM_TYPES = (nn.BatchNorm2d, nn.LayerNorm)


def _param_groups(student: nn.Module, bank: ConverterBank | None, sched: OptimSchedule,
                  lr: float) -> list[dict]:
    decay, no_decay = [], []
    for module in student.modules():
        for p in module.parameters(recurse=False):
            (no_decay if isinstance(module, _NORM_TYPES) else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": sched.weight_decay, "lr": lr, "scale": 1.0},
        {"params": no_decay, "weight_decay": 0.0, "lr": lr, "scale": 1.0},
    ]
    if bank is not None:
        weights = [p for n, p in bank.named_parameters() if not n.endswith("bias")]
        biases = [p for n, p in bank.named_parameters() if n.endswith("bias")]
        conv_lr = lr * sched.converter_lr_scale
        groups += [
            {"params": weights, "weight_decay": sched.weight_decay, "lr": conv_lr,
             "scale": sched.converter_lr_scale, "converter": True},
            {"params": biases, "weight_decay": 0.0, "lr": conv_lr,
             "scale": sched.converter_lr_scale, "converter": True},
        ]
    return [g for g in groups if g["params"]]


def make_optimizer(student, bank, sched: OptimSchedule, lr: float | None = None):
    lr = sched.base_lr if lr is None else lr
    groups = _param_groups(student, bank, sched, lr)
    if sched.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=lr, momentum=sched.momentum)
    return torch.optim.AdamW(groups, lr=lr)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr * g["scale"]


def _record_lrs(history: TrainHistory, opt) -> None:
    base = next(g["lr"] for g in opt.param_groups if not g.get("converter"))
    conv = next((g["lr"] for g in opt.param_groups if g.get("converter")), float("nan"))
    history.step_lrs.append((base, conv))


def _check_finite(value: torch.Tensor, epoch: int, step: int, what: str) -> None:
    if not torch.isfinite(value):
        raise TrainingDiverged(f"{what} became {float(value)} at epoch {epoch}, step {step}; "
                               f"try a smaller learning rate")


def _append_csv(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def _policy(sched: OptimSchedule) -> AugmentPolicy | None:
    return AugmentPolicy() if sched.augment else None


def train_teacher(spec: BlockNetSpec, data: ImageDataset, sched: OptimSchedule, seed: int = 0,
                  val: ImageDataset | None = None, metrics_csv=None,
                  checkpoint: str | Path | None = None) -> tuple[BlockNet, TrainHistory]:
    """Plain supervised training (cross-entropy) with the cosine schedule."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = build(spec, seed)
    net.train()
    opt = make_optimizer(net, None, sched)
    history = TrainHistory()
    for epoch in range(sched.epochs):
        _set_lr(opt, sched.lr_at(epoch))
        total, seen, correct = 0.0, 0, 0
        for step, (x, y) in enumerate(iterate_batches(data, sched.batch_size, shuffle=True,
                                                      policy=_policy(sched), generator=gen)):
            logits = net(x)
            loss = hard_loss(logits, y)
            _check_finite(loss, epoch, step, "teacher loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            _record_lrs(history, opt)
            total += loss.item() * len(y)
            seen += len(y)
            correct += int((logits.argmax(-1) == y).sum())
        row = {"epoch": epoch, "hard": total / seen, "total": total / seen,
               "train_acc": correct / seen}
        if val is not None:
            row["val_acc"] = accuracy(net, val)
        history.rows.append(row)
        log.info("teacher epoch %d: %s", epoch, row)
        if metrics_csv:
            _append_csv(metrics_csv, row)
    net.eval()
    if checkpoint:
        from .checkpoint import save_checkpoint
        save_checkpoint(net, checkpoint)
    return net, history


def _run_epochs(student, teacher, bank, data, weights, sched, epochs, opt, history, gen,
                val, metrics_csv, lr_fn, objective, epoch_offset=0):
    for e in range(epochs):
        epoch = epoch_offset + e
        _set_lr(opt, lr_fn(e))
        student.train()
        bank.train()
        sums: dict[str, float] = {}
        batches = 0
        for step, (x, y) in enumerate(iterate_batches(data, sched.batch_size, shuffle=True,
                                                      policy=_policy(sched), generator=gen)):
            report = objective(x, y)
            _check_finite(report.total, epoch, step, "total loss")
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            _record_lrs(history, opt)
            for k, v in report.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        if val is not None:
            row["val_acc"] = accuracy(student, val)
            row["cross_acc"] = cross_accuracy(student, teacher, bank, val).mean
        history.rows.append(row)
        log.info("pwl epoch %d: %s", epoch, row)
        if metrics_csv:
            _append_csv(metrics_csv, row)


def train_pwl(student_spec: BlockNetSpec, teacher: BlockNet, data: ImageDataset,
              weights: LossWeights = LossWeights(), sched: OptimSchedule = OptimSchedule(),
              mode: str = "cnn", seed: int = 0, tier: str = "tiny",
              val: ImageDataset | None = None, metrics_csv=None
              ) -> tuple[BlockNet, ConverterBank, TrainHistory]:
    """Distil a student (and its converter bank) from a frozen teacher.

    ``mode="cnn"`` optimises the full objective for ``sched.epochs``.
    ``mode="vit"`` first matches intermediate representations only (feature
    and reconstruction terms), then fine-tunes on the full objective with
    AdamW at ``sched.finetune_lr`` for ``sched.finetune_epochs``.
    """
    if mode not in ("cnn", "vit"):
        raise ValueError(f"mode must be 'cnn' or 'vit', got {mode!r}")
    try:
        check_pair(teacher.spec, student_spec)
    except SpecError as exc:
        raise ValueError(f"teacher/student mismatch: {exc}") from exc
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    teacher.freeze()
    student = build(student_spec, seed)
    bank = build_bank(teacher.spec, student_spec, tier, seed + 1)
    history = TrainHistory()

    def full(x, y):
        return total_loss(student, teacher, bank, x, y, weights, gen)

    def ir_match(x, y):
        with torch.no_grad():
            feats_t, _ = teacher.features(x)
        feats_s, _ = student.features(x)
        zero = feats_s[0].new_zeros(())
        return combine(zero, zero, feature_loss(bank, feats_t, feats_s),
                       recon_loss(bank, feats_t, feats_s), zero,
                       LossWeights(1.0, weights.temperature, weights.lambda1, weights.lambda2, 0.0))

    opt = make_optimizer(student, bank, sched)
    if mode == "cnn":
        _run_epochs(student, teacher, bank, data, weights, sched, sched.epochs, opt, history,
                    gen, val, metrics_csv, sched.lr_at, full)
    else:
        stage1 = sched.stage1_epochs or sched.epochs
        _run_epochs(student, teacher, bank, data, weights, sched, stage1, opt, history, gen,
                    val, metrics_csv, sched.lr_at, ir_match)
        ft = OptimSchedule(**{**{f.name: getattr(sched, f.name) for f in fields(sched)},
                              "optimizer": "adamw", "schedule": "constant",
                              "base_lr": sched.finetune_lr, "weight_decay": 1e-2})
        opt = make_optimizer(student, bank, ft)
        _run_epochs(student, teacher, bank, data, weights, ft, sched.finetune_epochs, opt,
                    history, gen, val, metrics_csv, ft.lr_at, full, epoch_offset=stage1)
    student.eval()
    bank.eval()
    return student, bank, history
