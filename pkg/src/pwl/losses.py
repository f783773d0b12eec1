"""The progressive-loading training objective.

total = alpha * hard + (1 - alpha) * soft
        + lambda1 * feature + lambda2 * recon + lambda3 * random_cross

Squared-error terms are element means; the KL term sums over classes and
averages over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .converter import ConverterBank, reconstruction_error
from .hybrid import ReplacementMask, compose_forward, sample_random_mask


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.6
    temperature: float = 4.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    hard: torch.Tensor
    soft: torch.Tensor
    feature: torch.Tensor
    recon: torch.Tensor
    random_cross: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).detach().item() for f in fields(self)}


def hard_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    num_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return F.cross_entropy(logits, labels)


def soft_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
              temperature: float) -> torch.Tensor:
    """T^2 * KL(softmax(z_t/T) || softmax(z_s/T)), batch mean."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=-1)
    log_p_s = F.log_softmax(student_logits / temperature, dim=-1)
    kl = F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)
    return kl * temperature ** 2


def _check_aligned(bank, feats_t, feats_s):
    if not (len(bank) == len(feats_t) == len(feats_s)):
        raise ValueError(f"feature lists not aligned with the bank: {len(bank)} boundaries, "
                         f"{len(feats_t)} teacher and {len(feats_s)} student features")


def feature_loss(bank: ConverterBank, feats_t: list, feats_s: list) -> torch.Tensor:
    """Sum over boundaries of |Enc(f_t) - f_s|^2 + |Dec(f_s) - f_t|^2."""
    _check_aligned(bank, feats_t, feats_s)
    total = feats_s[0].new_zeros(())
    for pair, ft, fs in zip(bank.pairs, feats_t, feats_s):
        total = total + (pair.encode(ft) - fs).pow(2).mean() + (pair.decode(fs) - ft).pow(2).mean()
    return total


def recon_loss(bank: ConverterBank, feats_t: list, feats_s: list) -> torch.Tensor:
    _check_aligned(bank, feats_t, feats_s)
    total = feats_s[0].new_zeros(())
    for pair, ft, fs in zip(bank.pairs, feats_t, feats_s):
        total = total + reconstruction_error(pair, ft, fs)
    return total


def random_cross_loss(student, teacher, bank, x, y, generator=None,
                      mask: ReplacementMask | None = None) -> torch.Tensor:
    """Cross-entropy of a hybrid under one randomly drawn mask."""
    if mask is None:
        mask = sample_random_mask(student.num_blocks, generator)
    return F.cross_entropy(compose_forward(student, teacher, bank, x, mask), y)


def combine(hard, soft, feature, recon, random_cross, weights: LossWeights) -> LossReport:
    w = weights
    total = (w.alpha * hard + (1 - w.alpha) * soft
             + w.lambda1 * feature + w.lambda2 * recon + w.lambda3 * random_cross)
    as_t = torch.as_tensor
    return LossReport(as_t(hard), as_t(soft), as_t(feature), as_t(recon),
                      as_t(random_cross), as_t(total))


def total_loss(student, teacher, bank, x, y, weights: LossWeights, generator=None,
               mask: ReplacementMask | None = None) -> LossReport:
    """Every component for one batch.

    Feature and reconstruction terms with zero weight are still evaluated (without
    gradient) for reporting; a zero-weight random-cross term skips its hybrid pass.
    """
    with torch.no_grad():
        feats_t, z_t = teacher.features(x)
    feats_s, z_s = student.features(x)
    zero = z_s.new_zeros(())
    hard = hard_loss(z_s, y)
    soft = soft_loss(z_t, z_s, weights.temperature) if weights.alpha < 1 else zero
    with torch.set_grad_enabled(torch.is_grad_enabled() and weights.lambda1 > 0):
        feat = feature_loss(bank, feats_t, feats_s)
    with torch.set_grad_enabled(torch.is_grad_enabled() and weights.lambda2 > 0):
        rec = recon_loss(bank, feats_t, feats_s)
    if weights.lambda3:
        cross = random_cross_loss(student, teacher, bank, x, y, generator, mask)
    else:
        cross = zero
    return combine(hard, soft, feat, rec, cross, weights)
