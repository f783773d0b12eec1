"""Feature converters between teacher and student feature spaces.

At every block boundary ``i`` an encoder maps teacher features to the student
width and a decoder maps student features back. Converters only touch the
channel (CNN) or embedding (ViT) axis; spatial extent / token count is never
changed.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocknet import BlockNetSpec, ShapeError, check_pair

TIERS = ("tiny", "medium", "heavy")

# converters train at this fraction of the base learning rate
CONVERTER_LR_SCALE = 0.1


class ChannelLinear(nn.Module):
    """Affine map over the channel axis: a 1x1 conv for (B,C,H,W), a linear
    layer over the last axis for (B,N,D)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            return F.conv2d(x, self.weight[:, :, None, None], self.bias)
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return f"{self.in_features} -> {self.out_features}"


def _mlp(widths: list[int], relu: bool) -> nn.Module:
    layers: list[nn.Module] = []
    for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if j > 0 and relu:
            layers.append(nn.ReLU())
        layers.append(ChannelLinear(a, b))
    return layers[0] if len(layers) == 1 else nn.Sequential(*layers)


def tier_widths(tier: str, src: int, dst: int) -> list[int]:
    """Layer widths of a converter from ``src`` to ``dst`` channels.

    tiny: one affine layer; medium: two affine layers through a bottleneck of
    width sqrt(src*dst); heavy: three layers with ReLUs, hidden width sqrt(src*dst).
    """
    mid = max(1, round(math.sqrt(src * dst)))
    if tier == "tiny":
        return [src, dst]
    if tier == "medium":
        return [src, mid, dst]
    if tier == "heavy":
        return [src, mid, mid, dst]
    raise ValueError(f"unknown converter tier {tier!r}; expected one of {TIERS}")


class ConverterPair(nn.Module):
    def __init__(self, boundary: int, teacher_shape: tuple, student_shape: tuple,
                 tier: str = "tiny"):
        super().__init__()
        self.boundary = boundary
        self.tier = tier
        self.teacher_shape = tuple(teacher_shape)
        self.student_shape = tuple(student_shape)
        ct, cs = self._width(teacher_shape), self._width(student_shape)
        relu = tier == "heavy"
        self.encoder = _mlp(tier_widths(tier, ct, cs), relu)
        self.decoder = _mlp(tier_widths(tier, cs, ct), relu)

    @staticmethod
    def _width(shape: tuple) -> int:
        # (C, H, W) for conv features, (N, D) for token features
        return shape[0] if len(shape) == 3 else shape[-1]

    def _check(self, x: torch.Tensor, expected: tuple, side: str) -> None:
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"converter {self.boundary}: expected {side} feature of shape "
                             f"(B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def encode(self, feat_t: torch.Tensor) -> torch.Tensor:
        """Teacher-space feature -> student space."""
        self._check(feat_t, self.teacher_shape, "teacher")
        return self.encoder(feat_t)

    def decode(self, feat_s: torch.Tensor) -> torch.Tensor:
        """Student-space feature -> teacher space."""
        self._check(feat_s, self.student_shape, "student")
        return self.decoder(feat_s)

    def set_identity(self) -> None:
        """Initialise a tiny pair to the identity; only for equal widths."""
        if self.tier != "tiny" or self.teacher_shape != self.student_shape:
            raise ValueError("identity init needs a tiny pair with equal widths")
        with torch.no_grad():
            for m in (self.encoder, self.decoder):
                m.weight.copy_(torch.eye(m.weight.shape[0], dtype=m.weight.dtype))
                m.bias.zero_()


class ConverterBank(nn.Module):
    """One ConverterPair per block boundary (boundary i follows block i)."""

    lr_scale = CONVERTER_LR_SCALE

    def __init__(self, pairs: list[ConverterPair], tier: str = "tiny"):
        super().__init__()
        self.pairs = nn.ModuleList(pairs)
        self.tier = tier

    def __len__(self) -> int:
        return len(self.pairs)

    def pair(self, boundary: int) -> ConverterPair:
        """1-based boundary lookup."""
        return self.pairs[boundary - 1]

    def encode(self, boundary: int, feat_t: torch.Tensor) -> torch.Tensor:
        return self.pair(boundary).encode(feat_t)

    def decode(self, boundary: int, feat_s: torch.Tensor) -> torch.Tensor:
        return self.pair(boundary).decode(feat_s)

    def describe(self) -> dict:
        return {
            "tier": self.tier,
            "boundaries": [
                {"teacher_shape": list(p.teacher_shape), "student_shape": list(p.student_shape)}
                for p in self.pairs
            ],
        }

    @classmethod
    def from_description(cls, desc: dict) -> "ConverterBank":
        pairs = [ConverterPair(i + 1, tuple(b["teacher_shape"]), tuple(b["student_shape"]),
                               desc["tier"])
                 for i, b in enumerate(desc["boundaries"])]
        return cls(pairs, desc["tier"])


def build_bank(teacher_spec: BlockNetSpec, student_spec: BlockNetSpec, tier: str = "tiny",
               seed: int = 0) -> ConverterBank:
    check_pair(teacher_spec, student_spec)
    if tier not in TIERS:
        raise ValueError(f"unknown converter tier {tier!r}; expected one of {TIERS}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        pairs = [ConverterPair(i + 1, t, s, tier)
                 for i, (t, s) in enumerate(zip(teacher_spec.boundary_shapes(),
                                                student_spec.boundary_shapes()))]
    return ConverterBank(pairs, tier)


def _sq_err(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).mean()


def reconstruction_error(pair: ConverterPair, feat_t: torch.Tensor,
                         feat_s: torch.Tensor) -> torch.Tensor:
    """Round-trip error through the pair from both sides (element-mean squared error)."""
    return (_sq_err(feat_t, pair.decode(pair.encode(feat_t)))
            + _sq_err(feat_s, pair.encode(pair.decode(feat_s))))
