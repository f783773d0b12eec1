"""Mixed teacher/student forward passes driven by a replacement mask."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .blocknet import BlockNet, SpecError, check_pair
from .converter import ConverterBank

HEAD_SIDES = ("student", "teacher", "auto")


@dataclass(frozen=True)
class ReplacementMask:
    """Blocks (1-based) served by the teacher, out of ``num_blocks``."""

    replaced: frozenset
    num_blocks: int
    head_side: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "replaced", frozenset(int(i) for i in self.replaced))
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        bad = [i for i in self.replaced if not 1 <= i <= self.num_blocks]
        if bad:
            raise ValueError(f"mask indices {sorted(bad)} outside 1..{self.num_blocks}")
        if self.head_side not in HEAD_SIDES:
            raise ValueError(f"head_side must be one of {HEAD_SIDES}")

    @classmethod
    def empty(cls, num_blocks: int) -> "ReplacementMask":
        return cls(frozenset(), num_blocks)

    @classmethod
    def full(cls, num_blocks: int) -> "ReplacementMask":
        return cls(frozenset(range(1, num_blocks + 1)), num_blocks)

    @classmethod
    def parse(cls, text: str, head_side: str = "auto") -> "ReplacementMask":
        """``"TTSS"`` -> blocks {1, 2} from the teacher, L = 4."""
        text = text.strip().upper()
        if not text or set(text) - {"T", "S"}:
            raise ValueError(f"mask string must be made of T/S characters, got {text!r}")
        return cls(frozenset(i + 1 for i, c in enumerate(text) if c == "T"), len(text), head_side)

    def __str__(self) -> str:
        return "".join("T" if i in self.replaced else "S" for i in range(1, self.num_blocks + 1))

    def is_full(self) -> bool:
        return len(self.replaced) == self.num_blocks

    def resolved_head(self) -> str:
        if self.head_side == "auto":
            return "teacher" if self.is_full() else "student"
        return self.head_side

    def sides(self) -> list[str]:
        """Side of every unit in order: blocks 1..L, then the head."""
        sides = ["teacher" if i in self.replaced else "student"
                 for i in range(1, self.num_blocks + 1)]
        return sides + [self.resolved_head()]

    def num_conversions(self) -> int:
        s = self.sides()
        return sum(a != b for a, b in zip(s[:-1], s[1:]))


def prefix_masks(num_blocks: int) -> list[ReplacementMask]:
    """Empty, {1}, {1,2}, ..., all blocks: loading from input to output."""
    return [ReplacementMask(frozenset(range(1, k + 1)), num_blocks)
            for k in range(num_blocks + 1)]


def suffix_masks(num_blocks: int) -> list[ReplacementMask]:
    """Empty, {L}, {L-1,L}, ..., all blocks: loading from output to input."""
    return [ReplacementMask(frozenset(range(num_blocks - k + 1, num_blocks + 1)), num_blocks)
            for k in range(num_blocks + 1)]


def contiguous_masks(num_blocks: int) -> list[ReplacementMask]:
    """Empty, every single interior block, the whole interior run, all blocks.

    For four blocks this gives empty, {2}, {3}, {2,3}, full.
    """
    interior = list(range(2, num_blocks))
    masks = [ReplacementMask.empty(num_blocks)]
    masks += [ReplacementMask(frozenset({i}), num_blocks) for i in interior]
    if len(interior) > 1:
        masks.append(ReplacementMask(frozenset(interior), num_blocks))
    masks.append(ReplacementMask.full(num_blocks))
    return masks


ORDERS = {"prefix": prefix_masks, "suffix": suffix_masks, "contiguous": contiguous_masks}


def sample_random_mask(num_blocks: int, generator: torch.Generator | None = None,
                       head_side: str = "auto") -> ReplacementMask:
    """Uniform over all 2**L subsets: one fair coin per block."""
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    coins = torch.randint(0, 2, (num_blocks,), generator=generator)
    return ReplacementMask(frozenset(i + 1 for i in range(num_blocks) if coins[i]),
                           num_blocks, head_side)


def compose_forward(student, teacher, bank: ConverterBank, x: torch.Tensor,
                    mask: ReplacementMask) -> torch.Tensor:
    """Logits of the hybrid that runs teacher blocks where ``mask`` says so.

    ``student`` and ``teacher`` may be BlockNets or any sequence-like of units
    indexable as ``net.unit(i)`` (blocks 0..L-1, head at L). A converter is
    applied exactly where consecutive units sit on different sides.
    """
    L = mask.num_blocks
    if len(bank) != L:
        raise SpecError(f"bank has {len(bank)} boundaries, mask has {L} blocks")
    sides = mask.sides()
    h = x
    for i in range(L + 1):
        side = sides[i]
        if i > 0 and side != sides[i - 1]:
            # boundary i sits between block i (1-based) and the next unit
            h = bank.decode(i, h) if side == "teacher" else bank.encode(i, h)
        unit = (teacher if side == "teacher" else student).unit(i)
        if unit is None:
            raise RuntimeError(f"{side} unit {i + 1} is not resident")
        h = unit(h)
    return h


class HybridModel:
    """A student, a frozen teacher and their converter bank, viewed under a mask."""

    def __init__(self, student: BlockNet, teacher: BlockNet, bank: ConverterBank,
                 mask: ReplacementMask | None = None):
        check_pair(teacher.spec, student.spec)
        if len(bank) != student.num_blocks:
            raise SpecError("converter bank does not match the block count")
        self.student = student
        self.teacher = teacher.freeze()
        self.bank = bank
        self.mask = mask or ReplacementMask.empty(student.num_blocks)

    @property
    def num_blocks(self) -> int:
        return self.student.num_blocks

    def forward(self, x: torch.Tensor, mask: ReplacementMask | None = None) -> torch.Tensor:
        self.student.check_input(x)
        return compose_forward(self.student, self.teacher, self.bank, x, mask or self.mask)

    __call__ = forward
