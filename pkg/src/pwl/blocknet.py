"""Block-structured teacher/student networks.

Every model is an ordered list of swappable blocks followed by a classifier
head. Teacher and student of a pair share the number of blocks and the spatial
extent (or token count) at every block boundary; only the channel / embedding
width differs, which is what the feature converters bridge.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("vgg", "resnet", "vit", "lenet")
ROLES = ("teacher", "student")


class SpecError(ValueError):
    """Raised for a structurally invalid network description."""


class ShapeError(ValueError):
    """Raised when a tensor does not match the shape a block expects."""


@dataclass(frozen=True)
class BlockNetSpec:
    """Declarative description of a block-structured network.

    ``layout`` holds one tuple per block whose meaning depends on ``arch``:

    * vgg / lenet: conv output widths, with ``"M"`` marking a 2x2 max-pool
    * resnet: one width per residual layer (block 1 also owns the stem)
    * vit: a single int, the number of transformer layers in the block
    """

    arch: str
    role: str
    layout: tuple
    head: tuple = ()
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    stem: int = 0
    bottleneck: bool = False
    batchnorm: bool = True
    embed_dim: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    patch_size: int = 4

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise SpecError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")
        # normalise nested lists (e.g. coming back from JSON) to tuples
        object.__setattr__(self, "layout", tuple(tuple(b) for b in self.layout))
        object.__setattr__(self, "head", tuple(self.head))
        if len(self.layout) < 1:
            raise SpecError("num_blocks must be >= 1")
        if self.num_classes < 1 or self.in_channels < 1 or self.image_size < 1:
            raise SpecError("num_classes, in_channels and image_size must be positive")
        for block in self.layout:
            if not block:
                raise SpecError("empty block in layout")
            for tok in block:
                if tok != "M" and (not isinstance(tok, int) or tok <= 0):
                    raise SpecError(f"invalid layout token {tok!r}")
        if any(h <= 0 for h in self.head):
            raise SpecError("head widths must be positive")
        if self.arch == "resnet" and self.stem <= 0:
            raise SpecError("resnet spec needs a positive stem width")
        if self.arch == "vit":
            if self.embed_dim % self.heads:
                raise SpecError("embed_dim must be divisible by heads")
            if self.image_size % self.patch_size:
                raise SpecError("image_size must be divisible by patch_size")
        self.boundary_shapes()  # raises on impossible down-sampling

    @property
    def num_blocks(self) -> int:
        return len(self.layout)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BlockNetSpec":
        return cls(**d)

    def replace(self, **changes) -> "BlockNetSpec":
        return dataclasses.replace(self, **changes)

    def boundary_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample feature shape after each block, e.g. ``(C, H, W)``."""
        shapes = []
        if self.arch == "vit":
            tokens = (self.image_size // self.patch_size) ** 2 + 1
            return [(tokens, self.embed_dim)] * self.num_blocks
        size = self.image_size
        if self.arch == "resnet":
            for i, block in enumerate(self.layout):
                if i > 0:
                    size = _halve(size)
                shapes.append((block[-1], size, size))
            return shapes
        channels = self.in_channels
        for block in self.layout:
            for tok in block:
                if tok == "M":
                    size = _halve(size)
                else:
                    channels = tok
            shapes.append((channels, size, size))
        return shapes

    def boundary_widths(self) -> list[int]:
        if self.arch == "vit":
            return [self.embed_dim] * self.num_blocks
        return [s[0] for s in self.boundary_shapes()]

    def boundary_extents(self) -> list[tuple[int, ...]]:
        """Spatial size / token count at each boundary (everything but width)."""
        if self.arch == "vit":
            return [s[:1] for s in self.boundary_shapes()]
        return [s[1:] for s in self.boundary_shapes()]


def _halve(size: int) -> int:
    if size < 2:
        raise SpecError("spatial size collapses to zero; too many down-sampling steps")
    return size // 2


def check_pair(teacher: BlockNetSpec, student: BlockNetSpec) -> None:
    """Raise SpecError unless the two specs can be spliced block by block."""
    if teacher.num_blocks != student.num_blocks:
        raise SpecError(
            f"block count mismatch: teacher {teacher.num_blocks}, student {student.num_blocks}"
        )
    if teacher.num_classes != student.num_classes:
        raise SpecError("teacher and student disagree on num_classes")
    if (teacher.in_channels, teacher.image_size) != (student.in_channels, student.image_size):
        raise SpecError("teacher and student disagree on input shape")
    te, se = teacher.boundary_extents(), student.boundary_extents()
    for i, (a, b) in enumerate(zip(te, se), start=1):
        if a != b:
            raise SpecError(f"boundary {i}: teacher extent {a} != student extent {b}")


# ---------------------------------------------------------------------------
# full-size configurations and desk-scale miniatures
# ---------------------------------------------------------------------------

def full_spec(arch: str, role: str, num_classes: int = 10) -> BlockNetSpec:
    """The full-size teacher/student configurations used for CIFAR."""
    if arch == "vgg" and role == "teacher":
        layout = ((64, 64, "M", 128, 128, "M"), (256, 256, 256, "M"),
                  (512, 512, 512, "M"), (512, 512, 512, "M"))
        return BlockNetSpec("vgg", role, layout, head=(512, 512), num_classes=num_classes)
    if arch == "vgg" and role == "student":
        layout = ((64, "M", 128, "M"), (128, "M"), (256, "M"), (256, "M"))
        return BlockNetSpec("vgg", role, layout, num_classes=num_classes)
    if arch == "resnet" and role == "teacher":
        layout = ((64,) * 3, (128,) * 4, (256,) * 6, (512,) * 3)
        return BlockNetSpec("resnet", role, layout, stem=64, bottleneck=True,
                            num_classes=num_classes)
    if arch == "resnet" and role == "student":
        layout = ((32,), (64,), (128,), (256,))
        return BlockNetSpec("resnet", role, layout, stem=32, num_classes=num_classes)
    if arch == "vit":
        depth = 3 if role == "teacher" else 1
        return BlockNetSpec("vit", role, ((depth,),) * 4, num_classes=num_classes)
    if arch == "lenet" and role == "student":
        # LeNet-5 re-cut into four blocks whose boundaries line up with VGG's
        layout = ((6, "M", 16, "M"), (120, "M"), (84, "M"), (84, "M"))
        return BlockNetSpec("lenet", role, layout, batchnorm=False, num_classes=num_classes)
    if arch == "lenet":
        return full_spec("vgg", "teacher", num_classes)
    raise SpecError(f"no full-size config for {arch}/{role}")


def mini_spec(arch: str, role: str, num_classes: int = 10, image_size: int = 32) -> BlockNetSpec:
    """Narrow variants with the same block structure, sized for CPU runs."""
    teacher = role == "teacher"
    if arch == "vgg":
        if teacher:
            layout = ((16, 16, "M", 32, "M"), (64, 64, "M"), (64, 64, "M"), (64, "M"))
            head = (64,)
        else:
            layout = ((8, "M", 16, "M"), (16, "M"), (32, "M"), (32, "M"))
            head = ()
        return BlockNetSpec("vgg", role, layout, head=head, num_classes=num_classes,
                            image_size=image_size)
    if arch == "resnet":
        if teacher:
            layout = ((16, 16), (32, 32), (64, 64), (128,))
            return BlockNetSpec("resnet", role, layout, stem=16, bottleneck=True,
                                num_classes=num_classes, image_size=image_size)
        layout = ((8,), (16,), (32,), (64,))
        return BlockNetSpec("resnet", role, layout, stem=8, num_classes=num_classes,
                            image_size=image_size)
    if arch == "vit":
        depth = 2 if teacher else 1
        return BlockNetSpec("vit", role, ((depth,),) * 4, num_classes=num_classes,
                            embed_dim=48 if teacher else 32, heads=2, mlp_ratio=2.0,
                            patch_size=8, image_size=image_size)
    if arch == "lenet":
        if teacher:
            return mini_spec("vgg", "teacher", num_classes, image_size)
        layout = ((6, "M", 16, "M"), (24, "M"), (24, "M"), (24, "M"))
        return BlockNetSpec("lenet", role, layout, batchnorm=False, num_classes=num_classes,
                            image_size=image_size)
    raise SpecError(f"unknown arch {arch!r}")


def toy_spec(role: str, num_blocks: int = 2, num_classes: int = 2, image_size: int = 4,
             in_channels: int = 1) -> BlockNetSpec:
    """Very small VGG-family nets (no batch norm) for oracles and gradient checks."""
    widths = (3, 4, 4, 4) if role == "teacher" else (2, 2, 2, 2)
    layout = tuple((widths[i], "M") for i in range(num_blocks))
    return BlockNetSpec("vgg", role, layout, num_classes=num_classes, in_channels=in_channels,
                        image_size=image_size, batchnorm=False)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _conv_bn_relu(cin: int, cout: int, batchnorm: bool, kernel: int = 3) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=not batchnorm)]
    if batchnorm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=False))
    return layers


class BasicResidual(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = _shortcut(cin, cout, stride)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class BottleneckResidual(nn.Module):
    """1x1 -> 3x3 -> 1x1, all at the layer width (no expansion)."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv3 = nn.Conv2d(cout, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = _shortcut(cin, cout, stride)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


def _shortcut(cin, cout, stride):
    if stride == 1 and cin == cout:
        return nn.Identity()
    return nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerLayer(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Patchify, prepend a class token and add learned position embeddings."""

    def __init__(self, in_channels, dim, patch_size, image_size):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, patch_size, stride=patch_size)
        num_tokens = (image_size // patch_size) ** 2 + 1
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens, dim))

    def forward(self, x):
        x = self.proj(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed


class ViTHead(nn.Module):
    def __init__(self, dim, num_classes):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.fc(self.norm(x[:, 0]))


# ---------------------------------------------------------------------------
# block / head factories
# ---------------------------------------------------------------------------

def make_block(spec: BlockNetSpec, index: int) -> nn.Module:
    """Construct block ``index`` (0-based) without touching the others."""
    if not 0 <= index < spec.num_blocks:
        raise IndexError(f"block index {index} out of range for {spec.num_blocks} blocks")
    if spec.arch == "vit":
        layers: list[nn.Module] = []
        if index == 0:
            layers.append(PatchEmbed(spec.in_channels, spec.embed_dim, spec.patch_size,
                                     spec.image_size))
        depth = spec.layout[index][0]
        layers += [TransformerLayer(spec.embed_dim, spec.heads, spec.mlp_ratio)
                   for _ in range(depth)]
        return nn.Sequential(*layers)

    cin = spec.in_channels if index == 0 else spec.boundary_widths()[index - 1]
    if spec.arch == "resnet":
        layers = []
        if index == 0:
            layers += _conv_bn_relu(cin, spec.stem, True)
            cin = spec.stem
        unit = BottleneckResidual if spec.bottleneck else BasicResidual
        for j, width in enumerate(spec.layout[index]):
            stride = 2 if (index > 0 and j == 0) else 1
            layers.append(unit(cin, width, stride))
            cin = width
        return nn.Sequential(*layers)

    layers = []
    for tok in spec.layout[index]:
        if tok == "M":
            layers.append(nn.MaxPool2d(2))
            continue
        if spec.arch == "lenet":
            kernel = 5 if index < 2 else 1
        else:
            kernel = 3
        layers += _conv_bn_relu(cin, tok, spec.batchnorm, kernel)
        cin = tok
    return nn.Sequential(*layers)


def make_head(spec: BlockNetSpec) -> nn.Module:
    if spec.arch == "vit":
        return ViTHead(spec.embed_dim, spec.num_classes)
    c, h, w = spec.boundary_shapes()[-1]
    layers: list[nn.Module] = []
    if spec.arch == "resnet":
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        width = c
    else:
        layers.append(nn.Flatten())
        width = c * h * w
    for hidden in spec.head:
        layers += [nn.Linear(width, hidden), nn.ReLU(inplace=False)]
        width = hidden
    layers.append(nn.Linear(width, spec.num_classes))
    return nn.Sequential(*layers)


def init_weights(module: nn.Module) -> None:
    """Kaiming fan-in for conv/linear, truncated normal for ViT embeddings."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, PatchEmbed):
            nn.init.trunc_normal_(m.cls_token, std=0.02)
            nn.init.trunc_normal_(m.pos_embed, std=0.02)
        elif isinstance(m, ViTHead):
            # a zero-initialised classifier keeps early ViT logits tame
            nn.init.zeros_(m.fc.weight)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class BlockNet(nn.Module):
    """``head(block_L(... block_1(x)))`` with each block addressable on its own."""

    def __init__(self, spec: BlockNetSpec, blocks=None, head=None):
        super().__init__()
        self.spec = spec
        if blocks is None:
            blocks = [make_block(spec, i) for i in range(spec.num_blocks)]
        self.blocks = nn.ModuleList(blocks)
        self.head = head if head is not None else make_head(spec)

    @property
    def num_blocks(self) -> int:
        return self.spec.num_blocks

    def input_shape(self) -> tuple[int, ...]:
        return (self.spec.in_channels, self.spec.image_size, self.spec.image_size)

    def check_input(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape():
            raise ShapeError(f"expected input (B, {', '.join(map(str, self.input_shape()))}), "
                             f"got {tuple(x.shape)}")

    def forward_prefix(self, x: torch.Tensor, upto: int) -> torch.Tensor:
        """Apply blocks 1..upto; ``upto=0`` returns ``x`` itself."""
        if not 0 <= upto <= self.num_blocks:
            raise IndexError(f"upto={upto} outside [0, {self.num_blocks}]")
        self.check_input(x)
        for block in self.blocks[:upto]:
            x = block(x)
        return x

    def features(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Every boundary feature plus the logits, in one pass."""
        self.check_input(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats, self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_prefix(x, self.num_blocks))

    def unit(self, index: int) -> nn.Module:
        """Block ``index`` for ``index < num_blocks``; the head at ``num_blocks``."""
        if index == self.num_blocks:
            return self.head
        return self.blocks[index]

    def unit_names(self) -> list[str]:
        return [f"block{i + 1}" for i in range(self.num_blocks)] + ["head"]

    def freeze(self) -> "BlockNet":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def build(spec: BlockNetSpec, init_seed: int = 0) -> BlockNet:
    """Construct and deterministically initialise a network."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        net = BlockNet(spec)
        init_weights(net)
    return net


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_bytes(module: nn.Module) -> int:
    """Raw float32 bytes of parameters and buffers (what the checkpoint stores)."""
    return sum(t.numel() * 4 for t in module.state_dict().values())


__all__ = [
    "ARCHS", "BlockNet", "BlockNetSpec", "ShapeError", "SpecError",
    "build", "check_pair", "count_parameters", "make_block", "make_head", "mini_spec",
    "full_spec", "parameter_bytes", "toy_spec", "init_weights",
]
