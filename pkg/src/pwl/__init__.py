"""Progressive weight loading: serve a student now, swap in teacher blocks as they arrive."""

from .blocknet import BlockNet, BlockNetSpec, build, mini_spec, full_spec, toy_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .converter import ConverterBank, build_bank
from .hybrid import HybridModel, ReplacementMask, compose_forward
from .loader import ProgressiveServer, StageReport, SwapSchedule, start
from .losses import LossWeights, total_loss

__version__ = "0.1.0"
