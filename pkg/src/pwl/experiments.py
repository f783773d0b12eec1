"""Experiment configuration, artifact layout and ablation tables.

Every table is a list of dicts whose keys follow a fixed column tuple, so the
CSV files keep the same header across runs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .blocknet import BlockNet, count_parameters, mini_spec, full_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, dump_kv, read_kv
from .converter import TIERS, build_bank
from .datapipe import DATASETS, ImageDataset, load_dataset
from .evaluation import accuracy, cross_accuracy, staged_accuracies
from .hybrid import ORDERS
from .losses import LossWeights
from .train import OptimSchedule, train_pwl, train_teacher

log = logging.getLogger(__name__)

ARCHS = ("vgg", "resnet", "vit", "lenet")
SIZES = ("mini", "full")

ORDER_COLUMNS = ("order", "stage", "mask", "accuracy")
ORDER_SUMMARY_COLUMNS = ("order", "mean_intermediate", "final")
LOSS_COLUMNS = ("row", "lambda1", "lambda2", "lambda3", "student_acc", "cross_acc")
CONVERTER_COLUMNS = ("tier", "params", "student_acc", "cross_acc")
CROSS_COLUMNS = ("mask", "accuracy")

# loss-ablation rows: label -> weight overrides
LOSS_ROWS = {
    "normal": {},
    "-recon": {"lambda2": 0.0},
    "-feature": {"lambda1": 0.0},
    "-random-cross": {"lambda3": 0.0},
}


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    arch: str = "vgg"
    size: str = "mini"  # "mini" (desk scale) or "full"
    dataset: str = "synthetic"
    data_root: str = "data"
    seeds: list = field(default_factory=lambda: [0])
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: OptimSchedule = field(default_factory=lambda: OptimSchedule(
        epochs=20, batch_size=64, augment=False))
    teacher_epochs: int = 20
    tier: str = "tiny"
    order: str = "prefix"
    mode: str = "cnn"
    out_dir: str = "runs"
    n_train: int = 4000
    n_test: int = 2000
    synthetic: dict = field(default_factory=lambda: {
        "num_classes": 20, "noise": 0.8, "max_shift": 6, "mix": 0.4, "detail": 8})

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.schedule, dict):
            self.schedule = OptimSchedule(**self.schedule)
        self.seeds = list(self.seeds)
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.size not in SIZES:
            raise ValueError(f"size must be one of {SIZES}, got {self.size!r}")
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}, got {self.tier!r}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {tuple(ORDERS)}, got {self.order!r}")
        if self.mode not in ("cnn", "vit"):
            raise ValueError(f"mode must be 'cnn' or 'vit', got {self.mode!r}")
        if not self.seeds:
            raise ValueError("seed list must be nonempty")

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        """Read a ``key = value`` file; non-None ``overrides`` win over the file.

        Loss-weight and schedule fields are given flat (``lambda3 = 0``,
        ``epochs = 20``); synthetic-data options as ``synthetic.noise = 0.8``.
        """
        settings = read_kv(path)
        top = {f.name for f in fields(cls)} - {"weights", "schedule", "synthetic"}
        w_keys = {f.name for f in fields(LossWeights)}
        s_keys = {f.name for f in fields(OptimSchedule)}
        kw, weights, sched, synth = {}, {}, {}, {}
        for key, value in settings.items():
            if key.startswith("synthetic."):
                synth[key.split(".", 1)[1]] = value
            elif key in w_keys:
                weights[key] = value
            elif key in s_keys:
                sched[key] = value
            elif key in top:
                kw[key] = value
            else:
                raise ConfigError(f"{path}: unknown config key {key!r}")
        if "seeds" in kw and not isinstance(kw["seeds"], list):
            kw["seeds"] = [kw["seeds"]]
        kw.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**kw)
        if weights:
            cfg.weights = LossWeights(**{**asdict(cfg.weights), **weights})
        if sched:
            cfg.schedule = OptimSchedule(**{**asdict(cfg.schedule), **sched})
        if synth:
            cfg.synthetic = {**cfg.synthetic, **synth}
        return cfg

    def to_kv(self) -> str:
        flat = {k: v for k, v in asdict(self).items() if k not in ("weights", "schedule",
                                                                   "synthetic")}
        flat.update(asdict(self.weights))
        flat.update(asdict(self.schedule))
        flat.update({f"synthetic.{k}": v for k, v in self.synthetic.items()})
        return dump_kv(flat)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- derived pieces ------------------------------------------------------

    @property
    def num_classes(self) -> int:
        if self.dataset == "cifar10":
            return 10
        if self.dataset == "cifar100":
            return 100
        return self.synthetic.get("num_classes", 2)

    def spec(self, role: str):
        if self.size == "full":
            return full_spec(self.arch, role, num_classes=self.num_classes)
        return mini_spec(self.arch, role, num_classes=self.num_classes)

    def data(self, split: str, seed: int | None = None) -> ImageDataset:
        seed = self.seeds[0] if seed is None else seed
        n = self.n_train if split == "train" else self.n_test
        kw = self.synthetic if self.dataset == "synthetic" else {}
        ds = load_dataset(self.dataset, split, self.data_root, n=n, seed=seed, **kw)
        if self.dataset != "synthetic" and n and n < len(ds):
            ds = ds.subset(range(n))
        return ds


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def artifact_paths(out_dir, tag: str = "") -> dict[str, Path]:
    out = Path(out_dir)
    suffix = f"-{tag}" if tag else ""
    return {"teacher": out / "teacher.pwlc", "student": out / f"student{suffix}.pwlc",
            "bank": out / f"bank{suffix}.pwlc"}


def require(path: Path, how: str) -> Path:
    if not Path(path).is_file():
        raise MissingArtifact(f"missing checkpoint {path}; produce it with `{how}`")
    return Path(path)


def load_teacher(out_dir) -> BlockNet:
    path = require(artifact_paths(out_dir)["teacher"], f"pwl train-teacher --out {out_dir}")
    return load_checkpoint(path)


def load_pwl(out_dir, tag: str = ""):
    paths = artifact_paths(out_dir, tag)
    how = f"pwl train-pwl --out {out_dir}"
    teacher = load_teacher(out_dir)
    student = load_checkpoint(require(paths["student"], how))
    bank = load_checkpoint(require(paths["bank"], how))
    return student, teacher, bank


def run_teacher(cfg: ExperimentConfig, seed: int | None = None, save: bool = True):
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = OptimSchedule(**{**asdict(cfg.schedule), "epochs": cfg.teacher_epochs})
    net, history = train_teacher(cfg.spec("teacher"), cfg.data("train", seed), sched, seed,
                                 val=cfg.data("test", seed),
                                 metrics_csv=out / "metrics_teacher.csv" if save else None)
    if save:
        save_checkpoint(net, artifact_paths(out)["teacher"])
    return net, history


def run_pwl(cfg: ExperimentConfig, teacher: BlockNet, seed: int | None = None,
            weights: LossWeights | None = None, tier: str | None = None, tag: str = "",
            save: bool = True, train: ImageDataset | None = None):
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / f"metrics_pwl{'-' + tag if tag else ''}.csv" if save else None
    if metrics is not None and metrics.exists():
        metrics.unlink()
    student, bank, history = train_pwl(
        cfg.spec("student"), teacher, train if train is not None else cfg.data("train", seed),
        weights or cfg.weights, cfg.schedule, cfg.mode, seed, tier or cfg.tier,
        metrics_csv=metrics)
    if save:
        paths = artifact_paths(out, tag)
        save_checkpoint(student, paths["student"])
        save_checkpoint(bank, paths["bank"])
    return student, bank, history


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def ablate_order(student, teacher, bank, data: ImageDataset, orders=tuple(ORDERS)
                 ) -> tuple[list[dict], list[dict]]:
    """Per-stage accuracies for each loading order, plus a per-order summary.

    ``mean_intermediate`` averages the stages strictly between the pure
    student and the pure teacher.
    """
    rows, summary = [], []
    for order in orders:
        trace = staged_accuracies(student, teacher, bank, data, order)
        for stage, (mask, acc) in enumerate(trace):
            rows.append({"order": order, "stage": stage, "mask": mask, "accuracy": acc})
        summary.append({"order": order,
                        "mean_intermediate": _mean(a for _, a in trace[1:-1]),
                        "final": trace[-1][1]})
    return rows, summary


def ablate_losses(cfg: ExperimentConfig, teacher: BlockNet, rows=tuple(LOSS_ROWS),
                  test: ImageDataset | None = None, trained: dict | None = None) -> list[dict]:
    """Retrain the student with one loss term removed per row (mean over seeds).

    ``trained`` may map a row label to already trained ``(student, bank)``
    pairs, one per seed, to avoid retraining.
    """
    trained = trained or {}
    table = []
    for label in rows:
        if label not in LOSS_ROWS:
            raise ValueError(f"unknown loss-ablation row {label!r}; expected {tuple(LOSS_ROWS)}")
        w = LossWeights(**{**asdict(cfg.weights), **LOSS_ROWS[label]})
        accs, crosses = [], []
        for i, seed in enumerate(cfg.seeds):
            data = test if test is not None else cfg.data("test", seed)
            if label in trained:
                student, bank = trained[label][i]
            else:
                student, bank, _ = run_pwl(cfg, teacher, seed, weights=w, save=False)
            accs.append(accuracy(student, data))
            crosses.append(cross_accuracy(student, teacher, bank, data).mean)
        table.append({"row": label, "lambda1": w.lambda1, "lambda2": w.lambda2,
                      "lambda3": w.lambda3, "student_acc": _mean(accs),
                      "cross_acc": _mean(crosses)})
    return table


def tier_parameter_counts(arch: str = "resnet", size: str = "full",
                          num_classes: int = 10) -> dict[str, int]:
    spec = full_spec if size == "full" else mini_spec
    t, s = spec(arch, "teacher", num_classes=num_classes), spec(arch, "student",
                                                                 num_classes=num_classes)
    return {tier: count_parameters(build_bank(t, s, tier)) for tier in TIERS}


def ablate_converters(cfg: ExperimentConfig, teacher: BlockNet, tiers=TIERS,
                      test: ImageDataset | None = None, trained: dict | None = None
                      ) -> list[dict]:
    """Train one student per converter tier; report bank size and accuracies."""
    trained = trained or {}
    table = []
    for tier in tiers:
        accs, crosses, params = [], [], 0
        for i, seed in enumerate(cfg.seeds):
            data = test if test is not None else cfg.data("test", seed)
            if tier in trained:
                student, bank = trained[tier][i]
            else:
                student, bank, _ = run_pwl(cfg, teacher, seed, tier=tier, save=False)
            params = count_parameters(bank)
            accs.append(accuracy(student, data))
            crosses.append(cross_accuracy(student, teacher, bank, data).mean)
        table.append({"tier": tier, "params": params, "student_acc": _mean(accs),
                      "cross_acc": _mean(crosses)})
    return table


def cross_table(result) -> list[dict]:
    return [{"mask": m, "accuracy": a} for m, a in zip(result.masks, result.accuracies)]


def _fmt(v):
    return f"{v:.3f}" if isinstance(v, float) else v


def write_table(path, columns, rows) -> Path:
    """CSV with a fixed header; floats carry three decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="raise")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return path
