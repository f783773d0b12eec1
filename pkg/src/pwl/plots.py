"""SVG figures from result CSVs.

``stages_<arch>.csv`` files (written by ``pwl demo-progressive``) become one
loading-time vs accuracy staircase per architecture; ``metrics_*.csv`` training
logs become cross-accuracy curves. Output is byte-stable for identical inputs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STAGE_FILE = "stages_{arch}.csv"


class UsageError(ValueError):
    pass


class CSVParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = Path(path)
        self.line = line


def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict]:
    with path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError(path, 1, "empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise CSVParseError(path, 1, f"missing columns {missing}")
        rows = []
        for values in reader:
            line = reader.line_num
            if not values:
                continue
            if len(values) != len(header):
                raise CSVParseError(path, line, f"expected {len(header)} fields, got {len(values)}")
            rows.append((line, dict(zip(header, values))))
    return rows


def _number(path, line, row, key, allow_empty=False):
    text = row[key]
    if text == "" and allow_empty:
        return None
    try:
        return float(text)
    except ValueError:
        raise CSVParseError(path, line, f"column {key!r}: {text!r} is not a number") from None


def read_stages(path) -> list[tuple[float, float | None]]:
    """(cumulative load time, accuracy) per stage, in stage order."""
    path = Path(path)
    points = []
    for line, row in _read_csv(path, ("stage", "load_time_s", "accuracy")):
        stage = _number(path, line, row, "stage")
        points.append((stage, _number(path, line, row, "load_time_s"),
                       _number(path, line, row, "accuracy", allow_empty=True)))
    points.sort()
    return [(t, a) for _, t, a in points]


def read_metrics(path) -> list[tuple[float, float]]:
    path = Path(path)
    out = []
    for line, row in _read_csv(path, ("epoch", "cross_acc")):
        acc = _number(path, line, row, "cross_acc", allow_empty=True)
        if acc is not None:
            out.append((_number(path, line, row, "epoch"), acc))
    return out


def _save(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "pwl", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def emit_plots(results_dir, out_dir=None) -> list[Path]:
    """Write SVGs for every recognised CSV in ``results_dir``; returns the paths."""
    results = Path(results_dir)
    if not results.is_dir():
        raise UsageError(f"results directory {results} does not exist")
    stage_files = sorted(results.glob("stages_*.csv"))
    metric_files = sorted(p for p in results.glob("metrics_*.csv")
                          if p.name != "metrics_teacher.csv")
    if not stage_files and not metric_files:
        raise UsageError(f"no stages_*.csv or metrics_*.csv files in {results}; "
                         f"run `pwl demo-progressive` or `pwl train-pwl` first")
    # parse everything before writing anything
    stages = {p.stem[len("stages_"):]: read_stages(p) for p in stage_files}
    metrics = {p.stem[len("metrics_"):]: read_metrics(p) for p in metric_files}
    out = Path(out_dir) if out_dir else results
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if stages:
        fig, ax = plt.subplots(figsize=(6, 4))
        for arch, pts in stages.items():
            xs = [t for t, _ in pts]
            ys = [float("nan") if a is None else 100 * a for _, a in pts]
            ax.step(xs, ys, where="post", marker="o", label=arch)
        ax.set_xlabel("cumulative load time (s)")
        ax.set_ylabel("accuracy (%)")
        ax.set_title("Loading time vs accuracy")
        ax.legend()
        path = out / "loading_time_vs_accuracy.svg"
        _save(fig, path)
        written.append(path)
    if metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, pts in metrics.items():
            ax.plot([e for e, _ in pts], [100 * a for _, a in pts], marker=".", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross accuracy (%)")
        ax.set_title("Cross accuracy during training")
        ax.legend()
        path = out / "ablation_curves.svg"
        _save(fig, path)
        written.append(path)
    return written
