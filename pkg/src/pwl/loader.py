"""Progressive loading runtime.

Serving starts from the student (plus its converter bank). Teacher shards are
then read from a PWLC file one stage at a time. Each stage materialises its
blocks completely, then publishes a new immutable serving state with a single
attribute assignment; ``predict`` reads that attribute once per request, so a
request always runs under exactly one fully installed mask.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .blocknet import BlockNet, SpecError, check_pair, make_block, make_head
from .checkpoint import CheckpointReader, IntegrityError, load_checkpoint, skeleton
from .converter import ConverterBank
from .datapipe import ImageDataset, iterate_batches
from .hybrid import ReplacementMask, compose_forward, contiguous_masks, prefix_masks, suffix_masks

log = logging.getLogger(__name__)

# captured at import so the CLI can report time since process entry
PROCESS_ENTRY = time.monotonic()


class StartupError(RuntimeError):
    pass


class RequestError(ValueError):
    pass


def _monotone_contiguous(num_blocks: int) -> list[ReplacementMask]:
    # loading is cumulative: grow the interior run, then finish with the rest
    out, acc = [], frozenset()
    for m in contiguous_masks(num_blocks)[1:]:
        acc = acc | m.replaced
        if not out or acc != out[-1].replaced:
            out.append(ReplacementMask(acc, num_blocks))
    return out


@dataclass(frozen=True)
class SwapSchedule:
    """Masks to publish after the initial all-student state, in order."""

    masks: tuple
    pacing: str = "manual"  # "manual", "immediate" or "interval:<ms>ms"

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        if not self.masks:
            raise ValueError("a schedule needs at least one stage")
        L = self.masks[0].num_blocks
        prev = frozenset()
        for m in self.masks:
            if m.num_blocks != L:
                raise ValueError("all masks in a schedule must share num_blocks")
            if m.replaced == prev and m.resolved_head() == "student":
                raise ValueError(f"stage {m} does not change the previous mask")
            prev = m.replaced
        self.interval()  # validates pacing

    @property
    def num_blocks(self) -> int:
        return self.masks[0].num_blocks

    @classmethod
    def from_order(cls, order, num_blocks: int, pacing: str = "manual") -> "SwapSchedule":
        if isinstance(order, str):
            if order == "prefix":
                masks = prefix_masks(num_blocks)[1:]
            elif order == "suffix":
                masks = suffix_masks(num_blocks)[1:]
            elif order == "contiguous":
                masks = _monotone_contiguous(num_blocks)
            else:
                raise ValueError(f"unknown order {order!r}")
        else:
            masks = [m if isinstance(m, ReplacementMask) else ReplacementMask.parse(m)
                     for m in order]
            if any(m.num_blocks != num_blocks for m in masks):
                raise ValueError(f"explicit masks must have {num_blocks} blocks")
        return cls(tuple(masks), pacing)

    def interval(self) -> float | None:
        """Seconds between stages, 0 for immediate, None for manual."""
        p = self.pacing
        if p == "manual":
            return None
        if p == "immediate":
            return 0.0
        if p.startswith("interval:"):
            v = p.split(":", 1)[1].strip()
            try:
                if v.endswith("ms"):
                    return float(v[:-2]) / 1000.0
                return float(v[:-1] if v.endswith("s") else v)
            except ValueError:
                pass
        raise ValueError(f"bad pacing {p!r}; use manual, immediate or interval:<n>ms")

    def is_monotone(self) -> bool:
        prev = frozenset()
        for m in self.masks:
            if not prev <= m.replaced:
                return False
            prev = m.replaced
        return True


@dataclass
class StageReport:
    stage: int
    mask: str
    bytes_loaded: int  # cumulative teacher shard bytes
    load_time_s: float  # cumulative shard read + install time
    accuracy: float | None = None
    latency_ms: float | None = None
    shards: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def skipped(self) -> bool:
        return self.error is not None

    CSV_COLUMNS = ("stage", "mask", "bytes_loaded", "load_time_s", "accuracy", "latency_ms",
                   "error")

    def csv_row(self) -> dict:
        return {"stage": self.stage, "mask": self.mask, "bytes_loaded": self.bytes_loaded,
                "load_time_s": f"{self.load_time_s:.6f}",
                "accuracy": "" if self.accuracy is None else f"{self.accuracy:.5f}",
                "latency_ms": "" if self.latency_ms is None else f"{self.latency_ms:.4f}",
                "error": self.error or ""}


class _UnitTable:
    """Read-only view of resident units (None where not resident)."""

    __slots__ = ("units",)

    def __init__(self, units: tuple):
        self.units = units

    def unit(self, i: int):
        return self.units[i]


@dataclass(frozen=True)
class _Published:
    mask: ReplacementMask
    student: _UnitTable
    teacher: _UnitTable
    stage: int


class ProgressiveServer:
    """Serving handle returned by :func:`start`."""

    def __init__(self, student: BlockNet, bank: ConverterBank, teacher_path,
                 schedule: SwapSchedule, eval_data: ImageDataset | None = None,
                 free_student: bool = False, t0: float | None = None,
                 probe: torch.Tensor | None = None):
        self.t0 = time.monotonic() if t0 is None else t0
        self.student = student.eval()
        self.bank = bank.eval()
        self.schedule = schedule
        self.eval_data = eval_data
        self.probe = probe
        if free_student and not schedule.is_monotone():
            raise ValueError("--free-student needs a schedule that only ever adds teacher blocks")
        self.free_student = free_student
        self.reader = CheckpointReader(teacher_path)
        header = self.reader.header
        if header.kind != "net":
            raise StartupError(f"{teacher_path} is not a network checkpoint")
        self.teacher_spec = header.spec
        try:
            check_pair(self.teacher_spec, student.spec)
        except SpecError as exc:
            raise StartupError(f"teacher/student mismatch: {exc}") from exc
        if len(bank) != student.num_blocks:
            raise StartupError("converter bank does not match the block count")
        for i, (pair, ts, ss) in enumerate(zip(bank.pairs, self.teacher_spec.boundary_shapes(),
                                               student.spec.boundary_shapes()), start=1):
            if pair.teacher_shape != tuple(ts) or pair.student_shape != tuple(ss):
                raise StartupError(f"converter {i} shapes do not match the networks")
        if schedule.num_blocks != student.num_blocks:
            raise StartupError("schedule block count differs from the networks")
        L = student.num_blocks
        self._state = _Published(
            ReplacementMask.empty(L),
            _UnitTable(tuple(student.unit(i) for i in range(L + 1))),
            _UnitTable((None,) * (L + 1)),
            0,
        )
        self._writer = threading.Lock()
        self._next = 0
        self._bytes = 0
        self._load_time = 0.0
        self.reports: list[StageReport] = []
        self.errors: list[str] = []
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.ready_s = time.monotonic() - self.t0
        self.first_inference_s: float | None = None

    # -- readers -------------------------------------------------------------

    @property
    def mask(self) -> ReplacementMask:
        return self._state.mask

    @property
    def num_blocks(self) -> int:
        return self.student.num_blocks

    @torch.no_grad()
    def predict(self, x: torch.Tensor, return_mask: bool = False):
        """Logits under the currently published mask (snapshotted once)."""
        if x.dim() != 4 or tuple(x.shape[1:]) != self.student.input_shape():
            raise RequestError(f"expected input (B, {self.student.input_shape()}), "
                               f"got {tuple(x.shape)}")
        state = self._state
        logits = compose_forward(state.student, state.teacher, self.bank, x, state.mask)
        if self.first_inference_s is None:
            self.first_inference_s = time.monotonic() - self.t0
        return (logits, str(state.mask)) if return_mask else logits

    def resident_bytes(self) -> int:
        state = self._state
        units = [u for u in state.student.units + state.teacher.units if u is not None]
        tensors = [t for u in units for t in u.state_dict().values()]
        tensors += list(self.bank.state_dict().values())
        return sum(t.numel() * 4 for t in tensors)

    # -- writer --------------------------------------------------------------

    def _needed(self, mask: ReplacementMask, teacher: _UnitTable) -> list[int]:
        L = mask.num_blocks
        want = sorted(i - 1 for i in mask.replaced)
        if mask.resolved_head() == "teacher":
            want.append(L)
        return [i for i in want if teacher.units[i] is None]

    def _materialise(self, index: int) -> torch.nn.Module:
        state = self.reader.read_shard(index)
        L = self.teacher_spec.num_blocks
        spec = self.teacher_spec
        unit = skeleton(lambda: make_head(spec) if index == L else make_block(spec, index))
        unit.load_state_dict(state, assign=True)
        for p in unit.parameters():
            p.requires_grad_(False)
        return unit.eval()

    def measure(self) -> tuple[float | None, float | None]:
        acc = latency = None
        if self.eval_data is not None:
            correct, seconds, batches = 0, 0.0, 0
            for x, y in iterate_batches(self.eval_data, 256):
                t = time.perf_counter()
                logits = self.predict(x)
                seconds += time.perf_counter() - t
                batches += 1
                correct += int((logits.argmax(-1) == y).sum())
            acc = correct / max(len(self.eval_data), 1)
            latency = 1000.0 * seconds / max(batches, 1)
        elif self.probe is not None:
            t = time.perf_counter()
            self.predict(self.probe)
            latency = 1000.0 * (time.perf_counter() - t)
        return acc, latency

    def advance(self) -> StageReport | None:
        """Load the next stage's shards and publish its mask.

        Returns None once every stage has been applied. A stage whose shard
        fails verification is reported with ``error`` set and is not
        published; serving stays on the last good mask.
        """
        with self._writer:
            if self._next >= len(self.schedule.masks):
                return None
            stage = self._next + 1
            target = self.schedule.masks[self._next]
            self._next += 1
            current = self._state
            names = self.reader.header.shards
            needed = self._needed(target, current.teacher)
            start = time.monotonic()
            units = list(current.teacher.units)
            added = 0
            try:
                for index in needed:
                    units[index] = self._materialise(index)
                    added += names[index].length
            except IntegrityError as exc:
                self._load_time += time.monotonic() - start
                msg = f"stage {stage} ({target}) skipped: {exc}"
                log.error(msg)
                self.errors.append(msg)
                report = StageReport(stage, str(current.mask), self._bytes, self._load_time,
                                     shards=[names[i].name for i in needed], error=str(exc))
                self.reports.append(report)
                return report
            student_units = current.student.units
            if self.free_student:
                L = target.num_blocks
                keep = [None if (i + 1) in target.replaced else u
                        for i, u in enumerate(student_units[:L])]
                head = None if target.resolved_head() == "teacher" else student_units[L]
                student_units = tuple(keep) + (head,)
            self._state = _Published(target, _UnitTable(student_units), _UnitTable(tuple(units)),
                                     stage)
            self._load_time += time.monotonic() - start
            self._bytes += added
            acc, latency = self.measure()
            report = StageReport(stage, str(target), self._bytes, self._load_time, acc, latency,
                                 [names[i].name for i in needed])
            self.reports.append(report)
            log.info("stage %d: %s", stage, report)
            return report

    def remaining(self) -> int:
        return len(self.schedule.masks) - self._next

    # -- background streaming -----------------------------------------------

    def stream(self, on_report=None) -> threading.Thread:
        """Apply the remaining stages on a writer thread, paced by the schedule."""
        interval = self.schedule.interval()
        if interval is None:
            raise ValueError("manual pacing: call advance() yourself")

        def run():
            while not self._stop.is_set():
                report = self.advance()
                if report is None:
                    return
                if on_report is not None:
                    on_report(report)
                if interval and self._stop.wait(interval):
                    return

        self._thread = threading.Thread(target=run, name="pwl-loader", daemon=True)
        self._thread.start()
        return self._thread

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def close(self) -> None:
        self._stop.set()
        self.join()
        self.reader.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def start(student_ckpt, teacher_ckpt, bank_ckpt, schedule: SwapSchedule, *,
          eval_data: ImageDataset | None = None, free_student: bool = False,
          t0: float | None = None, probe: torch.Tensor | None = None) -> ProgressiveServer:
    """Load student + bank, open the teacher file, and return a serving handle."""
    t0 = time.monotonic() if t0 is None else t0
    student = load_checkpoint(student_ckpt)
    bank = load_checkpoint(bank_ckpt)
    if not isinstance(student, BlockNet):
        raise StartupError(f"{student_ckpt} is not a network checkpoint")
    if not isinstance(bank, ConverterBank):
        raise StartupError(f"{bank_ckpt} is not a converter-bank checkpoint")
    return ProgressiveServer(student, bank, Path(teacher_ckpt), schedule, eval_data,
                             free_student, t0, probe)


def time_student_only(student_ckpt, probe: torch.Tensor) -> float:
    """Seconds to load a plain student and answer one request."""
    t0 = time.monotonic()
    net = load_checkpoint(student_ckpt)
    with torch.no_grad():
        net(probe)
    return time.monotonic() - t0


def time_progressive(student_ckpt, teacher_ckpt, bank_ckpt, probe: torch.Tensor,
                     order: str = "prefix") -> float:
    """Seconds from entry until a progressive handle has answered one request."""
    t0 = time.monotonic()
    num_blocks = _peek_blocks(student_ckpt)
    server = start(student_ckpt, teacher_ckpt, bank_ckpt,
                   SwapSchedule.from_order(order, num_blocks), t0=t0)
    try:
        server.predict(probe)
        return server.first_inference_s
    finally:
        server.close()


def _peek_blocks(path) -> int:
    from .checkpoint import read_header
    return read_header(path).num_blocks
