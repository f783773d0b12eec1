"""``pwl`` command line: training, evaluation, progressive-loading demo, ablations, plots."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .loader import PROCESS_ENTRY, StageReport, SwapSchedule, start

EXIT_ERROR = 1
EXIT_INTEGRITY = 3

log = logging.getLogger("pwl")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="key = value file of experiment settings")
    g.add_argument("--data-root", help="directory holding the CIFAR binary archives")
    g.add_argument("--seed", type=int, help="random seed (overrides the config's seed list)")
    g.add_argument("--out", help="output / artifact directory")
    g.add_argument("--arch", choices=("vgg", "resnet", "vit", "lenet"))
    g.add_argument("--size", choices=("mini", "full"))
    g.add_argument("--dataset", choices=("synthetic", "cifar10", "cifar100"))
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("-v", "--verbose", action="store_true")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train the teacher network")
    _common(p)
    _training(p)

    p = sub.add_parser("train-pwl", help="distil a student and converter bank from the teacher")
    _common(p)
    _training(p)
    p.add_argument("--tier", choices=("tiny", "medium", "heavy"))
    p.add_argument("--mode", choices=("cnn", "vit"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--tag", default="", help="suffix for the student/bank file names")

    p = sub.add_parser("eval", help="accuracy of one hybrid")
    _common(p)
    p.add_argument("--mask", required=True, help="T/S string, e.g. TTSS")
    p.add_argument("--head", choices=("auto", "student", "teacher"), default="auto")
    p.add_argument("--tag", default="")

    p = sub.add_parser("cross-acc", help="mean accuracy over intermediate prefix hybrids")
    _common(p)
    p.add_argument("--tag", default="")

    p = sub.add_parser("demo-progressive", help="serve while streaming teacher shards")
    _common(p)
    p.add_argument("--order", default="prefix", help="prefix, suffix, contiguous or a "
                   "comma-separated mask list such as TSSS,TTSS,TTTT")
    p.add_argument("--pacing", default="immediate",
                   help="immediate, interval:<n>ms or manual (advance on each stdin line)")
    p.add_argument("--eval-every-stage", action="store_true")
    p.add_argument("--free-student", action="store_true",
                   help="drop student blocks once the teacher replaces them")
    p.add_argument("--tag", default="")

    p = sub.add_parser("ablate", help="order, loss or converter ablation tables")
    _common(p)
    _training(p)
    p.add_argument("kind", choices=("order", "loss", "converter"))
    p.add_argument("--tag", default="")

    p = sub.add_parser("plot", help="SVG figures from result CSVs")
    _common(p)
    p.add_argument("--results", help="directory with stages_*.csv / metrics_*.csv "
                   "(default: --out)")
    return parser


def make_config(args):
    from .experiments import ExperimentConfig
    from .losses import LossWeights
    from .train import OptimSchedule

    overrides = {"arch": args.arch, "size": args.size, "dataset": args.dataset,
                 "data_root": args.data_root, "out_dir": args.out,
                 "n_train": args.n_train, "n_test": args.n_test,
                 "seeds": [args.seed] if args.seed is not None else None,
                 "tier": getattr(args, "tier", None), "mode": getattr(args, "mode", None)}
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})

    sched = {"epochs": getattr(args, "epochs", None),
             "batch_size": getattr(args, "batch_size", None),
             "base_lr": getattr(args, "lr", None)}
    sched = {k: v for k, v in sched.items() if v is not None}
    if getattr(args, "no_augment", False):
        sched["augment"] = False
    if sched:
        cfg.schedule = OptimSchedule(**{**asdict(cfg.schedule), **sched})
        if args.command == "train-teacher" and "epochs" in sched:
            cfg.teacher_epochs = sched["epochs"]
    weights = {k: getattr(args, k, None) for k in ("alpha", "temperature", "lambda1",
                                                   "lambda2", "lambda3")}
    weights = {k: v for k, v in weights.items() if v is not None}
    if weights:
        cfg.weights = LossWeights(**{**asdict(cfg.weights), **weights})
    return cfg


def _write_rows(stream, rows, columns) -> None:
    writer = csv.DictWriter(stream, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)


def cmd_train_teacher(args, cfg) -> int:
    from .experiments import artifact_paths, run_teacher
    from .evaluation import accuracy

    net, _ = run_teacher(cfg)
    acc = accuracy(net, cfg.data("test"))
    print(json.dumps({"checkpoint": str(artifact_paths(cfg.out_dir)["teacher"]),
                      "test_acc": round(acc, 5)}))
    return 0


def cmd_train_pwl(args, cfg) -> int:
    from .evaluation import accuracy, cross_accuracy
    from .experiments import artifact_paths, load_teacher, run_pwl

    teacher = load_teacher(cfg.out_dir)
    student, bank, _ = run_pwl(cfg, teacher, tag=args.tag)
    test = cfg.data("test")
    paths = artifact_paths(cfg.out_dir, args.tag)
    print(json.dumps({"student": str(paths["student"]), "bank": str(paths["bank"]),
                      "student_acc": round(accuracy(student, test), 5),
                      "cross_acc": round(cross_accuracy(student, teacher, bank, test).mean, 5)}))
    return 0


def cmd_eval(args, cfg) -> int:
    from .evaluation import eval_mask
    from .experiments import load_pwl
    from .hybrid import ReplacementMask

    student, teacher, bank = load_pwl(cfg.out_dir, args.tag)
    mask = ReplacementMask.parse(args.mask, args.head)
    if mask.num_blocks != student.num_blocks:
        raise ValueError(f"mask {args.mask} has {mask.num_blocks} blocks, the networks have "
                         f"{student.num_blocks}")
    acc = eval_mask(student, teacher, bank, mask, cfg.data("test"))
    print(json.dumps({"mask": str(mask), "head": mask.resolved_head(), "accuracy": round(acc, 5)}))
    return 0


def cmd_cross_acc(args, cfg) -> int:
    from .evaluation import cross_accuracy
    from .experiments import CROSS_COLUMNS, cross_table, load_pwl, write_table

    student, teacher, bank = load_pwl(cfg.out_dir, args.tag)
    result = cross_accuracy(student, teacher, bank, cfg.data("test"))
    rows = cross_table(result)
    write_table(Path(cfg.out_dir) / "cross_acc.csv", CROSS_COLUMNS, rows)
    _write_rows(sys.stdout, [{"mask": r["mask"], "accuracy": f"{r['accuracy']:.3f}"}
                             for r in rows], CROSS_COLUMNS)
    print(json.dumps({"mean": round(result.mean, 5)}))
    return 0


def _schedule(args, num_blocks: int) -> SwapSchedule:
    order = args.order
    if "," in order or set(order.upper()) <= {"T", "S"}:
        order = [m for m in order.split(",") if m]
    return SwapSchedule.from_order(order, num_blocks, args.pacing)


def cmd_demo(args, cfg) -> int:
    from .checkpoint import read_header
    from .experiments import artifact_paths, require

    paths = artifact_paths(cfg.out_dir, args.tag)
    for key in ("teacher", "student", "bank"):
        require(paths[key], f"pwl train-{'teacher' if key == 'teacher' else 'pwl'} "
                            f"--out {cfg.out_dir}")
    header = read_header(paths["student"])
    schedule = _schedule(args, header.num_blocks)
    eval_data = cfg.data("test") if args.eval_every_stage else None
    server = start(paths["student"], paths["teacher"], paths["bank"], schedule,
                   eval_data=eval_data, free_student=args.free_student, t0=PROCESS_ENTRY)
    import torch
    probe = torch.zeros(1, *server.student.input_shape())
    server.predict(probe)
    ttfi = server.first_inference_s

    stage_rows = []
    writer = csv.DictWriter(sys.stdout, fieldnames=list(StageReport.CSV_COLUMNS),
                            lineterminator="\n")
    writer.writeheader()

    def emit(report: StageReport) -> None:
        row = report.csv_row()
        stage_rows.append(row)
        writer.writerow(row)
        sys.stdout.flush()

    acc0, lat0 = server.measure()
    emit(StageReport(0, str(server.mask), 0, 0.0, acc0, lat0))
    if schedule.interval() is None:
        for _ in sys.stdin:
            report = server.advance()
            if report is not None:
                emit(report)
            if not server.remaining():
                break
    else:
        server.stream(on_report=emit)
        server.join()
    server.close()

    out = Path(cfg.out_dir)
    arch = server.teacher_spec.arch
    with (out / f"stages_{arch}.csv").open("w", newline="") as f:
        _write_rows(f, stage_rows, StageReport.CSV_COLUMNS)
    last = server.reports[-1] if server.reports else None
    summary = {"arch": arch, "order": args.order, "pacing": args.pacing,
               "time_to_first_inference_s": round(ttfi, 6),
               "stages": len(server.reports), "final_mask": str(server.mask),
               "bytes_loaded": last.bytes_loaded if last else 0,
               "load_time_s": round(last.load_time_s, 6) if last else 0.0,
               "resident_bytes": server.resident_bytes(),
               "errors": server.errors}
    print(json.dumps(summary))
    return EXIT_INTEGRITY if server.errors else 0


def cmd_ablate(args, cfg) -> int:
    from .experiments import (CONVERTER_COLUMNS, LOSS_COLUMNS, ORDER_COLUMNS,
                              ORDER_SUMMARY_COLUMNS, ablate_converters, ablate_losses,
                              ablate_order, load_pwl, load_teacher, write_table)

    out = Path(cfg.out_dir)
    if args.kind == "order":
        student, teacher, bank = load_pwl(cfg.out_dir, args.tag)
        rows, summary = ablate_order(student, teacher, bank, cfg.data("test"))
        write_table(out / "ablate_order.csv", ORDER_COLUMNS, rows)
        path = write_table(out / "ablate_order_summary.csv", ORDER_SUMMARY_COLUMNS, summary)
    elif args.kind == "loss":
        teacher = load_teacher(cfg.out_dir)
        path = write_table(out / "ablate_loss.csv", LOSS_COLUMNS, ablate_losses(cfg, teacher))
    else:
        teacher = load_teacher(cfg.out_dir)
        path = write_table(out / "ablate_converter.csv", CONVERTER_COLUMNS,
                           ablate_converters(cfg, teacher))
    sys.stdout.write(path.read_text())
    return 0


def cmd_plot(args, cfg) -> int:
    from .plots import emit_plots

    for path in emit_plots(args.results or cfg.out_dir, cfg.out_dir):
        print(path)
    return 0


COMMANDS = {"train-teacher": cmd_train_teacher, "train-pwl": cmd_train_pwl, "eval": cmd_eval,
            "cross-acc": cmd_cross_acc, "demo-progressive": cmd_demo, "ablate": cmd_ablate,
            "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .plots import UsageError

    try:
        cfg = make_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"pwl: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"pwl: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
