"""Command-line entry point: ``weldmon <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal invariant
violation. Every run writes ``run-meta.json`` into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from weldmon import harness
from weldmon.errors import DataError, InvariantViolation, NoData
from weldmon.ingest import SENSOR_NAMES, list_recordings, read_recording, read_segment_set, write_recording, write_segment_set
from weldmon.model.classifier import save_checkpoint
from weldmon.segment import SegmenterConfig, segment_cycle
from weldmon.spectral import StftConfig, segment_spectrograms
from weldmon.synthgen import generate_dataset

log = logging.getLogger("weldmon")

ALL_SENSORS = tuple(sorted(SENSOR_NAMES))
SEGMENT_SET = "segments"
CSV_COLUMNS = ("task", "method", "sensors", "aug_factor", "cv_mean", "cv_std", "lcb", "holdout_acc", "mean_ms", "max_ms")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types


def sensor_list(text: str) -> tuple:
    try:
        ids = sorted({int(tok) for tok in str(text).split(",") if tok.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sensor list {text!r}") from None
    if not ids or not set(ids) <= set(ALL_SENSORS):
        raise argparse.ArgumentTypeError(f"sensors must be a non-empty subset of {list(ALL_SENSORS)}, got {text!r}")
    return tuple(ids)


def int_list(text: str) -> tuple:
    """``"0..10"`` (inclusive range) or ``"1,2,3"``."""
    text = str(text)
    try:
        if ".." in text:
            lo, hi = text.split("..")
            out = tuple(range(int(lo), int(hi) + 1))
        else:
            out = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def method_list(text: str) -> tuple:
    out = tuple(tok.strip() for tok in str(text).split(",") if tok.strip())
    bad = [m for m in out if m not in harness.METHODS]
    if not out or bad:
        raise argparse.ArgumentTypeError(f"methods must come from {list(harness.METHODS)}, got {text!r}")
    return out


def non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def threshold(text: str) -> float:
    value = float(text)
    if not value > 1:
        raise argparse.ArgumentTypeError(f"threshold factor must exceed 1, got {text}")
    return value


def ratio(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1), got {text}")
    return value


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--data-dir", type=Path, default=Path("data"))
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--config", type=Path, help="JSON file whose keys override flags")
    common.add_argument("-v", "--verbose", action="store_true")

    segmenting = argparse.ArgumentParser(add_help=False)
    segmenting.add_argument("--theta1", type=threshold, default=4.0)
    segmenting.add_argument("--theta2", type=threshold, default=8.0)
    segmenting.add_argument("--reference-channel", type=int, choices=ALL_SENSORS, default=4)

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--max-epochs", type=non_negative, default=100)
    training.add_argument("--lr", type=float, default=4e-4)
    training.add_argument("--batch-size", type=positive, default=32)

    splitting = argparse.ArgumentParser(add_help=False)
    splitting.add_argument("--holdout-ratio", type=ratio, default=0.2)
    splitting.add_argument("--split-seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="weldmon", description="Ultrasonic welding condition monitoring.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("generate", parents=[common], help="write synthetic recordings")
    p.add_argument("--cycles-per-class", type=positive, default=30)

    p = sub.add_parser("segment", parents=[common, segmenting], help="cut welding segments from recordings")
    p.add_argument("--in", dest="in_dir", type=Path, help="recording directory (defaults to --data-dir)")

    p = sub.add_parser("transform", parents=[common, segmenting], help="dump dB spectrograms")
    p.add_argument("--sensors", type=sensor_list, default=(4, 6))
    p.add_argument("--mel", action="store_true")
    p.add_argument("--n-mels", type=positive, default=128)

    task_flags = argparse.ArgumentParser(add_help=False)
    task_flags.add_argument("--task", type=int, choices=(1, 2, 3), default=2)
    task_flags.add_argument("--method", choices=harness.METHODS, default="hybrid")
    task_flags.add_argument("--sensors", type=sensor_list, default=(4, 6))

    p = sub.add_parser("train", parents=[common, segmenting, training, splitting, task_flags], help="train on the holdout training side")
    p.add_argument("--aug-factor", type=non_negative, default=harness.OPERATING_AUG_FACTOR)

    p = sub.add_parser("evaluate", parents=[common, segmenting, training, splitting, task_flags], help="cross-validate and score the holdout")
    p.add_argument("--aug-factor", type=non_negative, default=harness.OPERATING_AUG_FACTOR)
    p.add_argument("--folds", type=positive, default=6)
    p.add_argument("--reps", type=positive, default=3)

    p = sub.add_parser("rank-sensors", parents=[common, segmenting, training, splitting], help="rank all sensor subsets by CV LCB")
    p.add_argument("--tasks", type=int_list, default=(1, 2, 3))
    p.add_argument("--methods", type=method_list, default=harness.METHODS)
    p.add_argument("--sensors", type=sensor_list, default=ALL_SENSORS, help="sensors to combine")
    p.add_argument("--aug-factor", type=non_negative, default=0)
    p.add_argument("--folds", type=positive, default=6)
    p.add_argument("--reps", type=positive, default=1)
    p.add_argument("--top-m", type=positive, default=5)

    p = sub.add_parser("sweep-augment", parents=[common, segmenting, training, splitting], help="CV accuracy per augmentation factor")
    p.add_argument("--task", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--method", choices=harness.METHODS, default="hybrid")
    p.add_argument("--sensors", type=sensor_list, default=(4, 6))
    p.add_argument("--factors", type=int_list, default=tuple(range(11)))
    p.add_argument("--folds", type=positive, default=6)
    p.add_argument("--reps", type=positive, default=3)

    p = sub.add_parser("bench-latency", parents=[common, segmenting, training, splitting], help="time transform, features and inference")
    p.add_argument("--runs", type=positive, default=300)
    p.add_argument("--methods", type=method_list, default=("hybrid", "dwt"))
    p.add_argument("--sensors", type=sensor_list, default=(4, 6))
    p.add_argument("--task", type=int, choices=(1, 2, 3), default=2)
    p.set_defaults(max_epochs=5)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config is not None:
        args = apply_config(parser, argv, args)
    if getattr(args, "factors", None) is not None and min(args.factors) < 0:
        raise UsageError("augmentation factors must be non-negative")
    return args


def apply_config(parser, argv, args) -> argparse.Namespace:
    """Re-parse with the config file's values appended, so they win and pass the same validation."""
    try:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    known = vars(args)
    extra = []
    flags = {}
    for key, value in overrides.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest in ("command", "config") or dest not in known:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(value, bool):
            flags[dest] = value
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        option = "--in" if dest == "in_dir" else "--" + dest.replace("_", "-")
        extra += [option, str(value)]
    args = parser.parse_args(list(argv) + extra)
    for dest, value in flags.items():
        setattr(args, dest, value)
    return args


# ---------------------------------------------------------------------------
# helpers


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run_meta(args, extra=None) -> None:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("verbose", "command", "config")}
    doc = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
    }
    if extra:
        doc.update(extra)
    write_json(args.out_dir / "run-meta.json", doc)


def segmenter_config(args) -> SegmenterConfig:
    return SegmenterConfig(reference_channel=args.reference_channel, theta1=args.theta1, theta2=args.theta2)


def load_segments(args) -> list:
    """Segment set from ``--data-dir`` if present, else segment its recordings."""
    data_dir = Path(args.data_dir)
    if (data_dir / f"{SEGMENT_SET}.segf32").exists():
        return read_segment_set(data_dir / SEGMENT_SET)
    stems = list_recordings(data_dir) if data_dir.is_dir() else []
    if not stems:
        raise NoData(f"{data_dir} holds neither {SEGMENT_SET}.segf32 nor recordings")
    cfg = segmenter_config(args)
    return [segment_cycle(read_recording(s), cfg) for s in stems]


def cv_config(args) -> harness.CvConfig:
    return harness.CvConfig(
        folds=getattr(args, "folds", 6),
        repetitions=getattr(args, "reps", 3),
        holdout_ratio=args.holdout_ratio,
        split_seed=args.split_seed,
    )


def train_params(args) -> dict:
    return {"max_epochs": args.max_epochs, "lr": args.lr, "batch_size": args.batch_size}


def csv_row(row: dict) -> dict:
    latency = row.get("latency") or {}
    return {
        "task": row["task"],
        "method": row["method"],
        "sensors": " ".join(str(s) for s in row["sensors"]),
        "aug_factor": row["aug_factor"],
        "cv_mean": row["cv_mean"],
        "cv_std": row["cv_std"],
        "lcb": row["lcb"],
        "holdout_acc": row["holdout_accuracy"],
        "mean_ms": latency.get("mean_ms"),
        "max_ms": latency.get("max_ms"),
    }


def write_csv(path: Path, rows: list, columns) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})


def write_report(out_dir: Path, rows: list, meta: dict) -> None:
    write_json(out_dir / "report.json", {"rows": rows, **meta})
    write_csv(out_dir / "report.csv", [csv_row(r) for r in rows], CSV_COLUMNS)


def report_meta(args, cv: harness.CvConfig) -> dict:
    return {
        "seed": args.seed,
        "cv": {"folds": cv.folds, "repetitions": cv.repetitions, "holdout_ratio": cv.holdout_ratio, "split_seed": cv.split_seed},
        "train": train_params(args),
    }


def make_bank(segments, sensors, need_images=True) -> harness.SegmentBank:
    return harness.SegmentBank(segments, sensors, need_images=need_images)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> None:
    recordings = generate_dataset(args.seed, args.cycles_per_class)
    for rec in recordings:
        write_recording(rec, args.out_dir / rec.recording_id)
    print(f"wrote {len(recordings)} recordings to {args.out_dir}")


def cmd_segment(args) -> None:
    in_dir = Path(args.in_dir or args.data_dir)
    stems = list_recordings(in_dir) if in_dir.is_dir() else []
    if not stems:
        raise NoData(f"no recordings in {in_dir}")
    cfg = segmenter_config(args)
    segments, rows = [], []
    for stem in stems:
        rec = read_recording(stem)
        seg = segment_cycle(rec, cfg)
        segments.append(seg)
        row = {"recording_id": rec.recording_id, **seg.marks}
        truth = rec.manifest.ground_truth
        if truth:
            row["t_weld_true_s"] = truth["t_weld_true_s"]
            row["sw_error_ms"] = 1000.0 * (seg.marks["t_sw_s"] - (truth["t_weld_true_s"] - cfg.sw_adjust_s))
        rows.append(row)
    write_segment_set(segments, args.out_dir / SEGMENT_SET)
    columns = ("recording_id", "t_hm_s", "t_sw_s", "t_ew_s", "t_weld_true_s", "sw_error_ms")
    write_csv(args.out_dir / "marks.csv", rows, columns)
    print(f"segmented {len(segments)} recordings into {args.out_dir / SEGMENT_SET}.segf32")


def cmd_transform(args) -> None:
    segments = load_segments(args)
    cfg = StftConfig()
    index, offset = [], 0
    path = args.out_dir / "spectrograms.segf32"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for seg in segments:
            stack = segment_spectrograms(seg, args.sensors, cfg, mel=args.mel, n_mels=args.n_mels).astype("<f4")
            fh.write(stack.tobytes())
            index.append({"source_id": seg.source_id, "shape": list(stack.shape), "offset": offset, "labels": seg.labels})
            offset += stack.size
    write_json(
        args.out_dir / "spectrograms.json",
        {
            "format_version": 1,
            "sensors": list(args.sensors),
            "scale": "mel-dB" if args.mel else "dB",
            "window_len": cfg.window_len,
            "hop": cfg.hop,
            "db_floor": cfg.db_floor,
            "spectrograms": index,
        },
    )
    print(f"wrote {len(index)} spectrogram stacks to {path}")


def cmd_train(args) -> None:
    segments = load_segments(args)
    bank = make_bank(segments, args.sensors, need_images=args.method != "dwt")
    cv = cv_config(args)
    task = harness.task_spec(args.task)
    train, test = harness.build_task_dataset(bank, task, args.sensors, cv)
    audit = harness.LeakageAudit()
    acc, cm, by_surface, clf = harness.holdout_evaluate(train, test, args.method, args.aug_factor, args.seed, audit, train_params(args))
    extra = {
        "task": args.task,
        "method": args.method,
        "sensors": list(args.sensors),
        "aug_factor": args.aug_factor,
        "classes": list(task.class_names),
        "holdout_accuracy": acc,
    }
    save_checkpoint(clf.model_, args.out_dir / "model.ckpt", extra)
    write_csv(args.out_dir / "train-log.csv", clf.model_.log, ("epoch", "loss", "accuracy", "lr"))
    write_json(args.out_dir / "train-summary.json", {**extra, "confusion_matrix": cm.tolist(), "holdout_by_surface": by_surface, "audit": audit.to_dict()})
    print(f"trained {args.method} on task {args.task}: {len(clf.model_.log)} epochs, holdout accuracy {acc:.3f}")


def cmd_evaluate(args) -> None:
    segments = load_segments(args)
    bank = make_bank(segments, args.sensors, need_images=args.method != "dwt")
    cv = cv_config(args)
    row = harness.evaluate(bank, args.task, args.method, args.sensors, args.aug_factor, cv, args.seed, train_params(args))
    write_report(args.out_dir, [row], report_meta(args, cv))
    print(f"task {args.task} {args.method} {list(args.sensors)}: cv {row['cv_mean']:.3f} +- {row['cv_std']:.3f}, lcb {row['lcb']:.3f}, holdout {row['holdout_accuracy']:.3f}")


def cmd_rank_sensors(args) -> None:
    segments = load_segments(args)
    need_images = any(m != "dwt" for m in args.methods)
    bank = make_bank(segments, args.sensors, need_images=need_images)
    cv = cv_config(args)
    result = harness.rank_sensor_combinations(bank, args.tasks, args.methods, cv, args.aug_factor, args.top_m, args.seed, train_params(args))
    write_json(args.out_dir / "ranking.json", {**result, **report_meta(args, cv)})
    rows = [
        {"method": m, "rank": r["rank"], "sensors": " ".join(map(str, r["sensors"])), "lcb": r["lcb"], "cv_mean": r["cv_mean"]}
        for m in args.methods
        for r in result["ranking"][m]
    ]
    write_csv(args.out_dir / "ranking.csv", rows, ("method", "rank", "sensors", "lcb", "cv_mean"))
    for m in args.methods:
        best = result["ranking"][m][0]
        print(f"{m}: best {best['sensors']} lcb {best['lcb']:.3f}")
    print(f"stable top-{args.top_m}: {result['stable_top']}")


def cmd_sweep_augment(args) -> None:
    segments = load_segments(args)
    bank = make_bank(segments, args.sensors, need_images=args.method != "dwt")
    cv = cv_config(args)
    rows = harness.augmentation_sweep(bank, args.task, args.method, args.sensors, args.factors, cv, args.seed, train_params(args))
    by_factor = {r["aug_factor"]: r["cv_mean"] for r in rows}
    meta = report_meta(args, cv)
    if 0 in by_factor and max(by_factor) > 0:
        meta["gap_max_vs_zero"] = by_factor[max(by_factor)] - by_factor[0]
    write_report(args.out_dir, rows, meta)
    sweep_rows = [
        {
            "aug_factor": r["aug_factor"],
            "cv_mean": r["cv_mean"],
            "cv_std": r["cv_std"],
            "lcb": r["lcb"],
            "holdout_acc": r["holdout_accuracy"],
            "operating_point": int(r["operating_point"]),
        }
        for r in rows
    ]
    write_csv(args.out_dir / "sweep.csv", sweep_rows, ("aug_factor", "cv_mean", "cv_std", "lcb", "holdout_acc", "operating_point"))
    for r in rows:
        mark = " *" if r["operating_point"] else ""
        print(f"factor {r['aug_factor']:2d}: cv {r['cv_mean']:.3f} +- {r['cv_std']:.3f}, holdout {r['holdout_accuracy']:.3f}{mark}")


def cmd_bench_latency(args) -> None:
    segments = load_segments(args)
    bank = make_bank(segments, args.sensors, need_images=any(m != "dwt" for m in args.methods))
    cv = cv_config(args)
    train, test = harness.build_task_dataset(bank, harness.task_spec(args.task), args.sensors, cv)
    results = []
    for method in args.methods:
        clf = harness.fit_method(train, np.arange(len(train)), method, 0, args.seed, test.ids, harness.LeakageAudit(), train_params(args))
        res = harness.bench_latency(clf, segments, args.sensors, method, args.runs)
        results.append(res)
        print(f"{method}: mean {res['mean_ms']:.1f} ms (max {res['max_ms']:.1f} ms) over {res['n_runs']} cycles")
    write_json(args.out_dir / "latency.json", {"results": results, "machine": harness.machine_spec()})
    write_csv(args.out_dir / "latency.csv", results, ("method", "n_runs", "mean_ms", "max_ms"))


COMMANDS = {
    "generate": cmd_generate,
    "segment": cmd_segment,
    "transform": cmd_transform,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rank-sensors": cmd_rank_sensors,
    "sweep-augment": cmd_sweep_augment,
    "bench-latency": cmd_bench_latency,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors this way
        return 0 if exc.code in (0, None) else 2
    except UsageError as exc:
        print(f"UsageError: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        write_run_meta(args)
        COMMANDS[args.command](args)
    except DataError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except InvariantViolation as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
