"""Evaluation protocol: tasks, holdout split, repeated stratified CV,
sensor-combination ranking, augmentation sweeps and latency benchmarks.

Per-segment representations (raw waveforms, dB spectrograms, pooled images,
handcrafted features) are computed once per sensor in a :class:`SegmentBank`;
every experiment then indexes into it. Augmented samples are spliced from the
bank inside each training fold and never reach an evaluation fold.
"""
from __future__ import annotations

import itertools
import logging
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import RepeatedStratifiedKFold
from threadpoolctl import threadpool_limits

from weldmon.augment import materialize, splice_plan
from weldmon.errors import EmptyClass, InsufficientSamples, LeakageError
from weldmon.features import N_FEATURES, extract_features, segment_features, waveform_features
from weldmon.ingest import SENSOR_NAMES, TOOLS, condition_name
from weldmon.model.classifier import WeldClassifier
from weldmon.spectral import StftConfig, pool_and_normalize, pool_stack, segment_spectrograms, stft_magnitude, to_decibel

log = logging.getLogger(__name__)

METHODS = ("hybrid", "dwt", "cnn")
LCB_Z = 1.96
OPERATING_AUG_FACTOR = 5


def lcb(mean: float, std: float) -> float:
    """Lower confidence bound used to rank configurations."""
    return mean - LCB_Z * std


@dataclass(frozen=True)
class TaskSpec:
    id: int
    class_names: tuple
    class_mapping: dict  # (tool, surface) -> class index
    train_surfaces: tuple = ("Clean", "Contaminated")

    def label_of(self, labels: dict) -> int:
        return self.class_mapping[(labels["tool"], labels["surface"])]


def task_spec(task_id: int) -> TaskSpec:
    if task_id == 1:
        conds = [(t, s) for t in TOOLS for s in ("Clean", "Contaminated")]
        return TaskSpec(1, tuple(f"{t}+{s}" for t, s in conds), {c: i for i, c in enumerate(conds)})
    if task_id in (2, 3):
        mapping = {(t, s): TOOLS.index(t) for t in TOOLS for s in ("Clean", "Contaminated")}
        surfaces = ("Clean",) if task_id == 3 else ("Clean", "Contaminated")
        return TaskSpec(task_id, TOOLS, mapping, surfaces)
    raise ValueError(f"unknown task {task_id}")


@dataclass(frozen=True)
class CvConfig:
    folds: int = 6
    repetitions: int = 3
    holdout_ratio: float = 0.2
    split_seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if not 0 < self.holdout_ratio < 1:
            raise ValueError("holdout_ratio must lie in (0, 1)")


def _sub_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("WELDMON_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# representations


class SegmentBank:
    """Per-sensor representations of a list of segments."""

    def __init__(self, segments, sensors, stft: StftConfig = StftConfig(), need_images: bool = True, mel: bool = False):
        if not segments:
            raise EmptyClass("no segments")
        self.sensors = tuple(sorted(sensors))
        self.stft = stft
        self.mel = mel
        self.sample_rate = segments[0].sample_rate_hz
        self.ids = [s.source_id for s in segments]
        self.labels = [s.labels for s in segments]
        self.conditions = np.array([condition_name(lab) for lab in self.labels])
        self.waves = np.stack(
            [np.stack([s.channel(sid) for sid in self.sensors]) for s in segments]
        ).astype(np.float32)
        self.feats = np.stack(
            [
                np.stack([extract_features(s.channel(sid), self.sample_rate, stft) for sid in self.sensors])
                for s in segments
            ]
        )
        self.db = None
        self.images = None
        if need_images:
            self.db = np.stack(
                [segment_spectrograms(s, self.sensors, stft, mel=mel) for s in segments]
            ).astype(np.float32)
            self.images = np.stack([pool_stack(d) for d in self.db])

    def __len__(self) -> int:
        return len(self.ids)

    def channels(self, sensors) -> list:
        missing = set(sensors) - set(self.sensors)
        if missing:
            raise ValueError(f"sensors {sorted(missing)} not in bank {self.sensors}")
        return [self.sensors.index(s) for s in sorted(sensors)]


@dataclass
class TaskData:
    """One side (train or test) of a task for one sensor selection."""

    bank: SegmentBank
    index: np.ndarray  # rows of the bank
    y: np.ndarray
    sensors: tuple
    task: TaskSpec
    taint: np.ndarray  # True = evaluation-only

    def __len__(self) -> int:
        return len(self.index)

    @property
    def ch(self) -> list:
        return self.bank.channels(self.sensors)

    @property
    def ids(self) -> list:
        return [self.bank.ids[i] for i in self.index]

    def images(self, rows=None):
        rows = self.index if rows is None else self.index[rows]
        return self.bank.images[rows][:, self.ch]

    def feats(self, rows=None):
        rows = self.index if rows is None else self.index[rows]
        return self.bank.feats[rows][:, self.ch].reshape(len(rows), -1)

    def db(self, rows):
        return self.bank.db[self.index[rows]][:, self.ch]

    def waves(self, rows):
        return self.bank.waves[self.index[rows]][:, self.ch]


def holdout_split(conditions, ratio: float, seed: int):
    """Stratified split of all cycles by condition; returns (train_idx, test_idx).

    Depends only on the condition labels, ``ratio`` and ``seed``, so the same
    cycles land on the same side for every task, method and sensor set.
    """
    conditions = np.asarray(conditions)
    rng = np.random.default_rng(seed)
    test = []
    for cond in sorted(set(conditions.tolist())):
        members = np.flatnonzero(conditions == cond)
        n_test = int(round(ratio * len(members)))
        test.extend(rng.permutation(members)[:n_test].tolist())
    test = np.array(sorted(test), dtype=int)
    train = np.setdiff1d(np.arange(len(conditions)), test)
    return train, test


def build_task_dataset(bank: SegmentBank, task: TaskSpec, sensors, cv: CvConfig = CvConfig()):
    """(train, test) :class:`TaskData` for one task and sensor selection."""
    sensors = tuple(sorted(sensors))
    if not sensors:
        raise ValueError("empty sensor selection")
    bank.channels(sensors)
    for lab in bank.labels:
        if lab is None:
            raise EmptyClass("unlabeled segment in evaluation data")
    train_idx, test_idx = holdout_split(bank.conditions, cv.holdout_ratio, cv.split_seed)
    surfaces = np.array([lab["surface"] for lab in bank.labels])
    moved = train_idx[~np.isin(surfaces[train_idx], task.train_surfaces)]
    train_idx = train_idx[np.isin(surfaces[train_idx], task.train_surfaces)]
    test_idx = np.sort(np.concatenate([test_idx, moved])).astype(int)
    y_all = np.array([task.label_of(lab) for lab in bank.labels])
    for c, name in enumerate(task.class_names):
        if not np.any(y_all[train_idx] == c):
            raise EmptyClass(f"class {name!r} has no training samples in task {task.id}")
    train = TaskData(bank, train_idx, y_all[train_idx], sensors, task, np.zeros(len(train_idx), bool))
    test = TaskData(bank, test_idx, y_all[test_idx], sensors, task, np.ones(len(test_idx), bool))
    return train, test


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class LeakageAudit:
    """Counts every training-only call and checks it saw no evaluation cycle."""

    augment_calls: int = 0
    normalizer_fits: int = 0
    fits: int = 0
    leaked_samples: int = 0

    def check(self, train_ids, eval_ids, taint):
        self.fits += 1
        overlap = set(train_ids) & set(eval_ids)
        n_bad = len(overlap) + int(np.sum(taint))
        if n_bad:
            self.leaked_samples += n_bad
            raise LeakageError(f"{n_bad} evaluation samples reached training ({sorted(overlap)[:5]})")

    def merge(self, other: "LeakageAudit"):
        self.augment_calls += other.augment_calls
        self.normalizer_fits += other.normalizer_fits
        self.fits += other.fits
        self.leaked_samples += other.leaked_samples

    def to_dict(self) -> dict:
        return {
            "augment_calls": self.augment_calls,
            "normalizer_fits": self.normalizer_fits,
            "fits": self.fits,
            "leaked_samples": self.leaked_samples,
        }


def training_arrays(data: TaskData, rows, method: str, aug_factor: int, seed: int, taint, audit: LeakageAudit | None = None):
    """Originals plus spliced samples for the given rows: (X, features, y)."""
    rows = np.asarray(rows, dtype=int)
    y = data.y[rows]
    plan = splice_plan(y, aug_factor, seed, taint=taint)
    if audit is not None:
        audit.augment_calls += 1
    images = feats = None
    if method in ("hybrid", "cnn"):
        images = data.images(rows)
        if len(plan):
            new = materialize(data.db(rows), plan, axis=-2, post=pool_stack)
            images = np.concatenate([images, np.stack(new)], axis=0)
    if method in ("hybrid", "dwt"):
        feats = data.feats(rows)
        if len(plan):
            sr = data.bank.sample_rate
            new = materialize(
                data.waves(rows), plan, axis=-1, post=lambda w: waveform_features(w, sr, data.bank.stft)
            )
            feats = np.concatenate([feats, np.stack(new)], axis=0)
    y_all = np.concatenate([y, plan.label])
    return images, feats, y_all


def fit_method(data: TaskData, rows, method: str, aug_factor: int, seed: int, eval_ids=(), audit=None, train_params=None):
    """Train one classifier on ``rows`` of ``data`` (augmented)."""
    rows = np.asarray(rows, dtype=int)
    taint = data.taint[rows]
    if audit is not None:
        audit.check([data.ids[i] for i in rows], eval_ids, taint)
    images, feats, y = training_arrays(data, rows, method, aug_factor, _sub_seed(seed, 1), taint, audit)
    params = dict(train_params or {})
    clf = WeldClassifier(variant=method, random_state=_sub_seed(seed, 2), **params)
    full_taint = np.zeros(len(y), dtype=bool)
    with threadpool_limits(limits=1):
        if method == "dwt":
            clf.fit(feats, y, taint=full_taint)
        else:
            clf.fit(images, y, features=feats if method == "hybrid" else None, taint=full_taint)
    if audit is not None and method in ("hybrid", "dwt"):
        audit.normalizer_fits += 1
    return clf


def predict_rows(clf, data: TaskData, rows, method: str):
    rows = np.asarray(rows, dtype=int)
    with threadpool_limits(limits=1):
        if method == "dwt":
            return clf.predict(data.feats(rows))
        return clf.predict(data.images(rows), features=data.feats(rows) if method == "hybrid" else None)


def _run_fold(data, method, aug_factor, tr, va, seed, train_params):
    audit = LeakageAudit()
    fold_taint = np.zeros(len(data), dtype=bool)
    fold_taint[va] = True
    view = TaskData(data.bank, data.index, data.y, data.sensors, data.task, data.taint | fold_taint)
    eval_ids = [data.ids[i] for i in va]
    clf = fit_method(view, tr, method, aug_factor, seed, eval_ids, audit, train_params)
    pred = predict_rows(clf, data, va, method)
    acc = float(np.mean(pred == data.y[va]))
    log.info("%s fold: %d epochs, accuracy %.3f", method, len(clf.model_.log), acc)
    return acc, audit, len(clf.model_.log)


def cv_splits(y, cv: CvConfig = CvConfig()) -> list:
    """(train_idx, eval_idx) pairs, repetition-major, fixed by ``cv.split_seed``."""
    y = np.asarray(y)
    splitter = RepeatedStratifiedKFold(n_splits=cv.folds, n_repeats=cv.repetitions, random_state=cv.split_seed)
    return list(splitter.split(np.zeros(len(y)), y))


@dataclass
class CvResult:
    mean: float
    std: float
    per_fold: list
    epochs: list = field(default_factory=list)
    audit: LeakageAudit = field(default_factory=LeakageAudit)

    @property
    def lcb(self) -> float:
        return lcb(self.mean, self.std)


def cross_validate(data: TaskData, method: str, aug_factor: int = 0, cv: CvConfig = CvConfig(), seed: int = 0, train_params=None) -> CvResult:
    """Repeated stratified k-fold CV; augmentation touches training folds only."""
    counts = np.bincount(data.y, minlength=len(data.task.class_names))
    if counts.min() < cv.folds:
        raise InsufficientSamples(f"class sizes {counts.tolist()} are smaller than {cv.folds} folds")
    splits = cv_splits(data.y, cv)
    jobs = (
        delayed(_run_fold)(data, method, aug_factor, tr, va, _sub_seed(seed, k), train_params)
        for k, (tr, va) in enumerate(splits)
    )
    results = Parallel(n_jobs=n_workers())(jobs)
    per_fold = [r[0] for r in results]
    audit = LeakageAudit()
    for r in results:
        audit.merge(r[1])
    return CvResult(
        mean=float(np.mean(per_fold)),
        std=float(np.std(per_fold)),
        per_fold=per_fold,
        epochs=[r[2] for r in results],
        audit=audit,
    )


def holdout_evaluate(train: TaskData, test: TaskData, method: str, aug_factor: int, seed: int = 0, audit=None, train_params=None):
    """Train on the whole (augmented) training side, score the held-out side."""
    clf = fit_method(train, np.arange(len(train)), method, aug_factor, _sub_seed(seed, 99), test.ids, audit, train_params)
    pred = predict_rows(clf, test, np.arange(len(test)), method)
    n_classes = len(train.task.class_names)
    cm = confusion_matrix(test.y, pred, labels=list(range(n_classes)))
    by_surface = {}
    surfaces = np.array([test.bank.labels[i]["surface"] for i in test.index])
    for s in sorted(set(surfaces.tolist())):
        m = surfaces == s
        by_surface[s] = float(np.mean(pred[m] == test.y[m]))
    return float(np.mean(pred == test.y)), cm, by_surface, clf


def evaluate(bank: SegmentBank, task_id: int, method: str, sensors, aug_factor: int = OPERATING_AUG_FACTOR, cv: CvConfig = CvConfig(), seed: int = 0, train_params=None, holdout: bool = True) -> dict:
    """One report row: CV statistics plus holdout accuracy."""
    task = task_spec(task_id)
    train, test = build_task_dataset(bank, task, sensors, cv)
    res = cross_validate(train, method, aug_factor, cv, seed, train_params)
    row = {
        "task": task_id,
        "method": method,
        "sensors": list(train.sensors),
        "aug_factor": int(aug_factor),
        "cv_mean": res.mean,
        "cv_std": res.std,
        "lcb": res.lcb,
        "per_fold": res.per_fold,
        "epochs": res.epochs,
        "n_train": len(train),
        "n_test": len(test),
        "holdout_accuracy": None,
        "holdout_by_surface": None,
        "confusion_matrix": None,
        "latency": None,
    }
    audit = res.audit
    if holdout:
        acc, cm, by_surface, _ = holdout_evaluate(train, test, method, aug_factor, seed, audit, train_params)
        row.update(holdout_accuracy=acc, holdout_by_surface=by_surface, confusion_matrix=cm.tolist())
    row["audit"] = audit.to_dict()
    return row


def sensor_subsets(sensors) -> list:
    sensors = sorted(sensors)
    return [c for r in range(1, len(sensors) + 1) for c in itertools.combinations(sensors, r)]


def rank_sensor_combinations(bank: SegmentBank, tasks=(1, 2, 3), methods=METHODS, cv: CvConfig = CvConfig(repetitions=1), aug_factor: int = 0, top_m: int = 5, seed: int = 0, train_params=None) -> dict:
    """Rank every non-empty sensor subset by task-averaged CV LCB, per method."""
    subsets = sensor_subsets(bank.sensors)
    ranking = {}
    for method in methods:
        rows = []
        for subset in subsets:
            per_task = {}
            for t in tasks:
                train, _ = build_task_dataset(bank, task_spec(t), subset, cv)
                res = cross_validate(train, method, aug_factor, cv, seed, train_params)
                per_task[str(t)] = {"cv_mean": res.mean, "cv_std": res.std, "lcb": res.lcb}
            rows.append(
                {
                    "sensors": list(subset),
                    "lcb": float(np.mean([v["lcb"] for v in per_task.values()])),
                    "cv_mean": float(np.mean([v["cv_mean"] for v in per_task.values()])),
                    "per_task": per_task,
                }
            )
            log.info("%s %s lcb=%.3f", method, subset, rows[-1]["lcb"])
        # stable sort keeps enumeration order among ties
        rows.sort(key=lambda r: -r["lcb"])
        for rank, r in enumerate(rows, start=1):
            r["rank"] = rank
        ranking[method] = rows
    tops = [{tuple(r["sensors"]) for r in ranking[m][:top_m]} for m in methods]
    stable = set.intersection(*tops) if tops else set()
    return {
        "methods": list(methods),
        "tasks": list(tasks),
        "top_m": top_m,
        "ranking": ranking,
        "stable_top": [list(s) for s in subsets if s in stable],
    }


def augmentation_sweep(bank: SegmentBank, task_id: int, method: str, sensors, factors=range(11), cv: CvConfig = CvConfig(), seed: int = 0, train_params=None) -> list:
    """One row per augmentation factor, all on the same splits."""
    rows = []
    for k in factors:
        if k < 0:
            raise ValueError(f"augmentation factor {k} is negative")
        row = evaluate(bank, task_id, method, sensors, int(k), cv, seed, train_params)
        row["operating_point"] = int(k) == OPERATING_AUG_FACTOR
        rows.append(row)
        log.info("factor %d: cv %.3f +- %.3f, holdout %.3f", k, row["cv_mean"], row["cv_std"], row["holdout_accuracy"])
    return rows


# ---------------------------------------------------------------------------
# latency


def process_segment(segment, sensors, method: str, clf, stft: StftConfig = StftConfig()):
    """Transform, extract features and classify one segment."""
    image = feats = None
    if method in ("hybrid", "cnn"):
        image = pool_stack(segment_spectrograms(segment, sensors, stft))[None]
    if method in ("hybrid", "dwt"):
        feats = segment_features(segment, sensors, stft)[None]
    if method == "dwt":
        return clf.predict(feats)[0]
    return clf.predict(image, features=feats)[0]


def machine_spec() -> str:
    return f"{platform.machine()} {platform.processor() or 'unknown-cpu'}, {os.cpu_count()} cpus, {platform.system()} {platform.release()}, python {platform.python_version()}"


def bench_latency(clf, segments, sensors, method: str, n_runs: int = 300) -> dict:
    """Wall-clock time per cycle, single-threaded."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    times = []
    with threadpool_limits(limits=1):
        for i in range(n_runs):
            seg = segments[i % len(segments)]
            t0 = time.perf_counter()
            process_segment(seg, sensors, method, clf)
            times.append((time.perf_counter() - t0) * 1000.0)
    return {
        "method": method,
        "sensors": list(sorted(sensors)),
        "n_runs": n_runs,
        "mean_ms": float(np.mean(times)),
        "max_ms": float(np.max(times)),
        "machine": machine_spec(),
    }
