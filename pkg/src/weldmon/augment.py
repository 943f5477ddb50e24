"""Class-conditional splice augmentation.

Each synthetic sample joins the leading ``floor(alpha * T)`` time frames of one
training sample with the trailing frames of another sample of the same class.
Generation is split into a random *plan* (class, source indices, split ratio)
and its materialization, so callers can splice several aligned views of the
same samples (spectrogram stacks, raw waveforms) with identical draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from weldmon.errors import InsufficientClassSamples, LeakageError


@dataclass
class SplicePlan:
    label: np.ndarray  # class of each new sample
    first: np.ndarray  # index into X of the sample giving the leading frames
    second: np.ndarray  # index into X of the sample giving the trailing frames
    alpha: np.ndarray

    def __len__(self) -> int:
        return len(self.label)


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    labels: tuple = ()
    taint: np.ndarray | None = None  # True marks evaluation-only samples
    rng_seed: int = 0
    origin: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} samples but {len(self.y)} labels")
        if not self.labels:
            self.labels = tuple(sorted(set(self.y.tolist())))
        if self.taint is None:
            self.taint = np.zeros(len(self.y), dtype=bool)
        missing = set(self.labels) - set(self.y.tolist())
        if missing:
            raise InsufficientClassSamples(f"classes {sorted(missing)} have no samples")
        if not set(self.y.tolist()) <= set(self.labels):
            raise ValueError(f"labels outside the label set {self.labels}")

    def __len__(self) -> int:
        return len(self.y)


def splice(a: np.ndarray, b: np.ndarray, alpha: float, axis: int = -2) -> np.ndarray:
    """Leading ``floor(alpha * T)`` slices of ``a`` along ``axis``, the rest from ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot splice shapes {a.shape} and {b.shape}")
    cut = int(np.floor(alpha * a.shape[axis]))
    head = np.take(a, np.arange(cut), axis=axis)
    tail = np.take(b, np.arange(cut, a.shape[axis]), axis=axis)
    return np.concatenate([head, tail], axis=axis)


def splice_plan(y, aug_factor: int, rng_seed: int = 0, labels=None, taint=None) -> SplicePlan:
    """Random draws for ``aug_factor * count(l)`` new samples per class ``l``."""
    if aug_factor < 0:
        raise ValueError(f"aug_factor must be non-negative, got {aug_factor}")
    if taint is not None and np.any(taint):
        raise LeakageError(f"{int(np.sum(taint))} evaluation samples passed to augmentation")
    y = np.asarray(y, dtype=int)
    labels = sorted(set(y.tolist())) if labels is None else list(labels)
    rng = np.random.default_rng(rng_seed)
    out_label, out_p, out_q, out_alpha = [], [], [], []
    for label in labels:
        members = np.flatnonzero(y == label)
        n_aug = aug_factor * len(members)
        if n_aug == 0:
            continue
        if len(members) < 2:
            raise InsufficientClassSamples(
                f"class {label} has {len(members)} sample(s); splicing needs two distinct sources"
            )
        for _ in range(n_aug):
            alpha = rng.random()
            p, q = rng.choice(len(members), size=2, replace=False)
            out_label.append(label)
            out_p.append(members[p])
            out_q.append(members[q])
            out_alpha.append(alpha)
    return SplicePlan(
        label=np.asarray(out_label, dtype=int),
        first=np.asarray(out_p, dtype=int),
        second=np.asarray(out_q, dtype=int),
        alpha=np.asarray(out_alpha, dtype=float),
    )


def materialize(X, plan: SplicePlan, axis: int = -2, post=None) -> list:
    """Build the planned samples from ``X``; ``post`` is applied to each one."""
    out = []
    for p, q, alpha in zip(plan.first, plan.second, plan.alpha):
        s = splice(X[p], X[q], alpha, axis)
        out.append(post(s) if post is not None else s)
    return out


def augment(ds: LabeledDataset, aug_factor: int, axis: int = -2) -> LabeledDataset:
    """Originals followed by the spliced samples, classes in ascending order."""
    return _augment(ds, aug_factor, axis)[0]


def _augment(ds, aug_factor, axis):
    plan = splice_plan(ds.y, aug_factor, ds.rng_seed, ds.labels, ds.taint)
    new = materialize(ds.X, plan, axis)
    if isinstance(ds.X, np.ndarray):
        X = np.concatenate([ds.X, np.asarray(new).reshape((len(new),) + ds.X.shape[1:])], axis=0)
    else:
        X = list(ds.X) + new
    origin = np.concatenate([np.arange(len(ds)), np.full(len(plan), -1)])
    out = LabeledDataset(
        X=X,
        y=np.concatenate([ds.y, plan.label]),
        labels=ds.labels,
        taint=np.zeros(len(ds) + len(plan), dtype=bool),
        rng_seed=ds.rng_seed,
        origin=origin,
    )
    return out, plan


class SpliceAugmenter(BaseEstimator):
    """Resampler in the imbalanced-learn style: ``fit_resample(X, y)``."""

    def __init__(self, aug_factor: int = 5, random_state: int = 0, axis: int = -2):
        self.aug_factor = aug_factor
        self.random_state = random_state
        self.axis = axis

    def fit_resample(self, X, y):
        ds, self.plan_ = _augment(LabeledDataset(X=X, y=y, rng_seed=self.random_state), self.aug_factor, self.axis)
        return ds.X, ds.y
