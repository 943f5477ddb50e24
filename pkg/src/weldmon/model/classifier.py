"""Training loop, checkpoints and the scikit-learn style classifier."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from weldmon.errors import CorruptFile, DegenerateDataset, ShapeMismatch, UnsupportedVersion
from weldmon.features import apply_normalizer, fit_normalizer
from weldmon.model.engine import Adam, Network, NetworkSpec

CHECKPOINT_MAGIC = b"WMCKPT01"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    batch_size: int = 32
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_accuracy: float = 0.995
    early_stop_patience: int = 5
    lr_patience: int = 5
    lr_min_delta: float = 1e-4
    lr_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class TrainedModel:
    spec: NetworkSpec
    theta: np.ndarray
    log: list = field(default_factory=list)
    seed: int = 0
    scaler: tuple | None = None  # (mean, std) of the handcrafted features

    def network(self) -> Network:
        net = Network(self.spec)
        if self.theta.shape != (net.n_params,):
            raise ShapeMismatch(f"{self.theta.size} parameters for a {net.n_params}-parameter spec")
        net.theta = self.theta
        return net

    def forward(self, images=None, features=None) -> np.ndarray:
        if self.scaler is not None and features is not None:
            features = apply_normalizer(self.scaler, features)
        return self.network().forward(images, features)

    def predict(self, images=None, features=None) -> np.ndarray:
        return predict_from_proba(self.forward(images, features))


def predict_from_proba(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def train(spec: NetworkSpec, images, features, y, cfg: TrainConfig = TrainConfig(), net: Network | None = None) -> TrainedModel:
    """Mini-batch Adam on mean cross-entropy.

    Stops after ``max_epochs`` or once training accuracy has stayed at or
    above ``early_stop_accuracy`` for ``early_stop_patience`` epochs. The
    learning rate is multiplied by ``lr_factor`` whenever the epoch loss has
    not improved by ``lr_min_delta`` for ``lr_patience`` epochs.
    """
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise DegenerateDataset("empty training set")
    if len(np.unique(y)) < 2:
        raise DegenerateDataset("training labels cover a single class")
    if net is None:
        net = Network(spec)
        net.initialize(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(net.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(y)
    log = []
    best_loss = np.inf
    wait = 0
    streak = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = None if images is None else images[idx]
            fb = None if features is None else features[idx]
            loss, grad, probs = net.loss_and_grad(xb, fb, y[idx])
            opt.step(net.theta, grad)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
        epoch_loss = total_loss / n
        accuracy = correct / n
        log.append({"epoch": epoch, "loss": epoch_loss, "accuracy": accuracy, "lr": opt.lr})

        streak = streak + 1 if accuracy >= cfg.early_stop_accuracy else 0
        if streak >= cfg.early_stop_patience:
            break
        if epoch_loss < best_loss - cfg.lr_min_delta:
            best_loss = epoch_loss
            wait = 0
        else:
            wait += 1
            if wait >= cfg.lr_patience:
                opt.lr *= cfg.lr_factor
                wait = 0
    return TrainedModel(spec=spec, theta=net.theta, log=log, seed=cfg.seed)


def save_checkpoint(model: TrainedModel, path, extra: dict | None = None) -> None:
    """JSON header then the raw little-endian float64 parameter block."""
    header = {
        "format_version": 1,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "log": model.log,
        "n_params": int(model.theta.size),
        "scaler": None if model.scaler is None else [model.scaler[0].tolist(), model.scaler[1].tolist()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(model.theta, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (TrainedModel, extra)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: not a weldmon checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: malformed header") from exc
    if header.get("format_version") != 1:
        raise UnsupportedVersion(f"checkpoint format_version {header.get('format_version')}")
    theta = np.frombuffer(raw[16 + n:], dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"]:
        raise CorruptFile(f"{path}: expected {header['n_params']} parameters, found {theta.size}")
    scaler = header["scaler"]
    model = TrainedModel(
        spec=NetworkSpec.from_dict(header["spec"]),
        theta=theta,
        log=header["log"],
        seed=header["seed"],
        scaler=None if scaler is None else (np.array(scaler[0]), np.array(scaler[1])),
    )
    return model, header["extra"]


class WeldClassifier(ClassifierMixin, BaseEstimator):
    """Hybrid, CNN-only or feature-MLP classifier.

    ``X`` is the (n, C, H, W) image tensor for the ``hybrid`` and ``cnn``
    variants and the (n, d) handcrafted feature matrix for ``dwt``. The hybrid
    variant also takes the feature matrix through ``features=``. Features are
    standardized with statistics fitted on the training call only.
    """

    def __init__(
        self,
        variant="hybrid",
        conv_channels=(8, 16, 32, 64),
        fc_hidden=(128, 64),
        lr=4e-4,
        batch_size=32,
        max_epochs=100,
        random_state=0,
    ):
        self.variant = variant
        self.conv_channels = conv_channels
        self.fc_hidden = fc_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _split(self, X, features):
        if self.variant == "dwt":
            return None, np.asarray(X, dtype=np.float64)
        images = np.asarray(X, dtype=np.float64)
        if self.variant == "hybrid":
            if features is None:
                raise ShapeMismatch("hybrid variant needs handcrafted features")
            return images, np.asarray(features, dtype=np.float64)
        return images, None

    def fit(self, X, y, features=None, taint=None):
        images, feats = self._split(X, features)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DegenerateDataset("training labels cover a single class")
        scaler = None
        if feats is not None:
            scaler = fit_normalizer(feats, taint)
            feats = apply_normalizer(scaler, feats)
        spec = NetworkSpec(
            variant=self.variant,
            input_shape=tuple(images.shape[1:]) if images is not None else (0, 0, 0),
            conv_channels=tuple(self.conv_channels) if self.variant != "dwt" else (),
            fc_layers=tuple(self.fc_hidden) + (len(self.classes_),),
            handcrafted_dim=0 if feats is None else feats.shape[1],
        )
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, seed=self.random_state)
        self.model_ = train(spec, images, feats, y_idx, cfg)
        self.model_.scaler = scaler
        return self

    def predict_proba(self, X, features=None):
        check_is_fitted(self, "model_")
        images, feats = self._split(X, features)
        return self.model_.forward(images, feats)

    def predict(self, X, features=None):
        return self.classes_[predict_from_proba(self.predict_proba(X, features))]

    def score(self, X, y, features=None):
        return float(np.mean(self.predict(X, features) == np.asarray(y)))
