"""The Conv1D-LSTM gesture network: construction, training, inference, evaluation."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from gessure.dataset import GestureDataset, GestureSample, split_indices
from gessure.errors import ConfigError, DataError, FormatError, ShapeError
from gessure.nn import LSTM, Conv1D, Dense, Dropout, MaxPool1D, Network, OptimizerState, TimeDistributed, adam_step
from gessure.rng import make_rng

log = logging.getLogger(__name__)

REFERENCE_PARAM_COUNT = 237_718
MODEL_MAGIC = b"GSRM"
MODEL_VERSION = 1


class ConsistencyError(ConfigError):
    pass


@dataclass(frozen=True)
class GestureNetSpec:
    frames: int = 20
    features: int = 63
    conv1_filters: int = 64
    conv2_filters: int = 64
    kernel: int = 3
    pool: int = 2
    dropout: float = 0.25
    lstm_units: int = 200
    classes: int = 6
    garbage_class: int | None = None

    def __post_init__(self):
        for name in ("frames", "features", "conv1_filters", "conv2_filters", "kernel", "pool", "lstm_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel width must be odd")
        if self.frames // (self.pool * self.pool) < 1:
            raise ConfigError("frames / pool^2 must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.garbage_class is not None and not 0 <= self.garbage_class < self.classes:
            raise ConfigError("garbage class out of range")

    @property
    def garbage(self) -> int:
        """Index of the catch-all class; defaults to the highest index."""
        return self.classes - 1 if self.garbage_class is None else self.garbage_class

    def param_breakdown(self) -> dict[str, int]:
        k, h = self.kernel, self.lstm_units
        return {
            "conv1": (k * self.features + 1) * self.conv1_filters,
            "conv2": (k * self.conv1_filters + 1) * self.conv2_filters,
            "lstm": 4 * (h * (self.conv2_filters + h) + h),
            "dense": (h + 1) * self.classes,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GestureNetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**data)


class GestureNet(Network):
    def __init__(self, spec: GestureNetSpec) -> None:
        self.spec = spec
        s = spec
        super().__init__([
            Conv1D(s.features, s.conv1_filters, s.kernel),
            MaxPool1D(s.pool),
            Dropout(s.dropout),
            Conv1D(s.conv1_filters, s.conv2_filters, s.kernel),
            MaxPool1D(s.pool),
            Dropout(s.dropout),
            Dropout(s.dropout),
            TimeDistributed(),
            LSTM(s.conv2_filters, s.lstm_units),
            Dropout(s.dropout),
            Dense(s.lstm_units, s.classes),
        ])


def build_gessure_net(spec: GestureNetSpec | None = None, seed: int = 0) -> GestureNet:
    spec = spec or GestureNetSpec()
    net = GestureNet(spec)
    expected = sum(spec.param_breakdown().values())
    if net.n_params != expected:
        raise ConsistencyError(f"realized {net.n_params} parameters, formula gives {expected}")
    if spec == GestureNetSpec() and net.n_params != REFERENCE_PARAM_COUNT:
        raise ConsistencyError(f"default network has {net.n_params} parameters, expected {REFERENCE_PARAM_COUNT}")
    net.init(make_rng(seed, 0))
    return net


# --- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-3
    patience: int = 15
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is required")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch size and patience must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    best_val_loss: float


def _check_training_data(dataset: GestureDataset, spec: GestureNetSpec) -> None:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if dataset.frames.shape[1:] != (spec.frames, spec.features):
        raise DataError(f"samples are {dataset.frames.shape[1:]}, network expects ({spec.frames}, {spec.features})")
    if dataset.labels.max() >= spec.classes:
        raise DataError(f"label {dataset.labels.max()} outside 0..{spec.classes - 1}")
    if len(np.unique(dataset.labels)) < 2:
        raise DataError("training needs at least two classes")


def train_gesture_classifier(
    dataset: GestureDataset,
    spec: GestureNetSpec | None = None,
    config: TrainConfig | None = None,
) -> tuple[GestureNet, list[EpochRecord]]:
    """Minibatch Adam on mean cross-entropy with early stopping.

    A stratified slice of ``config.validation_fraction`` is held out for early
    stopping; the weights from the best validation epoch are returned. When
    some class has a single sample the split is impossible and the training
    loss is monitored instead.
    """
    spec = spec or GestureNetSpec()
    config = config or TrainConfig()
    _check_training_data(dataset, spec)

    net = build_gessure_net(spec, config.seed)
    counts = np.bincount(dataset.labels)
    if counts[counts > 0].min() >= 2:
        tr_idx, va_idx = split_indices(dataset.labels, config.validation_fraction, config.seed)
    else:
        tr_idx, va_idx = np.arange(len(dataset)), np.array([], dtype=np.int64)
    x_tr, y_tr = dataset.frames[tr_idx], dataset.labels[tr_idx]
    x_va, y_va = dataset.frames[va_idx], dataset.labels[va_idx]

    rng = make_rng(config.seed, 2)
    state = OptimizerState(lr=config.learning_rate)
    params = net.parameters()
    best = [p.copy() for p in params]
    best_loss = np.inf
    wait = 0
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(y_tr))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = net.loss_and_grads(x_tr[batch], y_tr[batch], train=True, rng=rng)
            adam_step(params, grads, state)
            total += loss * len(batch)
        train_loss = total / len(y_tr)
        if len(y_va):
            val_loss = net.loss(net.predict_proba(x_va), y_va)
        else:
            val_loss = net.loss(net.predict_proba(x_tr), y_tr)
        if val_loss < best_loss:
            best_loss = val_loss
            best = [p.copy() for p in params]
            wait = 0
        else:
            wait += 1
        history.append(EpochRecord(epoch, train_loss, val_loss, best_loss))
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if wait >= config.patience:
            break
    for p, b in zip(params, best):
        p[...] = b
    return net, history


# --- inference ------------------------------------------------------------------

def classify_gesture(net: GestureNet, sample) -> np.ndarray:
    """Class probabilities for one 20x63 sample (inference mode)."""
    frames = sample.frames if isinstance(sample, GestureSample) else np.asarray(sample, dtype=np.float64)
    expected = (net.spec.frames, net.spec.features)
    if frames.shape != expected:
        raise ShapeError(f"sample shape {frames.shape}, expected {expected}")
    return net.predict_proba(frames[None])[0]


def predict(net: GestureNet, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [net.predict_proba(frames[i:i + batch_size]) for i in range(0, len(frames), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.spec.classes))


# --- metrics --------------------------------------------------------------------

def round_half_even(value: float, digits: int = 3) -> float:
    return float(Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_EVEN))


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros(len(num)), where=~undefined)
    return out, undefined


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: tuple[float, float, float]
    weighted: tuple[float, float, float]
    undefined: list[int] = field(default_factory=list)
    class_names: tuple[str, ...] | None = None

    @property
    def total(self) -> int:
        return int(self.support.sum())

    def to_dict(self, digits: int | None = 3) -> dict:
        def r(v):
            return float(v) if digits is None else round_half_even(v, digits)

        rows = {
            str(c): {
                "precision": r(self.precision[c]),
                "recall": r(self.recall[c]),
                "f1-score": r(self.f1[c]),
                "support": int(self.support[c]),
            }
            for c in range(len(self.support))
        }
        avg = lambda t: {"precision": r(t[0]), "recall": r(t[1]), "f1-score": r(t[2]), "support": self.total}
        return {
            "classes": rows,
            "accuracy": r(self.accuracy),
            "macro avg": avg(self.macro),
            "weighted avg": avg(self.weighted),
            "support": self.total,
            "confusion_matrix": self.confusion.astype(int).tolist(),
            "zero_division": list(self.undefined),
            "class_names": list(self.class_names) if self.class_names else None,
        }

    def format_table(self, digits: int = 3) -> str:
        r = lambda v: f"{round_half_even(v, digits):.{digits}f}"
        lines = [f"{'':>12} {'precision':>9} {'recall':>9} {'f1-score':>9} {'support':>9}"]
        for c in range(len(self.support)):
            lines.append(f"{c:>12} {r(self.precision[c]):>9} {r(self.recall[c]):>9} {r(self.f1[c]):>9} {int(self.support[c]):>9}")
        lines.append(f"{'accuracy':>12} {'':>9} {'':>9} {r(self.accuracy):>9} {self.total:>9}")
        for name, t in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(f"{name:>12} {r(t[0]):>9} {r(t[1]):>9} {r(t[2]):>9} {self.total:>9}")
        return "\n".join(lines)


def metrics_from_confusion(matrix, class_names=None) -> MetricsReport:
    """Per-class and averaged metrics; rows are true classes, columns predictions.

    A class with no predicted (or no true) samples gets precision (or recall)
    0 and is listed in ``undefined``.
    """
    cm = np.asarray(matrix)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any() or not np.array_equal(cm, np.round(cm)):
        raise DataError("confusion matrix must hold non-negative integers")
    cm = cm.astype(np.int64)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    precision, p_undef = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    recall, r_undef = _safe_div(tp, support.astype(np.float64))
    f1, _ = _safe_div(2 * precision * recall, precision + recall)
    total = support.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    w = support / total
    return MetricsReport(
        confusion=cm,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        accuracy=float(tp.sum() / total),
        macro=(float(precision.mean()), float(recall.mean()), float(f1.mean())),
        weighted=(float(w @ precision), float(w @ recall), float(w @ f1)),
        undefined=sorted(set(np.flatnonzero(p_undef | r_undef).tolist())),
        class_names=tuple(class_names) if class_names is not None else None,
    )


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def evaluate(net: GestureNet, dataset: GestureDataset, shards: int = 1) -> MetricsReport:
    """Confusion of true label vs argmax prediction, summed over ``shards`` chunks."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    n = net.spec.classes
    cm = np.zeros((n, n), dtype=np.int64)
    for idx in np.array_split(np.arange(len(dataset)), max(1, min(shards, len(dataset)))):
        pred = predict(net, dataset.frames[idx]).argmax(axis=1)
        cm += confusion_matrix(dataset.labels[idx], pred, n)
    return metrics_from_confusion(cm, dataset.class_names if len(dataset.class_names) == n else None)


# --- model files --------------------------------------------------------------------

def model_to_bytes(net: GestureNet) -> bytes:
    """``GSRM`` | u16 version | u32 spec length | spec JSON | u64 count | f32 LE weights."""
    spec_json = json.dumps(net.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    weights = np.concatenate([p.ravel() for p in net.parameters()]).astype("<f4")
    return b"".join([
        MODEL_MAGIC,
        struct.pack("<HI", MODEL_VERSION, len(spec_json)),
        spec_json,
        struct.pack("<Q", weights.size),
        weights.tobytes(),
    ])


def model_from_bytes(data: bytes) -> GestureNet:
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", "magic")
    if len(data) < 10:
        raise FormatError("truncated header", "header")
    version, spec_len = struct.unpack("<HI", data[4:10])
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", "version")
    pos = 10 + spec_len
    try:
        spec = GestureNetSpec.from_dict(json.loads(data[10:pos].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable network spec ({exc})", "spec") from None
    if len(data) < pos + 8:
        raise FormatError("truncated header", "param_count")
    (count,) = struct.unpack("<Q", data[pos:pos + 8])
    net = GestureNet(spec)
    if count != net.n_params:
        raise FormatError(f"file declares {count} parameters, spec realizes {net.n_params}", "param_count")
    payload = data[pos + 8:]
    if len(payload) != 4 * count:
        raise FormatError(f"{len(payload)} weight bytes for {count} parameters", "weights")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    offset = 0
    for p in net.parameters():
        p[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return net


def save_model(net: GestureNet, path) -> None:
    Path(path).write_bytes(model_to_bytes(net))


def load_model(path) -> GestureNet:
    return model_from_bytes(Path(path).read_bytes())


def describe_model(net: GestureNet) -> str:
    lines = [f"{'layer':<28} {'params':>8}"]
    for name, n in net.summary():
        lines.append(f"{name:<28} {n:>8}")
    lines.append(f"parameters: {net.n_params}")
    return "\n".join(lines)
