"""Gesture and embedding datasets: containers, file formats, generators, splits."""

from __future__ import annotations

import ast
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gessure.errors import ConfigError, DataError, FormatError, ParseError, ShapeError
from gessure.rng import make_rng

FRAMES = 20
LANDMARKS = 21
FEATURES = LANDMARKS * 3

ARCHETYPES = ("swipe_left", "swipe_right", "swipe_up", "swipe_down", "circle", "random_jitter")
DEFAULT_CLASS_NAMES = ARCHETYPES

NPY_MAGIC = b"\x93NUMPY"


@dataclass(frozen=True)
class GestureSample:
    frames: np.ndarray  # (20, 63): 21 landmarks x (x, y, z) per frame
    label: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        _check_frames(frames[None])
        object.__setattr__(self, "frames", frames)


def _check_frames(frames: np.ndarray) -> None:
    if frames.ndim != 3 or frames.shape[1:] != (FRAMES, FEATURES):
        raise ShapeError(f"gesture frames must be (n, {FRAMES}, {FEATURES}), got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise DataError("gesture frames contain non-finite values")


@dataclass
class GestureDataset:
    """``frames`` is ``(n, 20, 63)`` float64, ``labels`` is ``(n,)`` int."""

    frames: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.size == 0:
            self.frames = self.frames.reshape(0, FRAMES, FEATURES)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_names = tuple(self.class_names)
        _check_frames(self.frames)
        if len(self.labels) != len(self.frames):
            raise ShapeError(f"{len(self.frames)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in 0..{len(self.class_names) - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def samples(self) -> list[GestureSample]:
        return [GestureSample(f, int(y)) for f, y in zip(self.frames, self.labels)]

    def subset(self, indices) -> "GestureDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return GestureDataset(self.frames[indices], self.labels[indices], self.class_names)

    @classmethod
    def from_samples(cls, samples, class_names=DEFAULT_CLASS_NAMES) -> "GestureDataset":
        samples = list(samples)
        frames = np.stack([s.frames for s in samples]) if samples else np.zeros((0, FRAMES, FEATURES))
        return cls(frames, [s.label for s in samples], class_names)

    def concat(self, other: "GestureDataset") -> "GestureDataset":
        if other.class_names != self.class_names:
            raise DataError("cannot concatenate datasets with different class tables")
        return GestureDataset(
            np.concatenate([self.frames, other.frames]),
            np.concatenate([self.labels, other.labels]),
            self.class_names,
        )


@dataclass
class EmbeddingDataset:
    """Face embeddings (``(n, d)``) with one identity tag per row."""

    vectors: np.ndarray
    identities: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.identities = [str(i) for i in self.identities]
        if self.vectors.ndim != 2 or len(self.identities) != len(self.vectors):
            raise ShapeError("embeddings must be (n, d) with one identity per row")

    def __len__(self) -> int:
        return len(self.identities)

    @property
    def identity_set(self) -> list[str]:
        return sorted(set(self.identities))

    def labels(self, order: list[str] | None = None) -> np.ndarray:
        order = order or self.identity_set
        index = {name: i for i, name in enumerate(order)}
        return np.array([index[i] for i in self.identities], dtype=np.int64)

    def subset(self, indices) -> "EmbeddingDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(self.vectors[indices], [self.identities[i] for i in indices])


# --- gesture JSONL ----------------------------------------------------------

def load_gesture_jsonl(path, class_names=DEFAULT_CLASS_NAMES) -> GestureDataset:
    """Read ``{"label": int, "frames": [[63 numbers] x 20]}`` records, one per line.

    Blank lines are skipped. Any invalid record aborts the whole load.
    """
    frames, labels = [], []
    n_classes = len(class_names)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(record, dict) or "label" not in record or "frames" not in record:
                raise ParseError("record needs 'label' and 'frames'", lineno)
            label = record["label"]
            if not isinstance(label, int) or isinstance(label, bool):
                raise ParseError(f"label must be an integer, got {label!r}", lineno)
            if not 0 <= label < n_classes:
                raise ParseError(f"unknown label {label} (expected 0..{n_classes - 1})", lineno)
            rows = record["frames"]
            if not isinstance(rows, list) or len(rows) != FRAMES:
                raise ParseError(f"expected {FRAMES} frames", lineno)
            for j, row in enumerate(rows):
                if not isinstance(row, list) or len(row) != FEATURES:
                    got = len(row) if isinstance(row, list) else type(row).__name__
                    raise ParseError(f"frame {j} has {got} values, expected {FEATURES}", lineno)
            try:
                arr = np.array(rows, dtype=np.float64)
            except (TypeError, ValueError):
                raise ParseError("frames must contain only numbers", lineno) from None
            if not np.all(np.isfinite(arr)):
                raise ParseError("non-finite coordinate", lineno)
            frames.append(arr)
            labels.append(label)
    if not frames:
        return GestureDataset(np.zeros((0, FRAMES, FEATURES)), [], class_names)
    return GestureDataset(np.stack(frames), labels, class_names)


def save_gesture_jsonl(dataset: GestureDataset, path) -> None:
    # repr-based float output round-trips float64 (and therefore float32) exactly
    with open(path, "w", encoding="utf-8") as fh:
        for f, y in zip(dataset.frames, dataset.labels):
            fh.write(json.dumps({"label": int(y), "frames": f.tolist()}, separators=(",", ":")))
            fh.write("\n")


# --- NPY v1.0 ---------------------------------------------------------------

def read_npy(path) -> np.ndarray:
    """Parse an NPY v1.0 file holding little-endian float32/float64 C-order data."""
    data = Path(path).read_bytes()
    if data[:6] != NPY_MAGIC:
        raise FormatError(f"bad magic {data[:6]!r}", "magic")
    if len(data) < 10:
        raise FormatError("truncated header", "header_len")
    major, minor = data[6], data[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"unsupported format version {major}.{minor}", "version")
    (header_len,) = struct.unpack("<H", data[8:10])
    start = 10 + header_len
    if len(data) < start:
        raise FormatError("header runs past end of file", "header_len")
    try:
        header = ast.literal_eval(data[10:start].decode("latin1"))
    except (SyntaxError, ValueError):
        raise FormatError("header is not a Python literal", "header") from None
    if not isinstance(header, dict):
        raise FormatError("header is not a dict", "header")
    for key in ("descr", "fortran_order", "shape"):
        if key not in header:
            raise FormatError("missing", key)
    descr = header["descr"]
    if descr not in ("<f4", "<f8"):
        raise FormatError(f"unsupported dtype {descr!r} (need '<f4' or '<f8')", "descr")
    if header["fortran_order"] is not False:
        raise FormatError("Fortran-ordered arrays are not supported", "fortran_order")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"invalid shape {shape!r}", "shape")
    dtype = np.dtype(descr)
    count = math.prod(shape)
    payload = data[start:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{len(payload)} data bytes for shape {shape}", "shape")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(shape).copy()


def write_npy(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in (np.float32, np.float64):
        raise FormatError(f"cannot write dtype {array.dtype}", "descr")
    array = array.astype(array.dtype.newbyteorder("<"), copy=False)
    header = f"{{'descr': '{array.dtype.str}', 'fortran_order': False, 'shape': {tuple(array.shape)!r}, }}"
    # pad so magic + version + length + header is a multiple of 64, newline-terminated
    pad = -(10 + len(header) + 1) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC + b"\x01\x00")
        fh.write(struct.pack("<H", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(array.tobytes())


def import_npy(path, label: int, class_names=DEFAULT_CLASS_NAMES) -> GestureDataset:
    arr = read_npy(path)
    if arr.shape == (FRAMES, FEATURES):
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (FRAMES, FEATURES):
        raise FormatError(f"expected (n, {FRAMES}, {FEATURES}) or ({FRAMES}, {FEATURES}), got {arr.shape}", "shape")
    if not 0 <= label < len(class_names):
        raise DataError(f"label {label} outside class table")
    return GestureDataset(arr.astype(np.float64), np.full(len(arr), label), class_names)


def export_npy(dataset: GestureDataset, path, dtype=np.float32) -> None:
    write_npy(path, dataset.frames.astype(dtype))


# --- synthetic data ---------------------------------------------------------

def hand_template() -> np.ndarray:
    """Rigid 21-point open hand centred on the origin, as ``(21, 3)`` offsets.

    Point order follows the usual landmark convention: wrist, then four
    joints per finger from thumb to pinky.
    """
    pts = [(0.0, 0.0)]
    bases = [(-0.030, -0.020), (-0.015, -0.045), (0.000, -0.050), (0.015, -0.047), (0.030, -0.040)]
    angles = np.deg2rad([-50.0, -15.0, 0.0, 12.0, 25.0])
    lengths = [0.020, 0.025, 0.027, 0.025, 0.020]
    for (bx, by), a, seg in zip(bases, angles, lengths):
        for j in range(4):
            pts.append((bx + np.sin(a) * seg * j, by - np.cos(a) * seg * j))
    xy = np.array(pts)
    xy -= xy.mean(axis=0)
    z = np.concatenate([[0.0], np.tile(-0.01 * np.arange(1, 5), 5)])
    return np.column_stack([xy, z])


def trajectory(archetype: str, rng: np.random.Generator, frames: int = FRAMES) -> np.ndarray:
    """Hand-centre path ``(frames, 2)`` in normalized image coordinates."""
    s = np.linspace(0.0, 1.0, frames)
    lo, hi = 0.25, 0.75
    mid = np.full(frames, 0.5)
    if archetype == "swipe_left":
        return np.column_stack([hi - (hi - lo) * s, mid])
    if archetype == "swipe_right":
        return np.column_stack([lo + (hi - lo) * s, mid])
    if archetype == "swipe_up":
        return np.column_stack([mid, hi - (hi - lo) * s])
    if archetype == "swipe_down":
        return np.column_stack([mid, lo + (hi - lo) * s])
    if archetype == "circle":
        theta = 2.0 * np.pi * s
        return np.column_stack([0.5 + 0.2 * np.cos(theta), 0.5 + 0.2 * np.sin(theta)])
    if archetype == "random_jitter":
        # no coherent path: each frame lands somewhere in the central region
        return rng.uniform(0.3, 0.7, size=(frames, 2))
    raise ConfigError(f"unknown gesture archetype {archetype!r}")


@dataclass(frozen=True)
class SynthGestureSpec:
    classes: tuple[str, ...] = ARCHETYPES
    samples_per_class: int = 20
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError("need at least two gesture classes")
        if self.noise < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        for name in self.classes:
            if name not in ARCHETYPES:
                raise ConfigError(f"unknown gesture archetype {name!r}")


def synth_gestures(spec: SynthGestureSpec) -> GestureDataset:
    """Translate the hand template along each class's path and add Gaussian noise.

    x and y are clamped to [0, 1]; z is left unbounded.
    """
    rng = make_rng(spec.seed)
    template = hand_template()
    frames, labels = [], []
    for label, archetype in enumerate(spec.classes):
        for _ in range(spec.samples_per_class):
            centre = trajectory(archetype, rng)
            pts = np.repeat(template[None], FRAMES, axis=0)
            pts[:, :, :2] += centre[:, None, :]
            if spec.noise > 0:
                pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
            pts[:, :, :2] = np.clip(pts[:, :, :2], 0.0, 1.0)
            frames.append(pts.reshape(FRAMES, FEATURES))
            labels.append(label)
    return GestureDataset(np.stack(frames), labels, spec.classes)


def synth_embeddings(identities, per_identity: int, sigma: float, seed: int, dim: int = 128) -> EmbeddingDataset:
    """Unit-norm embeddings clustered around one random unit mean per identity.

    ``identities`` is either a list of names or a count (names ``id0``, ``id1``...).
    """
    if isinstance(identities, int):
        identities = [f"id{i}" for i in range(identities)]
    identities = list(identities)
    if len(identities) < 2:
        raise ConfigError("need at least two identities")
    if per_identity < 1:
        raise ConfigError("per-identity count must be >= 1")
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    rng = make_rng(seed)
    vectors, tags = [], []
    for name in identities:
        mean = rng.normal(size=dim)
        mean /= np.linalg.norm(mean)
        pts = mean + sigma * rng.normal(size=(per_identity, dim))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        vectors.append(pts)
        tags.extend([name] * per_identity)
    return EmbeddingDataset(np.vstack(vectors), tags)


# --- splitting --------------------------------------------------------------

def split_indices(labels, test_fraction: float, seed: int, stratified: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Partition ``range(len(labels))`` into sorted (train, test) index arrays."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = make_rng(seed)
    if not stratified:
        order = rng.permutation(len(labels))
        n_test = int(math.floor(len(labels) * test_fraction + 0.5))
        return np.sort(order[n_test:]), np.sort(order[:n_test])
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise DataError(f"class {cls} has {len(idx)} sample(s); stratified split needs >= 2")
        idx = idx[rng.permutation(len(idx))]
        n_test = min(max(int(math.floor(len(idx) * test_fraction + 0.5)), 1), len(idx) - 1)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split(dataset, test_fraction: float, seed: int, stratified: bool = True):
    """Split a gesture or embedding dataset into ``(train, test)``."""
    labels = dataset.labels() if isinstance(dataset, EmbeddingDataset) else dataset.labels
    tr, te = split_indices(labels, test_fraction, seed, stratified)
    return dataset.subset(tr), dataset.subset(te)
