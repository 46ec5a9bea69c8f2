"""Embedding-space user verification.

Face detection and deep feature extraction happen upstream; this module
starts from 128-d embedding vectors. It provides hypersphere normalization,
triplet loss with semi-hard negative mining, a trainable linear projection
head, the softmax identity classifier and the authorization gate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gessure.dataset import EmbeddingDataset
from gessure.errors import ConfigError, DataError, NumericError, ParseError, PreconditionError
from gessure.nn import Dense, Network, OptimizerState, adam_step, softmax
from gessure.rng import make_rng

EMBEDDING_DIM = 128
DEFAULT_MARGIN = 0.2
AUTH_THRESHOLD = 0.90
MIN_USER_EMBEDDINGS = 20
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class FaceEmbedding:
    vector: np.ndarray
    identity: str | None = None


def normalize_embedding(v, identity: str | None = None) -> FaceEmbedding:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise NumericError("cannot normalize a zero or non-finite vector")
    return FaceEmbedding(v / norm, identity)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
        raise NumericError("cannot normalize a zero or non-finite vector")
    return x / norms


def _unit(e, what: str) -> np.ndarray:
    v = np.asarray(e.vector if isinstance(e, FaceEmbedding) else e, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise PreconditionError(f"{what} is not unit-norm")
    return v


def squared_distances(x: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, computed exactly (no Gram trick)."""
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def triplet_loss(anchor, positive, negative, margin: float = DEFAULT_MARGIN) -> float:
    """``max(|a-p|^2 - |a-n|^2 + margin, 0)`` for unit-norm inputs."""
    a = _unit(anchor, "anchor")
    p = _unit(positive, "positive")
    n = _unit(negative, "negative")
    return max(float(np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + margin), 0.0)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def select_negative(d_ap: float, d_an, margin: float = DEFAULT_MARGIN) -> int:
    """Pick a negative among candidate squared distances ``d_an``.

    Semi-hard candidates satisfy ``d_ap < d_an < d_ap + margin``; the closest
    of those wins. With an empty band the overall closest (hardest) negative
    is used. Ties go to the lowest index.
    """
    d_an = np.asarray(d_an, dtype=np.float64)
    if d_an.size == 0:
        raise DataError("no negative candidates")
    band = (d_an > d_ap) & (d_an < d_ap + margin)
    if band.any():
        return int(np.flatnonzero(band)[np.argmin(d_an[band])])
    return int(np.argmin(d_an))


def mine_triplets(vectors, labels, margin: float = DEFAULT_MARGIN) -> list[Triplet]:
    """One triplet per ordered (anchor, positive) pair of same-identity rows."""
    return [Triplet(int(a), int(p), int(n)) for a, p, n in zip(*mine_triplet_indices(vectors, labels, margin))]


def mine_triplet_indices(vectors, labels, margin: float = DEFAULT_MARGIN):
    """Array form of :func:`mine_triplets`: ``(anchors, positives, negatives)``."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("triplet mining needs at least two identities")
    _, counts = np.unique(labels, return_counts=True)
    if counts.max() < 2:
        raise DataError("no identity has two samples to form an anchor-positive pair")
    d = squared_distances(x)
    same = labels[:, None] == labels[None, :]
    anchors, positives = np.nonzero(same & ~np.eye(len(x), dtype=bool))
    d_ap = d[anchors, positives][:, None]
    d_an = d[anchors]
    neg = ~same[anchors]
    band = neg & (d_an > d_ap) & (d_an < d_ap + margin)
    # argmin returns the first minimum, matching select_negative's tie rule
    in_band = np.where(band, d_an, np.inf).argmin(axis=1)
    hardest = np.where(neg, d_an, np.inf).argmin(axis=1)
    return anchors, positives, np.where(band.any(axis=1), in_band, hardest)


def mean_triplet_loss(vectors, labels, margin: float = DEFAULT_MARGIN) -> float:
    """Mean hinge loss over every valid (anchor, positive, negative) triplet."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    d = squared_distances(x)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(x), dtype=bool)
    neg = ~same
    losses = np.maximum(d[:, :, None] - d[:, None, :] + margin, 0.0)
    mask = pos[:, :, None] & neg[:, None, :]
    if not mask.any():
        raise DataError("no valid triplets")
    return float(losses[mask].mean())


# --- projection head ---------------------------------------------------------

class ProjectionHead:
    """Affine map to ``out_dim`` followed by renormalization onto the unit sphere."""

    def __init__(self, in_dim: int, out_dim: int = EMBEDDING_DIM) -> None:
        self.dense = Dense(in_dim, out_dim)
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.dense.in_features

    @property
    def out_dim(self) -> int:
        return self.dense.out_features

    def parameters(self) -> list[np.ndarray]:
        return [self.dense.params["kernel"], self.dense.params["bias"]]

    def forward(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = self.dense.forward(x)
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(norm == 0.0):
            raise NumericError("projection collapsed to zero")
        e = z / norm
        self._cache = (e, norm)
        return e

    def loss_and_grads(self, x, triplets, margin: float) -> tuple[float, list[np.ndarray]]:
        """Mean triplet loss over ``triplets`` and its gradient w.r.t. the head.

        ``triplets`` is a list of :class:`Triplet` or an ``(a, p, n)`` index triple.
        """
        e = self.forward(x)
        if isinstance(triplets, tuple):
            a, p, n = (np.asarray(t) for t in triplets)
        else:
            a = np.array([t.anchor for t in triplets])
            p = np.array([t.positive for t in triplets])
            n = np.array([t.negative for t in triplets])
        d_ap = np.sum((e[a] - e[p]) ** 2, axis=1)
        d_an = np.sum((e[a] - e[n]) ** 2, axis=1)
        raw = d_ap - d_an + margin
        active = (raw > 0).astype(np.float64)[:, None] / len(a)
        de = np.zeros_like(e)
        np.add.at(de, a, 2.0 * (e[n] - e[p]) * active)
        np.add.at(de, p, 2.0 * (e[p] - e[a]) * active)
        np.add.at(de, n, 2.0 * (e[a] - e[n]) * active)
        e, norm = self._cache
        dz = (de - e * np.sum(e * de, axis=1, keepdims=True)) / norm
        self.dense.backward(dz)
        return float(np.maximum(raw, 0.0).mean()), [self.dense.grads["kernel"], self.dense.grads["bias"]]

    def to_dict(self) -> dict:
        return {"kernel": self.dense.params["kernel"].tolist(), "bias": self.dense.params["bias"].tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectionHead":
        kernel = np.asarray(data["kernel"], dtype=np.float64)
        head = cls(*kernel.shape)
        head.dense.params["kernel"] = kernel
        head.dense.params["bias"] = np.asarray(data["bias"], dtype=np.float64)
        return head


@dataclass(frozen=True)
class HeadConfig:
    epochs: int = 200
    learning_rate: float = 1e-2
    out_dim: int = EMBEDDING_DIM
    seed: int = 0


def train_projection_head(
    features: EmbeddingDataset,
    margin: float = DEFAULT_MARGIN,
    config: HeadConfig | None = None,
) -> tuple[ProjectionHead, list[float]]:
    """Full-batch Adam on mined-triplet loss; triplets are re-mined every epoch.

    Returns the head and the per-epoch mean mined-triplet loss.
    """
    config = config or HeadConfig()
    if len(features.identity_set) < 2:
        raise DataError("projection head training needs at least two identities")
    x = features.vectors
    labels = features.labels()
    head = ProjectionHead(x.shape[1], config.out_dim)
    head.dense.init(make_rng(config.seed, 3))
    state = OptimizerState(lr=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        triplets = mine_triplet_indices(head.forward(x), labels, margin)
        loss, grads = head.loss_and_grads(x, triplets, margin)
        history.append(loss)
        adam_step(head.parameters(), grads, state)
    return head, history


# --- identity classifier and gate ---------------------------------------------------

@dataclass
class VerifierModel:
    """Softmax classifier over identity classes, one of which is the user."""

    classes: list[str]
    user_index: int
    kernel: np.ndarray
    bias: np.ndarray
    head: ProjectionHead | None = None
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not 0 <= self.user_index < len(self.classes) or len(set(self.classes)) != len(self.classes):
            raise ConfigError("verifier needs distinct class names and exactly one user class")
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def user(self) -> str:
        return self.classes[self.user_index]

    def embed(self, vectors) -> np.ndarray:
        x = normalize_rows(np.atleast_2d(vectors))
        return self.head.forward(x) if self.head is not None else x

    def probabilities(self, vectors) -> np.ndarray:
        e = self.embed(vectors)
        return softmax(e @ self.kernel + self.bias)

    def user_probabilities(self, vectors) -> np.ndarray:
        if len(vectors) == 0:
            return np.zeros(0)
        return self.probabilities(vectors)[:, self.user_index]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "user_index": self.user_index,
            "kernel": self.kernel.tolist(),
            "bias": self.bias.tolist(),
            "head": self.head.to_dict() if self.head is not None else None,
            "margin": self.margin,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VerifierModel":
        head = ProjectionHead.from_dict(data["head"]) if data.get("head") else None
        return cls(data["classes"], data["user_index"], data["kernel"], data["bias"], head, data.get("margin", DEFAULT_MARGIN))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VerifierModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class VerifierConfig:
    epochs: int = 400
    learning_rate: float = 0.05
    seed: int = 0
    binary_stray: bool = False


def train_verifier(
    enrollment: EmbeddingDataset,
    user: str,
    config: VerifierConfig | None = None,
    head: ProjectionHead | None = None,
) -> VerifierModel:
    """Fit the identity classifier on enrollment embeddings.

    Class 0 is the user; the stray identities follow in sorted order, or
    collapse into a single ``"stray"`` class when ``binary_stray`` is set.
    """
    config = config or VerifierConfig()
    n_user = enrollment.identities.count(user)
    if n_user < MIN_USER_EMBEDDINGS:
        raise DataError(f"need at least {MIN_USER_EMBEDDINGS} embeddings of the user, got {n_user}")
    strays = sorted(set(enrollment.identities) - {user})
    if not strays:
        raise ConfigError("enrollment has no stray identities; the gate cannot be calibrated against impostors")
    if config.binary_stray:
        classes = [user, "stray"] if user != "stray" else [user, "stray_"]
        labels = np.array([0 if i == user else 1 for i in enrollment.identities])
    else:
        classes = [user, *strays]
        labels = np.array([classes.index(i) for i in enrollment.identities])

    x = normalize_rows(enrollment.vectors)
    if head is not None:
        x = head.forward(x)
    net = Network([Dense(x.shape[1], len(classes))])
    net.init(make_rng(config.seed, 4))
    state = OptimizerState(lr=config.learning_rate)
    params = net.parameters()
    for _ in range(config.epochs):
        _, grads = net.loss_and_grads(x, labels)
        adam_step(params, grads, state)
    return VerifierModel(classes, 0, params[0].copy(), params[1].copy(), head)


@dataclass(frozen=True)
class GateDecision:
    authorized: bool
    confidence: float
    faces: tuple[tuple[str, float], ...] = field(default=())


def gate(user_probs, threshold: float = AUTH_THRESHOLD) -> bool:
    """Authorized iff some face's user probability strictly exceeds ``threshold``."""
    return any(p > threshold for p in user_probs)


def verify_frame(model: VerifierModel, faces, threshold: float = AUTH_THRESHOLD) -> GateDecision:
    """Classify every face in a frame; the user anywhere among them authorizes."""
    faces = [f.vector if isinstance(f, FaceEmbedding) else np.asarray(f, dtype=np.float64) for f in faces]
    if not faces:
        return GateDecision(False, 0.0, ())
    probs = model.probabilities(np.stack(faces))
    user_p = probs[:, model.user_index]
    per_face = tuple((model.classes[int(k)], float(u)) for k, u in zip(probs.argmax(axis=1), user_p))
    return GateDecision(gate(user_p, threshold), float(user_p.max()), per_face)


# --- embedding files -----------------------------------------------------------

def load_embeddings_jsonl(path, dim: int = EMBEDDING_DIM) -> EmbeddingDataset:
    """Read ``{"identity": str, "vector": [128 numbers]}`` lines; vectors are normalized."""
    vectors, identities = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(record, dict) or not isinstance(record.get("identity"), str):
                raise ParseError("record needs a string 'identity'", lineno)
            vec = record.get("vector")
            if not isinstance(vec, list) or len(vec) != dim:
                got = len(vec) if isinstance(vec, list) else "no"
                raise ParseError(f"vector has {got} values, expected {dim}", lineno)
            try:
                emb = normalize_embedding(np.array(vec, dtype=np.float64))
            except (TypeError, ValueError):
                raise ParseError("vector must contain only numbers", lineno) from None
            except NumericError as exc:
                raise ParseError(str(exc), lineno) from None
            vectors.append(emb.vector)
            identities.append(record["identity"])
    return EmbeddingDataset(np.array(vectors).reshape(-1, dim), identities)


def save_embeddings_jsonl(dataset: EmbeddingDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in zip(dataset.identities, dataset.vectors):
            fh.write(json.dumps({"identity": name, "vector": vec.tolist()}, separators=(",", ":")))
            fh.write("\n")
