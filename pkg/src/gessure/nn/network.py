"""Sequential network ending in a softmax classifier head."""

from __future__ import annotations

import numpy as np

from gessure.errors import DataError, ShapeError, UsageError
from gessure.nn.functional import PROB_FLOOR
from gessure.nn.layers import Dropout, Layer, softmax


class Network:
    """Layers applied in order; the last layer emits logits.

    ``forward`` returns class probabilities. ``backward`` uses the cached
    probabilities of the latest forward pass and the mean cross-entropy loss.
    """

    def __init__(self, layers: list[Layer]) -> None:
        self.layers = list(layers)
        self._probs: np.ndarray | None = None

    def init(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init(rng)
            layer.zero_grad()

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in layer order (the serialization order)."""
        return [p for layer in self.layers for p in layer.params.values()]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{i}.{layer.name}.{key}", p)
            for i, layer in enumerate(self.layers)
            for key, p in layer.params.items()
        ]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[key] for layer in self.layers for key in layer.params]

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise DataError("input contains non-finite values")
        self._probs = None
        for layer in self.layers:
            out = layer.forward(out, train=train, rng=rng)
        self._probs = softmax(out)
        return self._probs

    def predict_proba(self, x) -> np.ndarray:
        return self.forward(x, train=False)

    def loss(self, probs: np.ndarray, labels) -> float:
        labels = np.asarray(labels, dtype=np.int64)
        picked = probs[np.arange(len(labels)), labels]
        return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())

    def backward(self, labels) -> list[np.ndarray]:
        """Gradients of mean cross-entropy w.r.t. every parameter (layer order)."""
        if self._probs is None:
            raise UsageError("backward called without a forward pass")
        probs = self._probs
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (probs.shape[0],):
            raise ShapeError(f"{labels.shape} labels for a batch of {probs.shape[0]}")
        if labels.min() < 0 or labels.max() >= probs.shape[1]:
            raise IndexError("label out of range")
        dout = probs.copy()
        dout[np.arange(len(labels)), labels] -= 1.0
        dout /= len(labels)
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return self.gradients()

    def loss_and_grads(self, x, labels, train: bool = False, rng=None) -> tuple[float, list[np.ndarray]]:
        probs = self.forward(x, train=train, rng=rng)
        return self.loss(probs, labels), self.backward(labels)

    def has_dropout(self) -> bool:
        return any(isinstance(layer, Dropout) and layer.rate > 0 for layer in self.layers)

    def summary(self) -> list[tuple[str, int]]:
        return [(layer.describe(), layer.n_params) for layer in self.layers]
