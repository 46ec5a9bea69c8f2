"""Single-sample functional forms of the layer kernels.

These take an unbatched ``(T, C)`` sequence and explicit parameter arrays;
they build a throwaway layer, so they are convenient for inspection and tests
rather than for training loops.
"""

from __future__ import annotations

import numpy as np

from gessure.errors import NumericError, ShapeError
from gessure.nn.layers import LSTM, Conv1D, Dense, Dropout, MaxPool1D, softmax

PROB_FLOOR = 1e-12


def _seq(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"expected (T, C) sequence, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("sequence contains non-finite values")
    return x


def conv1d_forward(x, kernel, bias, relu: bool = True) -> np.ndarray:
    x = _seq(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    k, cin, cout = kernel.shape
    layer = Conv1D(cin, cout, k, relu=relu)
    layer.params["kernel"] = kernel
    layer.params["bias"] = np.asarray(bias, dtype=np.float64).reshape(cout)
    return layer.forward(x[None])[0]


def maxpool1d_forward(x, pool: int) -> np.ndarray:
    return MaxPool1D(pool).forward(_seq(x)[None])[0]


def dropout_apply(x, rate: float, mode: str = "infer", rng: np.random.Generator | None = None) -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    return Dropout(rate).forward(x, train=mode == "train", rng=rng)


def lstm_forward(x, kernel, bias) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(hidden_sequence, final_hidden)`` for one sequence."""
    x = _seq(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    units = kernel.shape[1] // 4
    layer = LSTM(kernel.shape[0] - units, units, return_sequences=True)
    if kernel.shape != layer.params["kernel"].shape:
        raise ShapeError(f"lstm kernel shape {kernel.shape} inconsistent with input dim {x.shape[1]}")
    layer.params["kernel"] = kernel
    layer.params["bias"] = np.asarray(bias, dtype=np.float64).reshape(4 * units)
    hs = layer.forward(x[None])[0]
    return hs, hs[-1]


def dense_softmax_forward(h, kernel, bias) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    layer = Dense(*kernel.shape)
    layer.params["kernel"] = kernel
    layer.params["bias"] = np.asarray(bias, dtype=np.float64)
    return softmax(layer.forward(np.asarray(h, dtype=np.float64)[None]))[0]


def cross_entropy(probs, label: int) -> float:
    """``-ln p[label]`` with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], PROB_FLOOR)))
