"""Central finite-difference check of :meth:`Network.backward`."""

from __future__ import annotations

import numpy as np

from gessure.errors import UsageError
from gessure.nn.network import Network


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradient_check(
    network: Network,
    x,
    labels,
    eps: float = 1e-5,
    mode: str = "infer",
    analytic: list[np.ndarray] | None = None,
) -> float:
    """Return the max relative error between analytic and numeric gradients.

    Every parameter entry is perturbed, so keep the network small. Dropout
    masks would differ between perturbed passes, hence only ``mode="infer"``
    is accepted. ``analytic`` overrides the backward-pass gradients, which is
    how a corrupted gradient is fed in as a negative control.
    """
    if mode != "infer":
        raise UsageError("gradient check requires inference mode (dropout disabled)")
    x = np.asarray(x, dtype=np.float64)
    if analytic is None:
        _, grads = network.loss_and_grads(x, labels)
        analytic = [g.copy() for g in grads]

    worst = 0.0
    for p, g in zip(network.parameters(), analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = network.loss(network.forward(x), labels)
            flat[j] = orig - eps
            down = network.loss(network.forward(x), labels)
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(gflat[j]), numeric))
    return worst


def toy_network(seed: int, frames: int = 8, channels: int = 4, filters: int = 2, units: int = 8, classes: int = 3):
    """Small network with every layer type plus a matching random batch.

    Weights are fan-in scaled normals and biases small normals, so no ReLU
    pre-activation sits on its kink. The candidate-gate bias is shifted up
    by one to keep the LSTM's ReLU candidate path active; otherwise many
    gradients shrink below the ~1e-11 roundoff of a central difference and
    the relative error is dominated by noise rather than by the backward pass.
    """
    from gessure.nn.layers import LSTM, Conv1D, Dense, Dropout, MaxPool1D, TimeDistributed
    from gessure.rng import make_rng

    net = Network([
        Conv1D(channels, filters, 3),
        MaxPool1D(2),
        Dropout(0.25),
        Conv1D(filters, filters, 3),
        MaxPool1D(2),
        Dropout(0.25),
        TimeDistributed(),
        LSTM(filters, units),
        Dropout(0.25),
        Dense(units, classes),
    ])
    rng = make_rng(seed)
    for layer in net.layers:
        for p in layer.params.values():
            if p.ndim == 1:
                p[...] = rng.normal(0.0, 0.3, size=p.shape)
            else:
                fan_in = int(np.prod(p.shape[:-1]))
                p[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=p.shape)
        if isinstance(layer, LSTM):
            layer.params["bias"][2 * units:3 * units] += 1.0
    x = rng.normal(size=(2, frames, channels))
    labels = rng.integers(0, classes, size=2)
    return net, x, labels
