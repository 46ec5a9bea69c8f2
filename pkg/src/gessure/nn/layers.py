"""Layer kernels with hand-written backward passes.

All layers take batched time-major input of shape ``(N, T, C)`` (the LSTM
consumes that and the dense layer takes ``(N, H)``) and compute in float64.
Each layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding forward raises :class:`UsageError`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gessure.errors import ConfigError, NumericError, ShapeError, UsageError


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], gain: float = 3.0) -> np.ndarray:
    # gain 3 keeps unit variance through linear maps, 6 through ReLU
    limit = np.sqrt(gain / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(x: np.ndarray, ndim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d batch, got shape {x.shape}")
    return x


class Layer:
    """Base class: named parameter arrays plus matching gradient arrays."""

    name = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache: dict | None = None

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def init(self, rng: np.random.Generator) -> None:
        pass

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self) -> dict:
        if self._cache is None:
            raise UsageError(f"{self.name}: backward called without a forward pass")
        return self._cache

    def describe(self) -> str:
        return self.name


class Conv1D(Layer):
    """Temporal convolution with same padding and optional ReLU.

    ``kernel`` has shape ``(K, Cin, Cout)``; output timestep ``t`` sees input
    steps ``t - K//2 .. t + K//2`` with zeros outside the sequence.
    """

    name = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, relu: bool = True) -> None:
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"kernel width must be odd and positive, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.relu = relu
        self.params = {
            "kernel": np.zeros((kernel_size, in_channels, out_channels)),
            "bias": np.zeros(out_channels),
        }
        self.zero_grad()

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.kernel_size * self.in_channels
        self.params["kernel"] = _uniform(rng, fan_in, self.params["kernel"].shape, gain=6.0 if self.relu else 3.0)
        self.params["bias"] = np.zeros(self.out_channels)

    def forward(self, x, train=False, rng=None):
        x = _as_batch(x, 3)
        n, t, c = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv1d expects {self.in_channels} channels, got {c}")
        k = self.kernel_size
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        # (N, T, Cin, K) -> (N, T, K*Cin) with kernel-major ordering
        cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2).reshape(n, t, k * c)
        w = self.params["kernel"].reshape(k * c, self.out_channels)
        pre = cols @ w + self.params["bias"]
        out = np.maximum(pre, 0.0) if self.relu else pre
        self._cache = {"cols": cols, "pre": pre, "shape": x.shape}
        return out

    def backward(self, dout):
        cache = self._need_cache()
        n, t, c = cache["shape"]
        k = self.kernel_size
        pad = k // 2
        dpre = dout * (cache["pre"] > 0) if self.relu else dout
        cols = cache["cols"]
        cout = self.out_channels
        self.grads["kernel"] = (cols.reshape(-1, k * c).T @ dpre.reshape(-1, cout)).reshape(k, c, cout)
        self.grads["bias"] = dpre.sum(axis=(0, 1))
        dcols = (dpre @ self.params["kernel"].reshape(k * c, cout).T).reshape(n, t, k, c)
        dxp = np.zeros((n, t + 2 * pad, c))
        for j in range(k):
            dxp[:, j:j + t] += dcols[:, :, j, :]
        return dxp[:, pad:pad + t]

    def describe(self):
        act = ", relu" if self.relu else ""
        return f"Conv1D({self.out_channels}, k={self.kernel_size}{act})"


class MaxPool1D(Layer):
    """Non-overlapping temporal max pool; trailing steps that do not fill a window are dropped."""

    name = "maxpool1d"

    def __init__(self, pool: int = 2) -> None:
        super().__init__()
        if pool < 1:
            raise ConfigError(f"pool size must be >= 1, got {pool}")
        self.pool = pool

    def forward(self, x, train=False, rng=None):
        x = _as_batch(x, 3)
        n, t, c = x.shape
        if t < self.pool:
            raise ShapeError(f"sequence length {t} shorter than pool {self.pool}")
        tp = t // self.pool
        windows = x[:, :tp * self.pool].reshape(n, tp, self.pool, c)
        idx = windows.argmax(axis=2)[:, :, None, :]
        out = np.take_along_axis(windows, idx, axis=2)[:, :, 0, :]
        self._cache = {"idx": idx, "shape": x.shape}
        return out

    def backward(self, dout):
        cache = self._need_cache()
        n, t, c = cache["shape"]
        tp = t // self.pool
        dwin = np.zeros((n, tp, self.pool, c))
        np.put_along_axis(dwin, cache["idx"], dout[:, :, None, :], axis=2)
        dx = np.zeros((n, t, c))
        dx[:, :tp * self.pool] = dwin.reshape(n, tp * self.pool, c)
        return dx

    def describe(self):
        return f"MaxPool1D({self.pool})"


class Dropout(Layer):
    """Inverted dropout: identity at inference, scaled Bernoulli mask in training."""

    name = "dropout"

    def __init__(self, rate: float = 0.25) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if not train or self.rate == 0.0:
            self._cache = {"mask": None}
            return x
        if rng is None:
            raise UsageError("dropout in train mode needs a seeded generator")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = {"mask": mask}
        return x * mask

    def backward(self, dout):
        mask = self._need_cache()["mask"]
        return dout if mask is None else dout * mask

    def describe(self):
        return f"Dropout({self.rate:g})"


class TimeDistributed(Layer):
    """Per-timestep pass-through between the conv stack and the LSTM (no parameters)."""

    name = "time_distributed"

    def forward(self, x, train=False, rng=None):
        self._cache = {}
        return _as_batch(x, 3)

    def backward(self, dout):
        self._need_cache()
        return dout

    def describe(self):
        return "TimeDistributed(identity)"


class LSTM(Layer):
    """Single LSTM layer with sigmoid gates and ReLU candidate/output activations.

    ``kernel`` is ``(D + H, 4H)`` acting on ``[x_t, h_{t-1}]``; the four column
    blocks are the input, forget, candidate and output gates in that order.
    """

    name = "lstm"

    def __init__(self, input_dim: int, units: int, return_sequences: bool = False) -> None:
        super().__init__()
        self.input_dim = input_dim
        self.units = units
        self.return_sequences = return_sequences
        self.params = {
            "kernel": np.zeros((input_dim + units, 4 * units)),
            "bias": np.zeros(4 * units),
        }
        self.zero_grad()

    def init(self, rng):
        d, h = self.input_dim, self.units
        self.params["kernel"] = _uniform(rng, d + h, (d + h, 4 * h))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        self.params["bias"] = bias

    def forward(self, x, train=False, rng=None):
        x = _as_batch(x, 3)
        n, t, d = x.shape
        if d != self.input_dim:
            raise ShapeError(f"lstm expects input dim {self.input_dim}, got {d}")
        hdim = self.units
        w, b = self.params["kernel"], self.params["bias"]
        h = np.zeros((n, hdim))
        c = np.zeros((n, hdim))
        steps = []
        hs = np.empty((n, t, hdim))
        for s in range(t):
            xh = np.concatenate([x[:, s], h], axis=1)
            z = xh @ w + b
            i = _sigmoid(z[:, :hdim])
            f = _sigmoid(z[:, hdim:2 * hdim])
            gpre = z[:, 2 * hdim:3 * hdim]
            g = np.maximum(gpre, 0.0)
            o = _sigmoid(z[:, 3 * hdim:])
            c_prev = c
            c = f * c_prev + i * g
            rc = np.maximum(c, 0.0)
            h = o * rc
            hs[:, s] = h
            steps.append((xh, i, f, gpre, g, o, c_prev, c, rc))
        self._cache = {"steps": steps, "shape": x.shape}
        return hs if self.return_sequences else h

    def backward(self, dout):
        cache = self._need_cache()
        n, t, d = cache["shape"]
        hdim = self.units
        w = self.params["kernel"]
        dw = np.zeros_like(w)
        db = np.zeros(4 * hdim)
        dx = np.zeros((n, t, d))
        dh_next = np.zeros((n, hdim)) if self.return_sequences else dout
        dc_next = np.zeros((n, hdim))
        for s in reversed(range(t)):
            xh, i, f, gpre, g, o, c_prev, c, rc = cache["steps"][s]
            dh = dh_next + dout[:, s] if self.return_sequences else dh_next
            do = dh * rc
            dc = dh * o * (c > 0) + dc_next
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (gpre > 0),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dw += xh.T @ dz
            db += dz.sum(axis=0)
            dxh = dz @ w.T
            dx[:, s] = dxh[:, :d]
            dh_next = dxh[:, d:]
            dc_next = dc * f
        self.grads["kernel"] = dw
        self.grads["bias"] = db
        return dx

    def describe(self):
        return f"LSTM({self.units}, relu)"


class Dense(Layer):
    """Affine map ``(N, H) -> (N, classes)`` producing logits."""

    name = "dense"

    def __init__(self, in_features: int, out_features: int) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "kernel": np.zeros((in_features, out_features)),
            "bias": np.zeros(out_features),
        }
        self.zero_grad()

    def init(self, rng):
        self.params["kernel"] = _uniform(rng, self.in_features, self.params["kernel"].shape)
        self.params["bias"] = np.zeros(self.out_features)

    def forward(self, x, train=False, rng=None):
        x = _as_batch(x, 2)
        if x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} features, got {x.shape[1]}")
        self._cache = {"x": x}
        return x @ self.params["kernel"] + self.params["bias"]

    def backward(self, dout):
        x = self._need_cache()["x"]
        self.grads["kernel"] = x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["kernel"].T

    def describe(self):
        return f"Dense({self.out_features}, softmax)"


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
