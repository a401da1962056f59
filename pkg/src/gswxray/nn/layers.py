"""Layer kinds with explicit forward and backward passes (channels-last, float64)."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.frozen = False

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x, training, ctx):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, dy, cache, need_dx=True):
        """Return ``(dx, grads)``; ``dx`` is None when ``need_dx`` is false."""
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding.

    ``W`` has shape ``(out, in, 3, 3)``; activations are channels-last.
    """

    kind = "conv3x3"
    param_names = ("W", "b")

    def __init__(self, name, in_channels, out_channels):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.params = {
            "W": np.zeros((out_channels, in_channels, 3, 3)),
            "b": np.zeros(out_channels),
        }

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        return (h, w, self.out_channels)

    def _wmat(self):
        # rows ordered (ki, kj, c) to match the patch layout below
        return self.params["W"].transpose(2, 3, 1, 0).reshape(9 * self.in_channels, self.out_channels)

    def forward(self, x, training, ctx):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((n, h, w, 9, c))
        for k in range(9):
            ki, kj = divmod(k, 3)
            cols[:, :, :, k, :] = xp[:, ki : ki + h, kj : kj + w, :]
        cols = cols.reshape(n * h * w, 9 * c)
        y = cols @ self._wmat() + self.params["b"]
        return y.reshape(n, h, w, self.out_channels), (cols, x.shape)

    def backward(self, dy, cache, need_dx=True):
        cols, (n, h, w, c) = cache
        dyr = dy.reshape(n * h * w, self.out_channels)
        dw = (cols.T @ dyr).reshape(3, 3, c, self.out_channels).transpose(3, 2, 0, 1)
        grads = {"W": np.ascontiguousarray(dw), "b": dyr.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (dyr @ self._wmat().T).reshape(n, h, w, 9, c)
        dxp = np.zeros((n, h + 2, w + 2, c))
        for k in range(9):
            ki, kj = divmod(k, 3)
            dxp[:, ki : ki + h, kj : kj + w, :] += dcols[:, :, :, k, :]
        return dxp[:, 1:-1, 1:-1, :], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True):
        return (dy * cache if need_dx else None), {}


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: spatial size {h}x{w} not divisible by 2")
        return (h // 2, w // 2, c)

    def forward(self, x, training, ctx):
        return maxpool2x2(x)

    def backward(self, dy, cache, need_dx=True):
        if not need_dx:
            return None, {}
        first, shape = cache
        n, h, w, c = shape
        d = first * dy[:, :, None, :, None, :]
        return d.reshape(shape), {}


def maxpool2x2(x):
    """2x2/stride-2 max pool over ``(N, H, W, C)``.

    Returns ``(y, cache)``; on ties the gradient goes to the first maximum
    in row-major window order.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial size, got {h}x{w}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c)
    y = blocks.max(axis=(2, 4))
    hit = blocks == y[:, :, None, :, None, :]
    first = np.zeros(blocks.shape, dtype=bool)
    taken = np.zeros(y.shape, dtype=bool)
    for a in range(2):
        for b in range(2):
            cur = hit[:, :, a, :, b, :] & ~taken
            first[:, :, a, :, b, :] = cur
            taken |= cur
    return y, (first, x.shape)


class GlobalAveragePool(Layer):
    kind = "global_average_pool"

    def output_shape(self, in_shape):
        return (in_shape[2],)

    def forward(self, x, training, ctx):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, cache, need_dx=True):
        if not need_dx:
            return None, {}
        n, h, w, c = cache
        return np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy(), {}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    kind = "dropout"

    def __init__(self, name, rate=0.5):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def config(self):
        return {"rate": self.rate}

    def forward(self, x, training, ctx):
        if not training or self.rate == 0.0:
            return x, None
        fixed = ctx.get("dropout_masks", {}).get(self.name)
        if fixed is not None:
            mask = fixed
        else:
            keep = ctx["rng"].random(x.shape) >= self.rate
            mask = keep / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True):
        if not need_dx:
            return None, {}
        return (dy if cache is None else dy * cache), {}


class Dense(Layer):
    kind = "dense"
    param_names = ("W", "b")

    def __init__(self, name, in_features, out_features):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"W": np.zeros((in_features, out_features)), "b": np.zeros(out_features)}

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"{self.name}: expected input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, training, ctx):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, cache, need_dx=True):
        grads = {"W": cache.T @ dy, "b": dy.sum(axis=0)}
        return (dy @ self.params["W"].T if need_dx else None), grads


class Sigmoid(Layer):
    """Single-logit binary head; emits ``[1 - p, p]`` so it shares the softmax interface."""

    kind = "sigmoid"

    def output_shape(self, in_shape):
        if in_shape != (1,):
            raise ShapeError(f"{self.name}: sigmoid head needs exactly one logit, got {in_shape}")
        return (2,)

    def forward(self, x, training, ctx):
        z = x[:, 0]
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        return np.stack([1.0 - p, p], axis=1), None


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training, ctx):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True), None


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv3x3, ReLU, MaxPool2x2, GlobalAveragePool, Dropout, Dense, Sigmoid, Softmax)
}


def make_layer(kind: str, name: str, **config) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(name, **config)
