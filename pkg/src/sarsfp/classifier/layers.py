"""Minimal NHWC layers with hand-written backward passes.

Each layer exposes ``forward(x) -> (out, cache)`` without mutating itself
and ``backward(cache, dout) -> (dx, grads)`` where ``grads`` lines up with
``params``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    params: list[np.ndarray] = []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dout):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class Dense(Layer):
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.params = [w, b]

    def forward(self, x):
        w, b = self.params
        return x @ w + b, x

    def backward(self, x, dout):
        w, _ = self.params
        return dout @ w.T, [x.T @ dout, dout.sum(axis=0)]

    def output_shape(self, shape):
        return (self.params[0].shape[1],)


class Conv2D(Layer):
    """Stride-1 'same' convolution; weight shape (C, k, k, F)."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.params = [w, b]
        self.k = w.shape[1]
        self.pad = self.k // 2

    def _cols(self, x):
        p, k = self.pad, self.k
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
        n, h, w_, c = x.shape
        return win.reshape(n * h * w_, c * k * k)

    def forward(self, x):
        w, b = self.params
        n, h, w_, _ = x.shape
        cols = self._cols(x)
        out = cols @ w.reshape(-1, w.shape[-1]) + b
        return out.reshape(n, h, w_, -1), (x.shape, cols)

    def backward(self, cache, dout):
        (n, h, w_, c), cols = cache
        w, _ = self.params
        k, p = self.k, self.pad
        dmat = dout.reshape(-1, dout.shape[-1])
        dw = (cols.T @ dmat).reshape(w.shape)
        db = dmat.sum(axis=0)
        dcols = (dmat @ w.reshape(-1, w.shape[-1]).T).reshape(n, h, w_, c, k, k)
        dxp = np.zeros((n, h + 2 * p, w_ + 2 * p, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w_, :] += dcols[..., i, j]
        return dxp[:, p:p + h, p:p + w_, :], [dw, db]

    def output_shape(self, shape):
        return shape[:2] + (self.params[0].shape[-1],)


class ReLU(Layer):
    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, mask, dout):
        return dout * mask, []


class MaxPool2(Layer):
    """2x2 max pooling; ties route the gradient to the first maximum."""

    def forward(self, x):
        n, h, w, c = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, dout):
        (n, h, w, c), idx = cache
        blocks = np.zeros((n, h // 2, w // 2, c, 4))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        dx = blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return dx, []

    def output_shape(self, shape):
        return (shape[0] // 2, shape[1] // 2, shape[2])


class AvgPool(Layer):
    """Non-overlapping ``f x f`` average pooling (input downsampling)."""

    def __init__(self, factor: int):
        self.factor = int(factor)

    def forward(self, x):
        f = self.factor
        if f == 1:
            return x, None
        n, h, w, c = x.shape
        return x.reshape(n, h // f, f, w // f, f, c).mean(axis=(2, 4)), None

    def backward(self, cache, dout):
        f = self.factor
        if f == 1:
            return dout, []
        dx = np.repeat(np.repeat(dout, f, axis=1), f, axis=2) / (f * f)
        return dx, []

    def output_shape(self, shape):
        return (shape[0] // self.factor, shape[1] // self.factor, shape[2])


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, dout):
        return dout.reshape(shape), []

    def output_shape(self, shape):
        return (int(np.prod(shape)),)
