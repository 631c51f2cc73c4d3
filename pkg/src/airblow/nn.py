"""Small numpy network toolkit with explicit forward and backward passes.

Every layer keeps its parameters as views into one flat vector owned by the
model, so optimisers and checkpoints only ever see a single 1-D array.
Tensors are NCHW for images and NF for vectors.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    """Base class. ``shapes`` lists parameter shapes in flat-vector order."""

    shapes: tuple = ()

    def bind(self, params: np.ndarray, grads: np.ndarray) -> None:
        self.p, self.g = [], []
        off = 0
        for shp in self.shapes:
            n = int(np.prod(shp))
            self.p.append(params[off:off + n].reshape(shp))
            self.g.append(grads[off:off + n].reshape(shp))
            off += n

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))

    def init(self, rng: np.random.Generator) -> None:
        pass

    def describe(self) -> dict:
        return {"type": type(self).__name__, "shapes": [list(s) for s in self.shapes]}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.shapes = ((n_in, n_out), (n_out,))

    def init(self, rng):
        bound = math.sqrt(6.0 / self.n_in)
        self.p[0][...] = rng.uniform(-bound, bound, size=self.shapes[0])
        self.p[1][...] = rng.uniform(-1.0, 1.0, size=self.shapes[1]) / math.sqrt(self.n_in)

    def forward(self, x):
        self.x = x
        return x @ self.p[0] + self.p[1]

    def backward(self, dy):
        self.g[0] += self.x.T @ dy
        self.g[1] += dy.sum(axis=0)
        return dy @ self.p[0].T


class Conv2d(Layer):
    """Square-kernel convolution with zero padding ``k // 2``."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.pad = k // 2
        self.shapes = ((c_out, c_in, k, k), (c_out,))

    def init(self, rng):
        fan_in = self.c_in * self.k * self.k
        bound = math.sqrt(6.0 / fan_in)
        self.p[0][...] = rng.uniform(-bound, bound, size=self.shapes[0])
        self.p[1][...] = rng.uniform(-1.0, 1.0, size=self.shapes[1]) / math.sqrt(fan_in)

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {c}")
        p, k, s = self.pad, self.k, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]  # n c oh ow k k
        self.in_shape = x.shape
        self.oh, self.ow = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * self.oh * self.ow, c * k * k)
        self.cols = cols
        wmat = self.p[0].reshape(self.c_out, -1)
        out = cols @ wmat.T + self.p[1]
        return out.reshape(n, self.oh, self.ow, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, dy):
        n, c, h, w = self.in_shape
        k, s, p = self.k, self.stride, self.pad
        dmat = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.g[0] += (dmat.T @ self.cols).reshape(self.shapes[0])
        self.g[1] += dmat.sum(axis=0)
        dcols = (dmat @ self.p[0].reshape(self.c_out, -1)).reshape(n, self.oh, self.ow, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * self.oh:s, j:j + s * self.ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    def forward(self, x):
        self.on = x > 0
        return x * self.on

    def backward(self, dy):
        return dy * self.on


class Sigmoid(Layer):
    def forward(self, x):
        self.y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.y

    def backward(self, dy):
        return dy * self.y * (1.0 - self.y)


class Upsample2x(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Flatten(Layer):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self.shape)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)
        self.shapes = tuple(s for l in self.layers for s in l.shapes)

    def bind(self, params, grads):
        off = 0
        for l in self.layers:
            l.bind(params[off:off + l.size], grads[off:off + l.size])
            off += l.size

    def init(self, rng):
        for l in self.layers:
            l.init(rng)

    def forward(self, x):
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy

    def describe(self):
        return {"type": "Sequential", "layers": [l.describe() for l in self.layers]}


class Model:
    """Owns the flat parameter and gradient vectors of a set of sub-layers."""

    def __init__(self, parts: list, dtype=np.float32, seed: int = 0):
        self.parts = parts
        self.dtype = np.dtype(dtype)
        n = sum(p.size for p in parts)
        self.params = np.zeros(n, dtype=self.dtype)
        self.grads = np.zeros(n, dtype=self.dtype)
        self._bind()
        rng = np.random.default_rng(seed)
        for p in parts:
            p.init(rng)

    def _bind(self):
        off = 0
        for p in self.parts:
            p.bind(self.params[off:off + p.size], self.grads[off:off + p.size])
            off += p.size

    @property
    def n_params(self) -> int:
        return self.params.size

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def set_params(self, flat) -> None:
        flat = np.asarray(flat)
        if flat.shape != self.params.shape:
            raise ValueError(f"parameter vector shape {flat.shape} != {self.params.shape}")
        self.params[...] = flat

    def architecture(self) -> dict:
        return {"class": type(self).__name__, "config": self.config(),
                "parts": [p.describe() for p in self.parts]}

    def config(self) -> dict:
        return {}
