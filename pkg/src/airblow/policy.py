"""Scoring models, MSE training step, Adam, replay buffers and epsilon-greedy selection."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, Dense, Flatten, Model, ReLU, Sequential, Sigmoid, Upsample2x


def image_input(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 HxWx3 (or a batch NxHxWx3) to zero-centred NCHW floats."""
    x = np.asarray(pixels)
    if x.ndim == 3:
        x = x[None]
    return (x.transpose(0, 3, 1, 2).astype(dtype) / 255.0) - 0.5


class MLPModel(Model):
    """Plain stack of dense layers; used for small experiments and gradient tests."""

    def __init__(self, sizes=(2, 8, 1), out_sigmoid: bool = False, dtype=np.float32, seed: int = 0):
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(Dense(a, b))
            if i < len(sizes) - 2:
                layers.append(ReLU())
        if out_sigmoid:
            layers.append(Sigmoid())
        self.sizes, self.out_sigmoid = tuple(sizes), out_sigmoid
        self.net = Sequential(*layers)
        super().__init__([self.net], dtype, seed)

    def config(self):
        return {"sizes": list(self.sizes), "out_sigmoid": self.out_sigmoid}

    def predict(self, batch):
        x = np.stack([np.asarray(t.obs, dtype=self.dtype) for t in batch])
        return self.net.forward(x)[:, 0]

    def backward_predictions(self, dpred):
        self.net.backward(dpred[:, None].astype(self.dtype))


class GraspValueModel(Model):
    """Encoder-decoder mapping a 3xHxW image to a 1xHxW coverage map in [0, 1].

    Four stride-2 convolutions down, four upsample+conv blocks up, with
    additive skips at matching resolutions. H and W must be multiples of 16.
    """

    def __init__(self, widths=(8, 16, 16, 16), dtype=np.float32, seed: int = 0):
        if len(widths) != 4:
            raise ValueError("grasp net needs four encoder widths")
        w0, w1, w2, w3 = widths
        self.widths = tuple(int(w) for w in widths)
        self.enc = [Sequential(Conv2d(3, w0, 3, 2), ReLU()),
                    Sequential(Conv2d(w0, w1, 3, 2), ReLU()),
                    Sequential(Conv2d(w1, w2, 3, 2), ReLU()),
                    Sequential(Conv2d(w2, w3, 3, 2), ReLU())]
        self.dec = [Sequential(Upsample2x(), Conv2d(w3, w2), ReLU()),
                    Sequential(Upsample2x(), Conv2d(w2, w1), ReLU()),
                    Sequential(Upsample2x(), Conv2d(w1, w0), ReLU()),
                    Sequential(Upsample2x(), Conv2d(w0, w0), ReLU())]
        self.head = Sequential(Conv2d(w0, 1, 1), Sigmoid())
        super().__init__(self.enc + self.dec + [self.head], dtype, seed)

    def config(self):
        return {"widths": list(self.widths)}

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(N, 3, H, W) -> (N, H, W)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ValueError("grasp net input sides must be multiples of 16")
        x = x.astype(self.dtype, copy=False)
        e1 = self.enc[0].forward(x)
        e2 = self.enc[1].forward(e1)
        e3 = self.enc[2].forward(e2)
        e4 = self.enc[3].forward(e3)
        d = self.dec[0].forward(e4) + e3
        d = self.dec[1].forward(d) + e2
        d = self.dec[2].forward(d) + e1
        d = self.dec[3].forward(d)
        return self.head.forward(d)[:, 0]

    def backward(self, dout: np.ndarray) -> None:
        dd = self.head.backward(dout[:, None].astype(self.dtype))
        dd = self.dec[3].backward(dd)
        de1 = dd
        dd = self.dec[2].backward(dd)
        de2 = dd
        dd = self.dec[1].backward(dd)
        de3 = dd
        de4 = self.dec[0].backward(dd)
        de3 = de3 + self.enc[3].backward(de4)
        de2 = de2 + self.enc[2].backward(de3)
        de1 = de1 + self.enc[1].backward(de2)
        self.enc[0].backward(de1)

    # transitions: obs = rotated image (HxWx3 uint8), action = (rotation, row, col)
    def predict(self, batch):
        x = image_input(np.stack([t.obs for t in batch]), self.dtype)
        out = self.forward(x)
        self._picked = np.array([[i, t.action[1], t.action[2]] for i, t in enumerate(batch)], dtype=np.int64)
        self._out_shape = out.shape
        return out[self._picked[:, 0], self._picked[:, 1], self._picked[:, 2]]

    def backward_predictions(self, dpred):
        dout = np.zeros(self._out_shape, dtype=self.dtype)
        dout[self._picked[:, 0], self._picked[:, 1], self._picked[:, 2]] = dpred
        self.backward(dout)


class BlowScoreModel(Model):
    """Seven-conv image encoder, three-layer action MLP, three-layer fusion head."""

    def __init__(self, channels=(8, 8, 16, 16, 16, 32, 32), strides=(2, 1, 2, 1, 2, 1, 2),
                 resolution: int = 64, action_hidden: int = 32, fusion_hidden: int = 64,
                 dtype=np.float32, seed: int = 0):
        if len(channels) != 7 or len(strides) != 7:
            raise ValueError("blow image encoder has exactly seven convolutions")
        down = int(np.prod(strides))
        if resolution % down:
            raise ValueError(f"resolution {resolution} not divisible by total stride {down}")
        self.channels, self.strides = tuple(int(c) for c in channels), tuple(int(s) for s in strides)
        self.resolution, self.action_hidden, self.fusion_hidden = resolution, action_hidden, fusion_hidden
        convs, c_in = [], 3
        for c, s in zip(self.channels, self.strides):
            convs += [Conv2d(c_in, c, 3, s), ReLU()]
            c_in = c
        self.image_net = Sequential(*convs, Flatten())
        n_img = c_in * (resolution // down) ** 2
        h = action_hidden
        self.action_net = Sequential(Dense(2, h), ReLU(), Dense(h, h), ReLU(), Dense(h, h), ReLU())
        f = fusion_hidden
        self.fusion_net = Sequential(Dense(n_img + h, f), ReLU(), Dense(f, f // 2 or 1), ReLU(),
                                     Dense(f // 2 or 1, 1), Sigmoid())
        self.n_img = n_img
        super().__init__([self.image_net, self.action_net, self.fusion_net], dtype, seed)

    def config(self):
        return {"channels": list(self.channels), "strides": list(self.strides), "resolution": self.resolution,
                "action_hidden": self.action_hidden, "fusion_hidden": self.fusion_hidden}

    def forward(self, images: np.ndarray, actions: np.ndarray, image_index=None) -> np.ndarray:
        """Score ``actions`` (K, 2, normalised) against ``images`` (N, 3, H, W).

        ``image_index`` (K,) picks the image for each action; by default
        action k uses image k.
        """
        images = images.astype(self.dtype, copy=False)
        actions = np.asarray(actions, dtype=self.dtype).reshape(-1, 2)
        if images.shape[2] != self.resolution or images.shape[3] != self.resolution:
            raise ValueError(f"blow net built for {self.resolution}px input, got {images.shape[2:]}")
        idx = np.arange(len(actions)) if image_index is None else np.asarray(image_index, dtype=np.int64)
        feat = self.image_net.forward(images)
        self._idx, self._n_images = idx, len(images)
        a = self.action_net.forward(actions)
        z = np.concatenate([feat[idx], a], axis=1)
        return self.fusion_net.forward(z)[:, 0]

    def backward(self, dscore: np.ndarray) -> None:
        dz = self.fusion_net.backward(dscore[:, None].astype(self.dtype))
        dfeat_k, da = dz[:, :self.n_img], dz[:, self.n_img:]
        self.action_net.backward(da)
        dfeat = np.zeros((self._n_images, self.n_img), dtype=self.dtype)
        np.add.at(dfeat, self._idx, dfeat_k)
        self.image_net.backward(dfeat)

    # transitions: obs = held-cloth image (HxWx3 uint8), action = BlowAction
    def predict(self, batch):
        x = image_input(np.stack([t.obs for t in batch]), self.dtype)
        acts = np.stack([t.action.normalized() for t in batch])
        return self.forward(x, acts)

    def backward_predictions(self, dpred):
        self.backward(dpred)


@dataclass
class Transition:
    obs: np.ndarray
    action: object
    label: float


def mse_backward(model: Model, batch) -> tuple[float, np.ndarray]:
    """Mean squared error between predicted scores and labels, and its gradient.

    The gradient is returned as a copy of the model's flat gradient vector.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    pred = model.predict(batch)
    labels = np.array([t.label for t in batch], dtype=model.dtype)
    diff = pred - labels
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    model.backward_predictions(2.0 * diff / len(batch))
    return loss, model.grads.copy()


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6

    @classmethod
    def for_params(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """In-place Adam update with decoupled weight decay; returns ``params``."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    if state.weight_decay:
        params -= state.lr * state.weight_decay * params
    params -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
    return params


class ReplayBuffer:
    """Bounded FIFO store; sampling is uniform with replacement."""

    def __init__(self, capacity: int = 30000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, item) -> None:
        self._items.append(item)

    def extend(self, items) -> None:
        for it in items:
            self.push(it)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def contents(self) -> list:
        return list(self._items)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        if not self._items:
            raise IndexError("cannot sample from an empty replay buffer")
        idx = rng.integers(len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


def select_epsilon_greedy(scores, epsilon: float, rng: np.random.Generator, valid=None) -> int:
    """Argmax (lowest index on ties) with probability 1 - epsilon, else a uniform pick.

    ``valid`` optionally restricts both branches to a boolean subset. One
    uniform draw is always consumed so rng streams stay aligned.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no scores to select from")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    ok = np.ones(s.size, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    if not ok.any():
        ok = np.ones(s.size, dtype=bool)
    explore = rng.random() < epsilon
    if explore:
        cand = np.flatnonzero(ok)
        return int(cand[rng.integers(len(cand))])
    return int(np.argmax(np.where(ok, s, -np.inf)))


def epsilon_schedule(epoch: int, total_epochs: int, start: float = 0.5, end: float = 0.05,
                     decay_fraction: float = 0.5) -> float:
    """Linear decay from ``start`` to ``end`` over the first ``decay_fraction`` of training."""
    span = max(1.0, decay_fraction * total_epochs)
    frac = min(1.0, epoch / span)
    return start + (end - start) * frac
