"""Small numpy network engine with hand-written backpropagation.

Activations flow through the convolutional trunk in NHWC layout; the public
entry points take NCHW tensors and transpose once. All parameters of a network
live in one flat float64 vector, and each layer reads its weights through
views into that vector, so optimizers and gradient checks work on plain arrays.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from weldmon.errors import ShapeMismatch

VARIANTS = ("hybrid", "cnn", "dwt")


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1, weights stored as (3, 3, in, out).

    Computed as nine shifted matrix products, which avoids materializing an
    im2col buffer. The first layer of a trunk skips its input gradient.
    """

    def __init__(self, in_ch: int, out_ch: int, needs_dx: bool = True):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.needs_dx = needs_dx
        self.shapes = [(3, 3, in_ch, out_ch), (out_ch,)]

    def init(self, rng, views):
        limit = np.sqrt(6.0 / (self.in_ch * 9))
        views[0][...] = rng.uniform(-limit, limit, size=self.shapes[0])
        views[1][...] = 0.0

    def forward(self, x, params):
        w, b = params
        n, h, wd, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.empty((n, h, wd, self.out_ch))
        out[...] = b
        for i in range(3):
            for j in range(3):
                out += xp[:, i:i + h, j:j + wd, :] @ w[i, j]
        return out, xp

    def backward(self, dout, xp, params):
        w, _ = params
        n, h, wd, _ = dout.shape
        dflat = dout.reshape(-1, self.out_ch)
        dw = np.empty_like(w)
        for i in range(3):
            for j in range(3):
                dw[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, self.in_ch).T @ dflat
        db = dflat.sum(axis=0)
        if not self.needs_dx:
            return None, [dw, db]
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + h, j:j + wd, :] += dout @ w[i, j].T
        return dxp[:, 1:-1, 1:-1, :], [dw, db]


class ReLU:
    shapes: list = []

    def init(self, rng, views):
        pass

    def forward(self, x, params):
        out = np.maximum(x, 0.0)
        return out, out

    def backward(self, dout, out, params):
        return dout * (out > 0), []


class MaxPool2:
    """2x2 max pooling; ties route the gradient to the first index.

    The four corners of each window are strided views, visited in row-major
    order, so "first index" means the earliest corner attaining the max.
    """

    shapes: list = []

    def init(self, rng, views):
        pass

    @staticmethod
    def _corners(x):
        return [x[:, di::2, dj::2, :] for di in (0, 1) for dj in (0, 1)]

    def forward(self, x, params):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"max pooling needs even spatial dims, got {h}x{w}")
        corners = self._corners(x)
        out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for corner in corners[:3]:
            m = corner == out
            m &= ~taken
            taken |= m
            masks.append(m)
        masks.append(~taken)
        return out, (x.shape, masks)

    def backward(self, dout, cache, params):
        shape, masks = cache
        dx = np.empty(shape)
        for view, m in zip(self._corners(dx), masks):
            np.multiply(dout, m, out=view)
        return dx, []


class Dense:
    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.shapes = [(n_in, n_out), (n_out,)]

    def init(self, rng, views):
        limit = np.sqrt(6.0 / (self.n_in + self.n_out))
        views[0][...] = rng.uniform(-limit, limit, size=self.shapes[0])
        views[1][...] = 0.0

    def forward(self, x, params):
        w, b = params
        return x @ w + b, x

    def backward(self, dout, x, params):
        w, _ = params
        return dout @ w.T, [x.T @ dout, dout.sum(axis=0)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class NetworkSpec:
    """Topology of one classifier.

    ``fc_layers`` lists every fully connected width including the output
    layer, so its last entry is the number of classes.
    """

    variant: str = "hybrid"
    input_shape: tuple = (2, 64, 64)
    conv_channels: tuple = (8, 16, 32, 64)
    fc_layers: tuple = (128, 64, 4)
    handcrafted_dim: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "dwt":
            if self.conv_channels:
                raise ValueError("dwt variant has no convolution blocks")
            if self.handcrafted_dim < 1:
                raise ValueError("dwt variant needs handcrafted features")
        elif not self.conv_channels:
            raise ValueError(f"{self.variant} variant needs convolution blocks")
        if self.variant == "cnn" and self.handcrafted_dim:
            raise ValueError("cnn variant takes no handcrafted features")
        if not self.fc_layers:
            raise ValueError("fc_layers must end with the class count")

    @property
    def n_classes(self) -> int:
        return self.fc_layers[-1]

    @property
    def flatten_dim(self) -> int:
        if not self.conv_channels:
            return 0
        _, h, w = self.input_shape
        k = 2 ** len(self.conv_channels)
        return self.conv_channels[-1] * (h // k) * (w // k)

    @property
    def head_input_dim(self) -> int:
        return self.flatten_dim + self.handcrafted_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Network:
    """Layers plus a flat parameter vector for one :class:`NetworkSpec`."""

    spec: NetworkSpec
    theta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        spec = self.spec
        self.trunk = []
        c = spec.input_shape[0]
        for k, out_ch in enumerate(spec.conv_channels):
            self.trunk += [Conv3x3(c, out_ch, needs_dx=k > 0), ReLU(), MaxPool2()]
            c = out_ch
        self.head = []
        n_in = spec.head_input_dim
        for i, width in enumerate(spec.fc_layers):
            self.head.append(Dense(n_in, width))
            if i < len(spec.fc_layers) - 1:
                self.head.append(ReLU())
            n_in = width
        self.layers = self.trunk + self.head
        self._slices = []
        offset = 0
        for layer in self.layers:
            sl = []
            for shape in layer.shapes:
                size = int(np.prod(shape))
                sl.append((offset, offset + size, shape))
                offset += size
            self._slices.append(sl)
        self.n_params = offset
        self.theta = np.zeros(offset)

    def views(self, theta=None):
        theta = self.theta if theta is None else theta
        return [[theta[a:b].reshape(s) for a, b, s in sl] for sl in self._slices]

    def initialize(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer, v in zip(self.layers, self.views()):
            layer.init(rng, v)

    def _check(self, images, features, n):
        spec = self.spec
        if spec.conv_channels:
            if images is None or images.ndim != 4 or tuple(images.shape[1:]) != tuple(spec.input_shape):
                got = None if images is None else images.shape
                raise ShapeMismatch(f"expected images (B, {spec.input_shape}), got {got}")
        if spec.handcrafted_dim:
            if features is None or features.shape != (n, spec.handcrafted_dim):
                got = None if features is None else features.shape
                raise ShapeMismatch(
                    f"expected features ({n}, {spec.handcrafted_dim}), got {got}"
                )

    def _forward(self, images, features, theta):
        n = len(images) if images is not None else len(features)
        self._check(images, features, n)
        views = self.views(theta)
        caches = []
        parts = []
        if self.spec.conv_channels:
            x = np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 2, 3, 1))
            for layer, p in zip(self.trunk, views):
                x, cache = layer.forward(x, p)
                caches.append(cache)
            parts.append(x.reshape(n, -1))
        if self.spec.handcrafted_dim:
            parts.append(np.asarray(features, dtype=np.float64))
        x = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        for layer, p in zip(self.head, views[len(self.trunk):]):
            x, cache = layer.forward(x, p)
            caches.append(cache)
        return x, caches, views

    def forward(self, images=None, features=None, theta=None) -> np.ndarray:
        """Class probabilities, one row per sample."""
        logits, _, _ = self._forward(images, features, theta)
        return softmax(logits)

    def loss_and_grad(self, images, features, labels, theta=None):
        """Mean cross-entropy, its gradient w.r.t. the flat parameters, and probabilities."""
        logits, caches, views = self._forward(images, features, theta)
        labels = np.asarray(labels)
        n = len(labels)
        if logits.shape[0] != n:
            raise ShapeMismatch(f"{logits.shape[0]} samples but {n} labels")
        probs = softmax(logits)
        loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        d /= n

        grad = np.zeros(self.n_params)
        n_trunk = len(self.trunk)
        for li in range(len(self.layers) - 1, n_trunk - 1, -1):
            d, g = self.layers[li].backward(d, caches[li], views[li])
            self._scatter(grad, li, g)
        if self.spec.conv_channels:
            d = d[:, : self.spec.flatten_dim]
            d = d.reshape(n, *self._trunk_out_shape())
            for li in range(n_trunk - 1, -1, -1):
                d, g = self.layers[li].backward(d, caches[li], views[li])
                self._scatter(grad, li, g)
        return loss, grad, probs

    def _trunk_out_shape(self):
        _, h, w = self.spec.input_shape
        k = 2 ** len(self.spec.conv_channels)
        return h // k, w // k, self.spec.conv_channels[-1]

    def _scatter(self, grad, li, grads):
        for (a, b, _), g in zip(self._slices[li], grads):
            grad[a:b] = g.ravel()


class Adam:
    def __init__(self, n_params: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
