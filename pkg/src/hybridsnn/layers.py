"""Layer set for the ANN/SNN graphs.

Tensors are plain float32 numpy arrays, batch first, images in NCHW order.
Every layer knows its per-sample output shape, runs a batched forward pass,
and (for differentiable layers) a backward pass that consumes the activations
cached by the last ``forward(..., cache=True)`` call.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

F32 = np.float32


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"
    trainable = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, cache=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache

    def config(self) -> dict:
        """Hyperparameters needed to rebuild the layer (serialized as metadata)."""
        return {}

    def copy(self):
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.buffers = {k: v.copy() for k, v in self.buffers.items()}
        new.grads = {}
        new._cache = None
        return new

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(F32)


class Linear(Layer):
    kind = "linear"
    trainable = True

    def __init__(self, n_in, n_out, rng=None, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.bias = int(n_in), int(n_out), bool(bias)
        bound = 1.0 / np.sqrt(n_in)
        self.params["weight"] = _uniform(rng, bound, (self.n_out, self.n_in))
        if self.bias:
            self.params["bias"] = _uniform(rng, bound, (self.n_out,))

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out, "bias": self.bias}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"expected ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x, cache=False):
        y = x @ self.params["weight"].T
        if self.bias:
            y += self.params["bias"]
        if cache:
            self._cache = x
        return y

    def backward(self, grad):
        x = self._cached()
        self.grads["weight"] = grad.T @ x
        if self.bias:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class Conv2d(Layer):
    """Direct convolution through an im2col view."""
    kind = "conv2d"
    trainable = True

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        self.bias = bool(bias)
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.params["weight"] = _uniform(rng, bound, (self.c_out, self.c_in, self.kernel, self.kernel))
        if self.bias:
            self.params["bias"] = _uniform(rng, bound, (self.c_out,))

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(f"expected ({self.c_in}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {k} does not fit input {tuple(in_shape)}")
        return (self.c_out, ho, wo)

    def _cols(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, (n, ho, wo)

    def forward(self, x, cache=False):
        cols, (n, ho, wo) = self._cols(x)
        wmat = self.params["weight"].reshape(self.c_out, -1)
        y = cols @ wmat.T
        if self.bias:
            y += self.params["bias"]
        if cache:
            self._cache = (x.shape, cols, (n, ho, wo))
        return np.ascontiguousarray(y.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2))

    def backward(self, grad):
        x_shape, cols, (n, ho, wo) = self._cached()
        k, s, p = self.kernel, self.stride, self.padding
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.grads["weight"] = (g.T @ cols).reshape(self.params["weight"].shape)
        if self.bias:
            self.grads["bias"] = g.sum(axis=0)
        dcols = (g @ self.params["weight"].reshape(self.c_out, -1)).reshape(n, ho, wo, self.c_in, k, k)
        _, c, h, w = x_shape
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p), F32)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dx)


class _Pool2d(Layer):
    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else self.kernel

    def config(self):
        return {"kernel": self.kernel, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"window {k} does not fit input {tuple(in_shape)}")
        return (c, ho, wo)

    def _windows(self, x):
        k, s = self.kernel, self.stride
        return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


class AvgPool2d(_Pool2d):
    kind = "avgpool2d"

    def forward(self, x, cache=False):
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if k == s and h == ho * k and w == wo * k:
            y = x.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5), dtype=F32)
        else:
            y = self._windows(x).mean(axis=(4, 5), dtype=F32)
        if cache:
            self._cache = x.shape
        return y.astype(F32, copy=False)

    def backward(self, grad):
        n, c, h, w = self._cached()
        k, s = self.kernel, self.stride
        ho, wo = grad.shape[2:]
        dx = np.zeros((n, c, h, w), F32)
        g = grad / F32(k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g
        return dx


class MaxPool2d(_Pool2d):
    kind = "maxpool2d"

    def forward(self, x, cache=False):
        win = self._windows(x)
        n, c, ho, wo, k, _ = win.shape
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if cache:
            self._cache = (x.shape, idx)
        return np.ascontiguousarray(y)

    def backward(self, grad):
        x_shape, idx = self._cached()
        k, s = self.kernel, self.stride
        ho, wo = grad.shape[2:]
        dx = np.zeros(x_shape, F32)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * hit
        return dx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, cache=False):
        if cache:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, cache=False):
        if cache:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._cached()


class BatchNorm2d(Layer):
    """Per-channel batch normalization; folded into the preceding conv before conversion."""
    kind = "batchnorm2d"
    trainable = True

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = int(channels), float(eps), float(momentum)
        self.params["gamma"] = np.ones(self.channels, F32)
        self.params["beta"] = np.zeros(self.channels, F32)
        self.buffers["running_mean"] = np.zeros(self.channels, F32)
        self.buffers["running_var"] = np.ones(self.channels, F32)
        self.training = False

    def config(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise ShapeError(f"expected ({self.channels}, H, W), got {tuple(in_shape)}")
        return tuple(in_shape)

    def forward(self, x, cache=False):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if self.training:
            mean = x.mean(axis=(0, 2, 3), dtype=F32)
            var = x.var(axis=(0, 2, 3), dtype=F32)
            m = F32(self.momentum)
            n = x.size // self.channels
            unbiased = var * F32(n / max(n - 1, 1))
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(F32)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(F32)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = (1.0 / np.sqrt(var + F32(self.eps))).astype(F32)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        if cache:
            self._cache = (xhat, inv, self.training)
        return (xhat * gamma + beta).astype(F32, copy=False)

    def backward(self, grad):
        xhat, inv, batch_stats = self._cached()
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        g = grad * self.params["gamma"][None, :, None, None]
        if not batch_stats:
            return g * inv[None, :, None, None]
        m = grad.size // self.channels
        s1 = g.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv[None, :, None, None] / F32(m) * (F32(m) * g - s1 - xhat * s2)).astype(F32)


class QCFS(Layer):
    """Quantization clip-floor-shift activation with a trainable threshold.

    ``y = (lam / L) * clip(floor(x * L / lam + phi), 0, L)``. The backward pass
    is a straight-through estimator: the floor is treated as the identity.
    """
    kind = "qcfs"
    trainable = True
    MIN_LAMBDA = 1e-4

    def __init__(self, lam=2.0, levels=8, phi=0.5):
        super().__init__()
        if not lam > 0:
            raise ValueError(f"QCFS threshold must be positive, got {lam}")
        if int(levels) < 1:
            raise ValueError(f"QCFS needs at least one level, got {levels}")
        self.levels, self.phi = int(levels), float(phi)
        self.params["lam"] = np.array([lam], F32)

    @property
    def lam(self) -> float:
        return float(self.params["lam"][0])

    def config(self):
        return {"levels": self.levels, "phi": self.phi}

    def clamp(self):
        np.maximum(self.params["lam"], F32(self.MIN_LAMBDA), out=self.params["lam"])

    def forward(self, x, cache=False):
        y = qcfs_forward(x, self.lam, self.levels, self.phi)
        if cache:
            self._cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._cached()
        gx, glam = qcfs_backward(x, y, grad, self.lam)
        self.grads["lam"] = np.array([glam], F32)
        return gx


def qcfs_forward(x, lam, levels, phi=0.5):
    """Staircase activation with values in {k * lam / levels : 0 <= k <= levels}."""
    if not lam > 0:
        raise ValueError(f"QCFS threshold must be positive, got {lam}")
    return kernels.qcfs(np.asarray(x, F32), float(lam), int(levels), float(phi))


def qcfs_backward(x, y, grad_out, lam):
    inside = (x >= 0) & (x <= lam)
    grad_x = grad_out * inside
    strict = (x > 0) & (x < lam)
    dy_dlam = y / F32(lam) - (x / F32(lam)) * strict
    grad_lam = float((grad_out * dy_dlam).sum(dtype=np.float64))
    return grad_x.astype(F32, copy=False), grad_lam


class IFNeuron(Layer):
    """Integrate-and-fire unit of a converted network.

    Holds only the threshold; membrane state lives in the simulator. Calling
    ``forward`` outside a simulation is an error.
    """
    kind = "if"

    def __init__(self, theta=2.0, levels=8, v_init=0.5):
        super().__init__()
        self.levels, self.v_init = int(levels), float(v_init)
        self.params["theta"] = np.array([theta], F32)

    @property
    def theta(self) -> float:
        return float(self.params["theta"][0])

    def config(self):
        return {"levels": self.levels, "v_init": self.v_init}

    def forward(self, x, cache=False):
        raise RuntimeError("IF layers are stateful; run them through hybridsnn.snn.forward_snn")


LAYER_TYPES = {cls.kind: cls for cls in
               (Linear, Conv2d, AvgPool2d, MaxPool2d, Flatten, ReLU, BatchNorm2d, QCFS, IFNeuron)}


def layer_from_config(kind, cfg, params, buffers=None):
    """Rebuild a layer from its kind, config dict and parameter arrays."""
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer kind {kind!r}")
    layer = cls.__new__(cls)
    Layer.__init__(layer)
    for k, v in cfg.items():
        setattr(layer, k, v)
    if cls is BatchNorm2d:
        layer.training = False
    layer.params = {k: np.asarray(v, F32).copy() for k, v in params.items()}
    layer.buffers = {k: np.asarray(v, F32).copy() for k, v in (buffers or {}).items()}
    return layer
