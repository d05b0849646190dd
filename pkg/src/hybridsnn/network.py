"""Ordered layer graph used in both ANN and SNN mode."""
from __future__ import annotations

import numpy as np

from .layers import (BatchNorm2d, Conv2d, Layer, Linear, ShapeError, F32)

ANN, SNN = "ann", "snn"


class Network:
    def __init__(self, layers: list[Layer], input_shape, mode: str = ANN):
        if mode not in (ANN, SNN):
            raise ValueError(f"mode must be 'ann' or 'snn', got {mode!r}")
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.mode = mode
        self.shape_trace()

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __repr__(self):
        body = "\n".join(f"  [{i}] {layer!r}" for i, layer in enumerate(self.layers))
        return f"Network(mode={self.mode}, input={self.input_shape}\n{body}\n)"

    def shape_trace(self):
        """Per-sample shapes: input first, then the output of every layer."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): input shape {shapes[-1]} rejected: {exc}") from None
        return shapes

    @property
    def output_shape(self):
        return self.shape_trace()[-1]

    def check_input(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind if self.layers else 'none'}): "
                             f"expected per-sample input {self.input_shape}, got {tuple(x.shape[1:])}")

    def train(self, flag=True):
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.training = flag
        return self

    def forward(self, x, cache=False, upto=None):
        if self.mode != ANN:
            raise RuntimeError("SNN-mode graphs are evaluated with hybridsnn.snn.forward_snn")
        x = np.asarray(x, F32)
        self.check_input(x)
        for layer in self.layers[:upto]:
            x = layer.forward(x, cache=cache)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self):
        """Yield ``(key, layer, name)`` for every trainable tensor; keys are stable across copies."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    def params(self):
        return {key: layer.params[name] for key, layer, name in self.named_params()}

    def grads(self):
        return {key: layer.grads[name] for key, layer, name in self.named_params() if name in layer.grads}

    def copy(self):
        return Network([layer.copy() for layer in self.layers], self.input_shape, self.mode)

    def kinds(self):
        return [layer.kind for layer in self.layers]


def fold_batchnorm(net: Network) -> Network:
    """Merge every BatchNorm2d into the conv (or linear) layer right before it."""
    out: list[Layer] = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BatchNorm2d):
            out.append(layer.copy())
            continue
        if not out or not isinstance(out[-1], (Conv2d, Linear)):
            raise ValueError(f"layer {i} (batchnorm2d) does not follow an affine layer and cannot be folded")
        prev = out[-1]
        mean, var = layer.buffers["running_mean"], layer.buffers["running_var"]
        scale = (layer.params["gamma"] / np.sqrt(var + F32(layer.eps))).astype(F32)
        w = prev.params["weight"]
        shape = (-1,) + (1,) * (w.ndim - 1)
        prev.params["weight"] = (w * scale.reshape(shape)).astype(F32)
        bias = prev.params.get("bias", np.zeros(w.shape[0], F32))
        prev.params["bias"] = ((bias - mean) * scale + layer.params["beta"]).astype(F32)
        prev.bias = True
    return Network(out, net.input_shape, net.mode)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean(dtype=np.float64))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / F32(n)).astype(F32)
