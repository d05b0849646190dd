import math

import numpy as np
import pytest

from hybridsnn.layers import (AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, QCFS, ReLU,
                              ShapeError, layer_from_config)
from hybridsnn.network import Network, fold_batchnorm, softmax_cross_entropy
from hybridsnn.optim import Adam, cosine_lr

F32 = np.float32


def fd_grad(fn, arr, eps=1e-6):
    g = np.zeros(arr.shape)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + eps
        up = fn()
        arr[i] = old - eps
        down = fn()
        arr[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(np.ravel(a) - np.ravel(b)) / scale


def test_avgpool_2x2():
    x = np.array([[[[1, 2], [3, 4]]]], F32)
    assert AvgPool2d(2).forward(x).item() == 2.5


def test_maxpool_picks_max_and_routes_gradient():
    x = np.array([[[[1, 5], [3, 4]]]], F32)
    pool = MaxPool2d(2)
    assert pool.forward(x, cache=True).item() == 5
    assert np.array_equal(pool.backward(np.ones((1, 1, 1, 1), F32)), [[[[0, 1], [0, 0]]]])


def test_identity_linear():
    lin = Linear(4, 4)
    lin.params["weight"] = np.eye(4, dtype=F32)
    lin.params["bias"][:] = 0
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(F32)
    assert np.array_equal(lin.forward(x), x)


def test_conv_all_ones_counts_window():
    conv = Conv2d(1, 1, 3, padding=1, bias=False)
    conv.params["weight"][:] = 1
    y = conv.forward(np.ones((1, 1, 5, 5), F32))[0, 0]
    assert y[2, 2] == 9 and y[0, 0] == 4 and y[0, 2] == 6


def test_relu_and_flatten():
    x = np.array([[-1.0, 0.0, 2.0]], F32)
    assert np.array_equal(ReLU().forward(x), [[0, 0, 2]])
    f = Flatten()
    y = f.forward(np.zeros((2, 3, 4, 5), F32), cache=True)
    assert y.shape == (2, 60)
    assert f.backward(y).shape == (2, 3, 4, 5)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(training):
    rng = np.random.default_rng(1)
    bn = BatchNorm2d(3)
    bn.params["gamma"] = rng.uniform(0.5, 2, 3)
    bn.params["beta"] = rng.normal(size=3)
    bn.buffers["running_mean"] = rng.normal(size=3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3)
    bn.training = training
    x = rng.normal(size=(4, 3, 3, 3))
    r = rng.normal(size=x.shape)

    def loss():
        saved = {k: v.copy() for k, v in bn.buffers.items()}
        out = float((bn.forward(x) * r).sum())
        bn.buffers.update(saved)
        return out
    saved = {k: v.copy() for k, v in bn.buffers.items()}
    bn.forward(x, cache=True)
    bn.buffers.update(saved)
    gx = bn.backward(r)
    # the layer computes in float32, so the step must dwarf its rounding error
    assert rel(gx, fd_grad(loss, x, eps=1e-2)) < 1e-3
    for name in ("gamma", "beta"):
        assert rel(bn.grads[name], fd_grad(loss, bn.params[name], eps=1e-2)) < 1e-3


def test_zero_upstream_gradient_gives_zero_grads():
    rng = np.random.default_rng(2)
    net = Network([Conv2d(2, 3, 3, rng=rng), QCFS(), AvgPool2d(2), Flatten(), Linear(3, 2, rng=rng)], (2, 4, 4))
    y = net.forward(rng.normal(size=(2, 2, 4, 4)), cache=True)
    gx = net.backward(np.zeros_like(y))
    assert not gx.any()
    assert all(not g.any() for g in net.grads().values())


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    _, g = softmax_cross_entropy(logits, labels)
    assert rel(g, fd_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)) < 1e-3


def test_adam_first_steps_closed_form():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -0.1, 2.0])}
    opt = Adam(lr=0.01, eps=0.0)
    opt.step(p, g)
    # bias-corrected m/sqrt(v) is sign(g) when the gradient is constant
    assert np.allclose(p["w"], [0.99, -1.99, 0.49])
    opt.step(p, g)
    assert np.allclose(p["w"], [0.98, -1.98, 0.48])
    assert opt.step_count == 2 and np.allclose(opt.m["w"], 0.19 * g["w"])


def test_adam_skips_non_finite():
    p = {"a": np.ones(2), "b": np.ones(2)}
    opt = Adam(lr=0.1)
    opt.step(p, {"a": np.array([np.nan, 1.0]), "b": np.ones(2)})
    assert np.array_equal(p["a"], np.ones(2))
    assert opt.skipped == 1 and p["b"][0] < 1


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 10) == 0.1
    assert math.isclose(cosine_lr(0.1, 5, 10), 0.05)
    assert cosine_lr(0.1, 10, 10) == 0.0
    assert cosine_lr(0.1, 15, 10) == 0.0


def test_shape_error_names_layer():
    with pytest.raises(ShapeError, match="layer 2"):
        Network([Conv2d(3, 4, 3), ReLU(), Linear(10, 2)], (3, 8, 8))


def test_input_shape_checked():
    net = Network([Flatten(), Linear(12, 2)], (3, 2, 2))
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((1, 3, 3, 3), F32))


def test_fold_batchnorm_preserves_output():
    rng = np.random.default_rng(4)
    bn = BatchNorm2d(3)
    bn.params["gamma"] = rng.uniform(0.5, 2, 3).astype(F32)
    bn.params["beta"] = rng.normal(size=3).astype(F32)
    bn.buffers["running_mean"] = rng.normal(size=3).astype(F32)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3).astype(F32)
    net = Network([Conv2d(2, 3, 3, rng=rng, bias=False), bn, ReLU()], (2, 5, 5))
    x = rng.normal(size=(2, 2, 5, 5)).astype(F32)
    folded = fold_batchnorm(net)
    assert folded.kinds() == ["conv2d", "relu"]
    assert np.allclose(folded.forward(x), net.forward(x), atol=1e-5)


def test_fold_rejects_orphan_batchnorm():
    with pytest.raises(ValueError, match="layer 0"):
        fold_batchnorm(Network([BatchNorm2d(2)], (2, 3, 3)))


def test_layer_rebuild_from_config():
    lin = Linear(3, 2, rng=np.random.default_rng(0))
    copy = layer_from_config(lin.kind, lin.config(), lin.params)
    x = np.ones((1, 3), F32)
    assert np.array_equal(copy.forward(x), lin.forward(x))
