"""Stage 1: QCFS network surgery and supervised training in ANN mode."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (AvgPool2d, BatchNorm2d, Conv2d, Flatten, Layer, Linear, MaxPool2d, QCFS,
                     ReLU, F32)
from .network import ANN, Network, softmax_cross_entropy
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

_UNTOUCHED = {"linear", "conv2d", "avgpool2d", "flatten", "batchnorm2d", "qcfs"}


class DivergenceError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class Stage1Config:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    t_max: int = 100
    levels: int = 8
    lam_init: float = 2.0
    phi: float = 0.5
    hidden: int = 500
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "t_max", "levels", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Stage1Config.{name} must be positive")
        if self.epochs < 0 or self.lr <= 0 or self.lam_init <= 0:
            raise ValueError("Stage1Config: epochs >= 0, lr > 0 and lam_init > 0 required")


def surgery(net: Network, lam=2.0, levels=8, phi=0.5) -> Network:
    """Swap activations for QCFS and max-pooling for average pooling.

    Every other layer is copied unchanged, so the shape trace is preserved.
    Applying surgery twice is the same as applying it once.
    """
    if net.mode != ANN:
        raise ValueError("surgery expects an ANN-mode graph")
    out: list[Layer] = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ReLU):
            out.append(QCFS(lam, levels, phi))
        elif isinstance(layer, MaxPool2d):
            out.append(AvgPool2d(layer.kernel, layer.stride))
        elif layer.kind in _UNTOUCHED:
            out.append(layer.copy())
        else:
            raise ValueError(f"layer {i}: unsupported layer kind {layer.kind!r} for QCFS surgery")
    return Network(out, net.input_shape, ANN)


def build_backbone(input_shape=(3, 64, 64), channels=(8, 16, 32), pools=(2, 2, 4),
                   batch_norm=False, seed=0) -> Network:
    """A plain conv/ReLU/max-pool feature extractor ending in a flatten."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    c = input_shape[0]
    for width, pool in zip(channels, pools):
        layers.append(Conv2d(c, width, 3, padding=1, rng=rng, bias=not batch_norm))
        if batch_norm:
            layers.append(BatchNorm2d(width))
        layers.append(ReLU())
        layers.append(MaxPool2d(pool))
        c = width
    layers.append(Flatten())
    return Network(layers, input_shape, ANN)


@dataclass
class SupervisedHead:
    """Linear -> QCFS -> Linear readout used only while training Stage 1."""
    layers: list

    @classmethod
    def build(cls, n_features, n_classes, hidden=500, lam=2.0, levels=8, phi=0.5, seed=0):
        rng = np.random.default_rng(seed + 7919)
        return cls([Linear(n_features, hidden, rng=rng), QCFS(lam, levels, phi),
                    Linear(hidden, n_classes, rng=rng)])

    def __post_init__(self):
        kinds = [layer.kind for layer in self.layers]
        if kinds not in (["linear", "qcfs", "linear"], ["linear", "if", "linear"]):
            raise ValueError(f"head must be Linear -> QCFS -> Linear, got {kinds}")


HEAD_LENGTH = 3


def attach_head(backbone: Network, head: SupervisedHead) -> Network:
    return Network([l.copy() for l in backbone.layers] + [l.copy() for l in head.layers],
                   backbone.input_shape, backbone.mode)


def detach_head(net: Network) -> Network:
    """Drop the trailing supervised head; the remainder is the feature extractor."""
    kinds = net.kinds()[-HEAD_LENGTH:]
    if kinds[0] != "linear" or kinds[2] != "linear":
        raise ValueError(f"network does not end in a supervised head: {kinds}")
    return Network([l.copy() for l in net.layers[:-HEAD_LENGTH]], net.input_shape, net.mode)


def predict_ann(net: Network, images, batch_size=64):
    out = []
    for i in range(0, len(images), batch_size):
        out.append(net.forward(images[i:i + batch_size]))
    return np.concatenate(out) if out else np.zeros((0,) + net.output_shape, F32)


def evaluate_ann(net: Network, images, labels, batch_size=64) -> float:
    if len(labels) == 0:
        return 0.0
    return float((predict_ann(net, images, batch_size).argmax(axis=1) == labels).mean())


@dataclass
class Stage1Result:
    best: Network
    best_val_acc: float
    best_epoch: int
    log: list = field(default_factory=list)

    def log_csv(self) -> str:
        rows = ["epoch,train_loss,train_acc,val_acc,lr"]
        for r in self.log:
            rows.append(f"{r['epoch']},{r['train_loss']:.6f},{r['train_acc']:.6f},"
                        f"{r['val_acc']:.6f},{r['lr']:.8g}")
        return "\n".join(rows) + "\n"


def train_stage1(net: Network, train, val, cfg: Stage1Config, augment=None) -> Stage1Result:
    """Cross-entropy training of weights and QCFS thresholds.

    ``train``/``val`` are ``(images, labels)`` pairs or objects with
    ``images``/``labels`` attributes. ``augment(batch, rng)`` is applied to
    training batches when given and ``cfg.augment`` is set. Returns the
    epoch with the best validation accuracy.
    """
    x_tr, y_tr = _unpack(train)
    x_va, y_va = _unpack(val)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ValueError("train_stage1 needs non-empty training and validation sets")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(lr=cfg.lr)
    params = net.params()
    qcfs_layers = [l for l in net.layers if isinstance(l, QCFS)]
    best, best_acc, best_epoch = net.copy(), -1.0, -1
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.t_max)
        order = rng.permutation(len(y_tr))
        total_loss, correct = 0.0, 0
        net.train(True)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if augment is not None and cfg.augment:
                xb = augment(xb, rng)
            logits = net.forward(xb, cache=True)
            loss, grad = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            net.backward(grad)
            opt.step(params, net.grads())
            for q in qcfs_layers:
                q.clamp()
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        net.train(False)
        val_acc = evaluate_ann(net, x_va, y_va)
        row = {"epoch": epoch, "train_loss": total_loss / len(y_tr), "train_acc": correct / len(y_tr),
               "val_acc": val_acc, "lr": opt.lr}
        history.append(row)
        log.info("stage1 epoch %d loss=%.4f train_acc=%.3f val_acc=%.3f", epoch,
                 row["train_loss"], row["train_acc"], val_acc)
        if val_acc > best_acc:
            best, best_acc, best_epoch = net.copy(), val_acc, epoch
    if not history:
        best_acc = evaluate_ann(best, x_va, y_va)
    return Stage1Result(best, best_acc, best_epoch, history)


def _unpack(ds):
    if isinstance(ds, tuple):
        return np.asarray(ds[0], F32), np.asarray(ds[1], np.int64)
    return ds.images, ds.labels


def config_dict(cfg) -> dict:
    return asdict(cfg)
