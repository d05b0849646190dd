"""ANN-to-SNN conversion and time-stepped integrate-and-fire simulation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .ann import evaluate_ann
from .layers import IFNeuron, QCFS, F32
from .network import ANN, SNN, Network

_CONVERTIBLE = {"linear", "conv2d", "avgpool2d", "flatten"}
_RATE_PRESERVING = {"avgpool2d", "flatten"}


def convert(ann: Network, v_init=0.5) -> Network:
    """Turn every QCFS unit into an IF neuron with ``theta = lambda``; weights are shared copies."""
    if ann.mode != ANN:
        raise ValueError("convert expects an ANN-mode graph")
    layers = []
    for i, layer in enumerate(ann.layers):
        if isinstance(layer, QCFS):
            layers.append(IFNeuron(layer.lam, layer.levels, v_init))
        elif layer.kind in _CONVERTIBLE:
            layers.append(layer.copy())
        elif layer.kind == "batchnorm2d":
            raise ValueError(f"layer {i}: batchnorm2d must be folded (network.fold_batchnorm) before conversion")
        else:
            raise ValueError(f"layer {i}: layer kind {layer.kind!r} cannot be converted to the spiking domain")
    return Network(layers, ann.input_shape, SNN)


@dataclass
class IFLayerState:
    theta: float
    v: np.ndarray
    spike_count: np.ndarray

    @classmethod
    def start(cls, theta, shape, v_init=0.5):
        """Fresh presentation: membrane at ``v_init * theta``. ``shape`` includes the batch axis."""
        theta = F32(theta)
        return cls(float(theta), np.full(shape, theta * F32(v_init), F32), np.zeros(shape[0], np.int64))


def if_step(state: IFLayerState, current) -> np.ndarray:
    """Integrate, fire where ``v >= theta``, reset by subtraction. Returns float32 0/1 spikes."""
    current = np.ascontiguousarray(current, F32)
    if current.shape != state.v.shape:
        raise ValueError(f"input shape {current.shape} does not match membrane shape {state.v.shape}")
    spikes = np.empty_like(state.v)
    kernels.if_step(state.v, current, F32(state.theta), spikes)
    state.spike_count += spikes.reshape(len(spikes), -1).sum(axis=1, dtype=np.int64)
    return spikes


@dataclass
class SnnRunRecord:
    t_b: int
    spike_totals: np.ndarray   # [N, n_if_layers] spikes per IF layer over the presentation
    rates: np.ndarray          # [N, F] firing rate of the last spike-derived layer, in [0, 1]
    output: np.ndarray         # [N, O] time-averaged network output
    has_head: bool

    @property
    def predicted(self):
        return self.output.argmax(axis=1) if self.has_head else None

    @property
    def sops(self) -> int:
        return int(self.spike_totals.sum())

    @property
    def sops_per_sample(self) -> np.ndarray:
        return self.spike_totals.sum(axis=1)


def _rate_layer(net: Network):
    idx, spiking = None, False
    for i, layer in enumerate(net.layers):
        if layer.kind == "if":
            spiking = True
        elif layer.kind not in _RATE_PRESERVING:
            spiking = False
        if spiking:
            idx = i
    return idx


def forward_snn(net: Network, images, t_b: int, record_at=None, batch_size=64):
    """Present ``images`` as constant input current for ``t_b`` steps.

    Returns an :class:`SnnRunRecord`. With ``record_at`` (an iterable of
    timesteps <= ``t_b``) returns ``{t: record}`` with the record each shorter
    presentation would have produced; the simulation is run once.
    """
    if net.mode != SNN:
        raise ValueError("forward_snn expects an SNN-mode graph (see convert)")
    t_b = int(t_b)
    if t_b < 1:
        raise ValueError("t_b must be >= 1; use the ANN-mode forward for T_b = 0")
    images = np.asarray(images, F32)
    if images.ndim == len(net.input_shape):
        images = images[None]
    net.check_input(images)
    marks = sorted({int(t) for t in record_at}) if record_at is not None else [t_b]
    if not marks or marks[0] < 1 or marks[-1] > t_b:
        raise ValueError(f"record_at must lie in [1, {t_b}]")
    parts = [_simulate(net, images[i:i + batch_size], t_b, marks)
             for i in range(0, len(images), batch_size)]
    merged = {t: SnnRunRecord(t, *(np.concatenate([p[t][k] for p in parts]) for k in range(3)),
                              has_head=net.layers[-1].kind == "linear")
              for t in marks}
    return merged if record_at is not None else merged[t_b]


def _simulate(net: Network, x0, t_b, marks):
    layers = net.layers
    first_if = next((i for i, l in enumerate(layers) if l.kind == "if"), len(layers))
    static = x0
    for layer in layers[:first_if]:
        static = layer.forward(static)
    shapes = net.shape_trace()
    n = len(x0)
    if_idx = [i for i, l in enumerate(layers) if l.kind == "if"]
    states = {i: IFLayerState.start(layers[i].theta, (n,) + shapes[i + 1], layers[i].v_init) for i in if_idx}
    rate_idx = _rate_layer(net)
    rate_sum = np.zeros((n,) + shapes[rate_idx + 1], np.float64) if rate_idx is not None else None
    out_sum = np.zeros((n,) + shapes[-1], np.float64)
    snaps = {}
    for t in range(1, t_b + 1):
        # spikes stay binary through pooling/flatten; a spike delivers theta to the next affine layer
        x, scale = static, None
        for i in range(first_if, len(layers)):
            if i in states:
                x, scale = if_step(states[i], x if scale is None else x * scale), F32(states[i].theta)
            elif layers[i].kind in _RATE_PRESERVING:
                x = layers[i].forward(x)
            else:
                x, scale = layers[i].forward(x if scale is None else x * scale), None
            if i == rate_idx:
                rate_sum += x
        out_sum += x if scale is None else x * scale
        if t in marks:
            totals = np.stack([states[i].spike_count for i in if_idx], axis=1) if if_idx \
                else np.zeros((n, 0), np.int64)
            rates = rate_sum / t if rate_sum is not None else out_sum / t
            snaps[t] = (totals.copy(), rates.reshape(n, -1).astype(F32),
                        (out_sum / t).reshape(n, -1).astype(F32))
    return snaps


def accuracy_vs_timesteps(ann: Network, images, labels, t_list, snn: Network | None = None):
    """Accuracy at T_b = 0 (ANN mode) and at every T_b in ``t_list`` from a single simulation."""
    t_list = [int(t) for t in t_list]
    if not t_list or t_list != sorted(t_list) or t_list[0] < 1:
        raise ValueError("t_list must be a non-empty ascending list of positive timesteps")
    snn = snn if snn is not None else convert(ann)
    labels = np.asarray(labels)
    rows = [{"t_b": 0, "accuracy": evaluate_ann(ann, images, labels), "sops_per_sample": 0.0}]
    recs = forward_snn(snn, images, t_list[-1], record_at=t_list)
    for t in t_list:
        r = recs[t]
        rows.append({"t_b": t, "accuracy": float((r.predicted == labels).mean()),
                     "sops_per_sample": float(r.sops_per_sample.mean())})
    return rows


def rows_to_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
