"""Energy estimates from operation counts: FLOPs for ANN mode, synaptic operations for SNN mode.

Counting conventions:

* a multiply-accumulate is 2 FLOPs, so conv = 2*K*K*C_in*C_out*H_out*W_out and
  linear = 2*n_in*n_out (bias adds are not counted);
* pooling, QCFS and ReLU cost one op per output element, batch-norm two
  (scale and shift), flatten is free;
* one spike is one synaptic operation (SOP). Memory traffic is not modelled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import ANN, Network
from .snn import SnnRunRecord

SOP_JOULES = 77e-15      # per synaptic operation
FLOP_JOULES = 12.5e-12   # per floating-point operation
INFINITE = math.inf      # improvement when the SNN side spent nothing

_PER_ELEMENT = {"avgpool2d": 1, "maxpool2d": 1, "qcfs": 1, "relu": 1, "batchnorm2d": 2, "flatten": 0}


@dataclass(frozen=True)
class EnergyConstants:
    sop_joules: float = SOP_JOULES
    flop_joules: float = FLOP_JOULES


def layer_flops(layer, in_shape, out_shape) -> int:
    if layer.kind == "conv2d":
        _, h, w = out_shape
        return 2 * layer.kernel * layer.kernel * layer.c_in * layer.c_out * h * w
    if layer.kind == "linear":
        return 2 * layer.n_in * layer.n_out
    if layer.kind in _PER_ELEMENT:
        return _PER_ELEMENT[layer.kind] * math.prod(out_shape)
    raise ValueError(f"no FLOP convention for layer kind {layer.kind!r}")


def count_flops(net: Network, input_shape=None, per_layer=False):
    """Per-sample FLOPs of an ANN-mode graph; depends on shapes only.

    With ``per_layer`` returns ``(total, [(label, flops), ...])``.
    """
    if net.mode != ANN:
        raise ValueError("count_flops expects an ANN-mode graph")
    if input_shape is not None:
        if any(d is None or int(d) <= 0 for d in input_shape):
            raise ValueError(f"count_flops needs a static input shape, got {tuple(input_shape)}")
        if tuple(int(d) for d in input_shape) != net.input_shape:
            net = Network(net.layers, input_shape, ANN)
    shapes = net.shape_trace()
    rows = [(f"{i}.{layer.kind}", layer_flops(layer, shapes[i], shapes[i + 1]))
            for i, layer in enumerate(net.layers)]
    total = sum(f for _, f in rows)
    return (total, rows) if per_layer else total


def count_sops(run, include_input=True) -> int:
    """Total spikes of a simulation record.

    Accepts an :class:`SnnRunRecord`, a classifier evaluation dict (excitatory
    counts, inhibitory and Poisson input spikes; input spikes dropped when
    ``include_input`` is false) or any array of spikes/counts.
    """
    if isinstance(run, SnnRunRecord):
        return run.sops
    if isinstance(run, dict):
        total = int(np.sum(run["counts"])) + int(np.sum(run["inh_spikes"]))
        if include_input:
            total += int(np.sum(run["input_spikes"]))
        return total
    return int(np.sum(run, dtype=np.int64))


@dataclass
class EnergyReport:
    flops: int
    sops: int
    constants: EnergyConstants = field(default_factory=EnergyConstants)
    flops_by_part: dict = field(default_factory=dict)
    sops_by_part: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flops < 0 or self.sops < 0:
            raise ValueError("operation counts must be non-negative")

    @property
    def e_ann(self) -> float:
        return self.flops * self.constants.flop_joules

    @property
    def e_snn(self) -> float:
        return self.sops * self.constants.sop_joules

    @property
    def improvement(self):
        """``e_ann / e_snn``; :data:`INFINITE` when only the SNN side is zero, None when both are."""
        if self.sops == 0:
            return INFINITE if self.flops > 0 else None
        return self.e_ann / self.e_snn

    def __add__(self, other: "EnergyReport") -> "EnergyReport":
        if self.constants != other.constants:
            raise ValueError("cannot add reports computed with different constants")
        return EnergyReport(self.flops + other.flops, self.sops + other.sops, self.constants,
                            _merge(self.flops_by_part, other.flops_by_part),
                            _merge(self.sops_by_part, other.sops_by_part))

    def as_dict(self) -> dict:
        return {"flops": self.flops, "sops": self.sops, "e_ann": self.e_ann, "e_snn": self.e_snn,
                "improvement": self.improvement}


def _merge(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0) + v
    return out


def energy_report(flops, sops, constants: EnergyConstants | None = None, flops_by_part=None,
                  sops_by_part=None) -> EnergyReport:
    return EnergyReport(int(flops), int(sops), constants or EnergyConstants(),
                        dict(flops_by_part or {}), dict(sops_by_part or {}))


def batch_report(per_sample):
    """Sum per-sample reports; improvement is recomputed from the summed counts."""
    per_sample = list(per_sample)
    if not per_sample:
        return energy_report(0, 0)
    total = per_sample[0]
    for r in per_sample[1:]:
        total = total + r
    return total


def hybrid_sops(backbone: SnnRunRecord, classifier: dict, include_input=True) -> dict:
    """Per-sample SOP breakdown of the two-stage spiking pipeline."""
    parts = {"backbone": backbone.spike_totals.sum(axis=1).astype(np.int64),
             "classifier_exc": np.asarray(classifier["counts"]).sum(axis=1).astype(np.int64),
             "classifier_inh": np.asarray(classifier["inh_spikes"], np.int64)}
    if include_input:
        parts["poisson_input"] = np.asarray(classifier["input_spikes"], np.int64)
    return parts


TABLE_COLUMNS = ("backbone", "ann_accuracy", "snn_accuracy", "e_ann", "e_snn", "improvement")


def table_row(name, ann_accuracy, snn_accuracy, report: EnergyReport) -> dict:
    return {"backbone": name, "ann_accuracy": ann_accuracy, "snn_accuracy": snn_accuracy,
            "e_ann": report.e_ann, "e_snn": report.e_snn, "improvement": report.improvement}


def table_csv(rows) -> str:
    lines = [",".join(TABLE_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)
