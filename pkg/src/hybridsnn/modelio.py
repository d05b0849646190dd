"""SPKF binary checkpoint format (layout documented in docs/model_format.md).

All integers are little-endian u32, all parameter data little-endian float32.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .layers import layer_from_config
from .network import ANN, SNN, Network

MAGIC = b"SPKF"
VERSION = 1

CLASSIFIER = "classifier"
MODE_TAGS = {ANN: 0, SNN: 1, CLASSIFIER: 2}
KIND_TAGS = {"linear": 1, "conv2d": 2, "avgpool2d": 3, "maxpool2d": 4, "flatten": 5,
             "relu": 6, "batchnorm2d": 7, "qcfs": 8, "if": 9, "classifier": 100, "meta": 255}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
_TAG_MODES = {v: k for k, v in MODE_TAGS.items()}


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


def _u32(buf, *values):
    buf.write(struct.pack(f"<{len(values)}I", *values))


def _read_u32(buf, n=1):
    raw = buf.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated SPKF file")
    vals = struct.unpack(f"<{n}I", raw)
    return vals if n > 1 else vals[0]


def _read_shape(buf, ndim):
    if ndim == 0:
        return ()
    if ndim == 1:
        return (_read_u32(buf),)
    return tuple(_read_u32(buf, ndim))


def _write_bytes(buf, data: bytes):
    _u32(buf, len(data))
    buf.write(data)


def _read_bytes(buf):
    n = _read_u32(buf)
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated SPKF file")
    return data


def encode(mode: str, input_shape, records) -> bytes:
    """``records`` is a list of ``(kind, config_dict, {blob_name: array})``."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION, MODE_TAGS[mode], len(input_shape), *input_shape)
    _u32(buf, len(records))
    for kind, cfg, blobs in records:
        _u32(buf, KIND_TAGS[kind])
        _write_bytes(buf, json.dumps(cfg, sort_keys=True).encode())
        _u32(buf, len(blobs))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype="<f4")
            _write_bytes(buf, name.encode())
            _u32(buf, arr.ndim, *arr.shape)
            buf.write(arr.tobytes())
    return buf.getvalue()


def decode(data: bytes):
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise FormatError("not an SPKF file (bad magic)")
    version = _read_u32(buf)
    if version != VERSION:
        raise VersionError(f"SPKF version {version} is not supported (expected {VERSION})")
    mode_tag, ndim = _read_u32(buf, 2)
    input_shape = _read_shape(buf, ndim)
    if mode_tag not in _TAG_MODES:
        raise FormatError(f"unknown mode tag {mode_tag}")
    records = []
    for _ in range(_read_u32(buf)):
        tag = _read_u32(buf)
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}")
        cfg = json.loads(_read_bytes(buf).decode())
        blobs = {}
        for _ in range(_read_u32(buf)):
            name = _read_bytes(buf).decode()
            nd = _read_u32(buf)
            shape = _read_shape(buf, nd)
            count = int(np.prod(shape)) if shape else 1
            raw = buf.read(4 * count)
            if len(raw) != 4 * count:
                raise FormatError("truncated SPKF file")
            blobs[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        records.append((_TAG_KINDS[tag], cfg, blobs))
    return _TAG_MODES[mode_tag], input_shape, records


def network_records(net: Network, meta: dict | None = None):
    records = []
    for layer in net.layers:
        blobs = dict(layer.params)
        blobs.update({f"buffer:{k}": v for k, v in layer.buffers.items()})
        records.append((layer.kind, layer.config(), blobs))
    if meta is not None:
        records.append(("meta", meta, {}))
    return records


def save_network(path, net: Network, meta: dict | None = None):
    Path(path).write_bytes(encode(net.mode, net.input_shape, network_records(net, meta)))


def load_network(path):
    """Return ``(network, meta)``; ``meta`` is ``{}`` when the file carries none."""
    mode, input_shape, records = decode(Path(path).read_bytes())
    if mode == CLASSIFIER:
        raise FormatError(f"{path} holds a classifier, not a network")
    layers, meta = [], {}
    for kind, cfg, blobs in records:
        if kind == "meta":
            meta = cfg
            continue
        params = {k: v for k, v in blobs.items() if not k.startswith("buffer:")}
        buffers = {k[len("buffer:"):]: v for k, v in blobs.items() if k.startswith("buffer:")}
        layers.append(layer_from_config(kind, cfg, params, buffers))
    return Network(layers, input_shape, mode), meta


def save_classifier(path, state, meta: dict | None = None):
    """Weights, thresholds, labels and specializations of a Stage-2 classifier.

    Labels and the per-(neuron, class) count matrix are integers and live in the
    JSON config; float arrays are blobs.
    """
    from .stdp import config_dict
    cfg = {"config": config_dict(state.cfg), "n_classes": int(state.n_classes)}
    blobs = {"w": state.w, "theta_adapt": state.theta_adapt}
    if state.labels is not None:
        cfg["labels"] = [int(v) for v in state.labels]
        cfg["class_counts"] = np.asarray(state.class_counts).astype(int).tolist()
        blobs["specialization"] = state.specialization
    records = [(CLASSIFIER, cfg, blobs)]
    if meta is not None:
        records.append(("meta", meta, {}))
    Path(path).write_bytes(encode(CLASSIFIER, (state.n_features,), records))


def load_classifier(path):
    """Return ``(ClassifierState, meta)``."""
    from .stdp import ClassifierState, Stage2Config
    mode, _, records = decode(Path(path).read_bytes())
    if mode != CLASSIFIER:
        raise FormatError(f"{path} holds a {mode} network, not a classifier")
    meta, state = {}, None
    for kind, cfg, blobs in records:
        if kind == "meta":
            meta = cfg
        elif kind == CLASSIFIER:
            state = ClassifierState(Stage2Config(**cfg["config"]), blobs["w"], blobs["theta_adapt"],
                                    cfg["n_classes"])
            if "labels" in cfg:
                state.labels = np.array(cfg["labels"], np.int64)
                state.class_counts = np.array(cfg["class_counts"], np.int64).reshape(state.n_neurons, -1)
                state.specialization = blobs["specialization"].astype(np.float32)
    if state is None:
        raise FormatError(f"{path} has no classifier record")
    return state, meta
