import struct

import numpy as np
import pytest

from hybridsnn import ann, modelio, snn, stdp
from hybridsnn.network import fold_batchnorm

F32 = np.float32


def _net():
    backbone = ann.surgery(ann.build_backbone((3, 8, 8), channels=(2, 4), pools=(2, 2), batch_norm=True))
    return ann.attach_head(backbone, ann.SupervisedHead.build(backbone.output_shape[0], 3, hidden=6))


def test_network_round_trip(tmp_path):
    net = _net()
    net.layers[1].buffers["running_mean"][:] = [0.1, -0.2]
    modelio.save_network(tmp_path / "m.spkf", net, {"class_names": ["a", "b", "c"]})
    back, meta = modelio.load_network(tmp_path / "m.spkf")
    assert meta == {"class_names": ["a", "b", "c"]}
    assert back.kinds() == net.kinds() and back.input_shape == net.input_shape
    for a, b in zip(net.layers, back.layers):
        assert a.config() == b.config()
        assert a.params.keys() == b.params.keys() and a.buffers.keys() == b.buffers.keys()
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
        for k in a.buffers:
            assert np.array_equal(a.buffers[k], b.buffers[k])
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8)).astype(F32)
    assert np.array_equal(back.forward(x), net.forward(x))


def test_snn_round_trip(tmp_path):
    s = snn.convert(fold_batchnorm(_net()))
    modelio.save_network(tmp_path / "s.spkf", s)
    back, meta = modelio.load_network(tmp_path / "s.spkf")
    assert back.mode == "snn" and meta == {}
    x = np.ones((1, 3, 8, 8), F32)
    assert np.array_equal(snn.forward_snn(back, x, 8).output, snn.forward_snn(s, x, 8).output)


def test_saves_are_byte_identical(tmp_path):
    net = _net()
    modelio.save_network(tmp_path / "a.spkf", net, {"k": 1})
    modelio.save_network(tmp_path / "b.spkf", net.copy(), {"k": 1})
    assert (tmp_path / "a.spkf").read_bytes() == (tmp_path / "b.spkf").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.spkf"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(modelio.FormatError, match="magic"):
        modelio.load_network(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "v.spkf"
    modelio.save_network(p, _net())
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    p.write_bytes(bytes(raw))
    with pytest.raises(modelio.VersionError):
        modelio.load_network(p)


def test_truncated_file(tmp_path):
    p = tmp_path / "t.spkf"
    modelio.save_network(p, _net())
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(modelio.FormatError):
        modelio.load_network(p)


def test_header_layout(tmp_path):
    p = tmp_path / "h.spkf"
    modelio.save_network(p, _net())
    raw = p.read_bytes()
    assert raw[:4] == b"SPKF"
    assert struct.unpack("<6I", raw[4:28]) == (1, 0, 3, 3, 8, 8)


def test_classifier_round_trip(tmp_path):
    cfg = stdp.Stage2Config(n_neurons=4, exc=30.0)
    state = stdp.ClassifierState.init(6, cfg)
    state.theta_adapt[:] = [0.1, 0.2, 0.0, 0.05]
    stdp.assign_labels(state, np.array([[3, 0, 1, 0], [0, 2, 1, 0]]), np.array([0, 1]), 2)
    p = tmp_path / "c.spkf"
    modelio.save_classifier(p, state, {"class_names": ["x", "y"]})
    back, meta = modelio.load_classifier(p)
    assert meta == {"class_names": ["x", "y"]} and back.cfg == cfg
    assert np.array_equal(back.w, state.w) and np.array_equal(back.theta_adapt, state.theta_adapt)
    assert back.labels.tolist() == state.labels.tolist()
    assert np.array_equal(back.specialization, state.specialization)
    assert np.array_equal(back.class_counts, state.class_counts)
    with pytest.raises(modelio.FormatError):
        modelio.load_network(p)
    modelio.save_network(tmp_path / "n.spkf", _net())
    with pytest.raises(modelio.FormatError):
        modelio.load_classifier(tmp_path / "n.spkf")
