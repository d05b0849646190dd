import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridsnn import ann, snn
from hybridsnn.layers import AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, QCFS, ReLU
from hybridsnn.network import Network

F32 = np.float32


def test_hand_stepped_spike_times():
    # theta=1, v(0)=0.5, constant input 0.4: v = 0.9, 1.3->0.3, 0.7, 1.1->0.1, 0.5, 0.9, 1.3->0.3
    state = snn.IFLayerState.start(1.0, (1, 1), v_init=0.5)
    times = [t for t in range(1, 9) if snn.if_step(state, np.array([[0.4]], F32))[0, 0]]
    assert times == [2, 4, 7]
    assert state.spike_count.tolist() == [3]


def test_soft_reset_keeps_residual():
    state = snn.IFLayerState.start(1.0, (1, 1), v_init=0.0)
    snn.if_step(state, np.array([[2.5]], F32))
    assert state.v[0, 0] == pytest.approx(1.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 4.0), st.lists(st.floats(0, 1), min_size=1, max_size=60))
def test_charge_conservation(theta, fracs):
    theta = float(F32(theta))
    x = np.array(fracs, F32) * F32(theta)
    state = snn.IFLayerState.start(theta, (1, 1), v_init=0.5)
    for xt in x:
        snn.if_step(state, np.array([[xt]], F32))
    delivered = state.spike_count[0] * theta
    injected = 0.5 * theta + float(x.astype(np.float64).sum())
    # non-negative input never exceeding theta leaves 0 <= v(T) < theta
    assert injected - theta - 1e-3 * (1 + injected) <= delivered <= injected + 1e-3 * (1 + injected)


def _tiny_ann(seed=0):
    rng = np.random.default_rng(seed)
    return Network([Conv2d(1, 2, 3, padding=1, rng=rng), QCFS(2.0, 8), AvgPool2d(2), Flatten(),
                    Linear(8, 4, rng=rng), QCFS(2.0, 8), Linear(4, 3, rng=rng)], (1, 4, 4))


def test_convert_thresholds_and_weights():
    net = _tiny_ann()
    out = snn.convert(net)
    assert out.mode == "snn"
    ifs = [l for l in out.layers if l.kind == "if"]
    assert len(ifs) == 2 and all(l.theta == 2.0 for l in ifs)
    state = snn.IFLayerState.start(ifs[0].theta, (1, 1), ifs[0].v_init)
    assert state.v[0, 0] == 1.0
    for a, b in zip(net.layers, out.layers):
        for k in a.params:
            if a.kind != "qcfs":
                assert np.array_equal(a.params[k], b.params[k])


def test_convert_rejects_unfolded_batchnorm_and_relu():
    with pytest.raises(ValueError, match="folded"):
        snn.convert(Network([Conv2d(1, 1, 1), BatchNorm2d(1), QCFS()], (1, 2, 2)))
    with pytest.raises(ValueError, match="layer 1"):
        snn.convert(Network([Conv2d(1, 1, 1), ReLU()], (1, 2, 2)))
    with pytest.raises(ValueError):
        snn.convert(Network([MaxPool2d(2)], (1, 2, 2), mode="snn"))


def test_snn_output_approaches_ann():
    net = _tiny_ann()
    x = np.random.default_rng(1).uniform(0, 1, (6, 1, 4, 4)).astype(F32)
    rec = snn.forward_snn(snn.convert(net), x, 512)
    assert np.abs(rec.output - net.forward(x)).max() < 0.1


def test_timestep_validation():
    s = snn.convert(_tiny_ann())
    with pytest.raises(ValueError, match="t_b"):
        snn.forward_snn(s, np.zeros((1, 1, 4, 4), F32), 0)
    with pytest.raises(ValueError, match="snn"):
        snn.forward_snn(_tiny_ann(), np.zeros((1, 1, 4, 4), F32), 4)


def test_record_at_matches_separate_runs_and_sops_grow():
    s = snn.convert(_tiny_ann())
    x = np.random.default_rng(2).uniform(0, 1, (3, 1, 4, 4)).astype(F32)
    recs = snn.forward_snn(s, x, 16, record_at=[4, 8, 16])
    sops = [recs[t].sops for t in (4, 8, 16)]
    assert sops == sorted(sops) and sops[-1] > 0
    single = snn.forward_snn(s, x, 8)
    assert np.array_equal(single.spike_totals, recs[8].spike_totals)
    assert np.array_equal(single.output, recs[8].output)


def test_feature_rates_in_unit_interval():
    backbone = ann.detach_head(snn.convert(_tiny_ann()))
    rec = snn.forward_snn(backbone, np.ones((2, 1, 4, 4), F32), 32)
    assert rec.predicted is None
    assert rec.rates.shape == (2, 8)
    assert rec.rates.min() >= 0 and rec.rates.max() <= 1


def test_accuracy_curve_rows():
    net = _tiny_ann()
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (10, 1, 4, 4)).astype(F32)
    y = net.forward(x).argmax(axis=1)
    rows = snn.accuracy_vs_timesteps(net, x, y, [8, 64, 256])
    assert [r["t_b"] for r in rows] == [0, 8, 64, 256]
    assert rows[0]["accuracy"] == 1.0 and rows[0]["sops_per_sample"] == 0.0
    with pytest.raises(ValueError):
        snn.accuracy_vs_timesteps(net, x, y, [64, 8])
