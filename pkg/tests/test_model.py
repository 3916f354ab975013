import numpy as np
import pytest

from qsegment import tensor as T
from qsegment.model import (
    LayerSpec, build_model, default_specs, forward_float, layer_table, mac_count, run_graph,
    RecordingOps, site_names, validate_specs,
)
from oracles import conv_macs_by_hand, qsegment_param_count

# independent per-layer count for the default widths
N_STAR = 100_433


def test_default_layer_channels():
    m = build_model(0)
    assert len(m.specs) == 8
    chain = [m.specs[0].c_in] + [s.c_out for s in m.specs]
    assert chain == [3, 16, 32, 64, 64, 32, 16, 16, 1]
    assert [s.location for s in m.specs] == ["encoder"] * 3 + ["intermediate"] + ["decoder"] * 3 + ["head"]


def test_parameter_count():
    assert qsegment_param_count() == N_STAR
    assert build_model(0).parameter_count() == N_STAR
    assert 94_000 <= N_STAR <= 114_000


def test_parameter_count_other_widths():
    m = build_model(0, widths=(4, 8, 12))
    assert m.parameter_count() == qsegment_param_count((4, 8, 12))


def test_build_is_deterministic():
    a, b = build_model(3), build_model(3)
    for (ka, va), (kb, vb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()
    c = build_model(4)
    assert not np.array_equal(a.head.weight, c.head.weight)


def test_init_scheme():
    m = build_model(0)
    w = m.blocks[1].conv3x3.weight
    bound = np.sqrt(6 / (16 * 9))
    assert np.abs(w).max() <= bound
    assert np.all(m.blocks[1].conv3x3.bias == 0)
    assert np.all(m.blocks[1].bn1.gamma == 1) and np.all(m.blocks[1].bn1.beta == 0)
    assert m.blocks[2].dw3x3.groups == 64


def test_forward_shape_and_determinism():
    m = build_model(0)
    x = np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32)
    a = forward_float(m, x)
    assert a.shape == (1, 1, 64, 64)
    assert a.tobytes() == forward_float(m, x).tobytes()


@pytest.mark.parametrize("hw", [(8, 8), (16, 24), (40, 8)])
def test_forward_preserves_resolution(hw):
    m = build_model(1, widths=(4, 8, 8))
    x = np.random.default_rng(1).random((2, 3) + hw)
    assert forward_float(m, x).shape == (2, 1) + hw


def test_zero_head_gives_zero_logits():
    m = build_model(0)
    m.head.weight[...] = 0
    m.head.bias[...] = 0
    x = np.random.default_rng(2).random((2, 3, 32, 32))
    assert np.all(forward_float(m, x) == 0)


def test_forward_errors():
    m = build_model(0)
    with pytest.raises(T.ShapeError):
        forward_float(m, np.zeros((1, 3, 12, 16)))
    with pytest.raises(T.ShapeError):
        forward_float(m, np.zeros((1, 1, 16, 16)))


def test_skip_shapes_agree():
    m = build_model(0)
    ops = RecordingOps()
    run_graph(m, np.random.default_rng(3).random((1, 3, 32, 32)).astype(np.float32), ops)
    s = ops.sites
    assert s["b3.out"].shape == s["b5.in"].shape == (1, 64, 8, 8)
    assert s["b2.out"].shape == s["b6.in"].shape == (1, 32, 16, 16)
    assert s["b1.out"].shape == s["b7.in"].shape == (1, 16, 32, 32)
    assert list(s) == site_names()


def test_invalid_topology_rejected():
    specs = default_specs()
    bad = specs[:4] + [LayerSpec(5, "decoder", "unpool_convblock", 64, 48)] + specs[5:]
    with pytest.raises(ValueError):
        validate_specs(bad)


def test_mac_count_matches_hand_sum():
    m = build_model(0)
    assert mac_count(m, 64, 64) == conv_macs_by_hand(64, 64)
    assert mac_count(m, 64, 64) == mac_count(m, 64, 64)
    rows = layer_table(m, 64, 64)
    assert [r["out_shape"] for r in rows][:4] == [(16, 32, 32), (32, 16, 16), (64, 8, 8), (64, 8, 8)]
    assert sum(r["params"] for r in rows) == m.parameter_count()
    with pytest.raises(T.ShapeError):
        mac_count(m, 60, 64)
