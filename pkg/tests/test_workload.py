from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesim import workload as wl
from sparsesim.workload import LayerShape, Phase


def naive_backward_macs(layer: LayerShape) -> int:
    """Count (x, r, p) triples of the transposed convolution that hit a real dy entry."""
    def pairs(X, R, P):
        return sum(
            1
            for x, r, p in itertools.product(range(X), range(R), range(P))
            if p * layer.stride + r - layer.pad == x
        )

    return layer.N * layer.C * layer.K * pairs(layer.X, layer.R, layer.P) * pairs(layer.Y, layer.S, layer.Q)


def test_dense_macs_examples():
    one = LayerShape("conv", 1, 1, 1)
    assert wl.dense_macs(one, Phase.FORWARD) == 1
    conv = LayerShape("conv", N=2, C=3, K=4, R=3, S=3, P=5, Q=5)
    assert wl.dense_macs(conv, Phase.FORWARD) == 5400
    fc = LayerShape("fc", N=1, C=64, K=10)
    assert wl.dense_macs(fc, Phase.FORWARD) == 640


def test_sparse_macs_examples():
    conv = LayerShape("conv", N=2, C=3, K=4, R=3, S=3, P=5, Q=5)
    assert wl.sparse_macs(conv, Phase.FORWARD, 0.2) == 1080
    assert wl.sparse_macs(conv, Phase.BACKWARD, 1.0) == wl.dense_macs(conv, Phase.BACKWARD)
    with pytest.raises(ValueError):
        wl.sparse_macs(conv, Phase.FORWARD, 1.5)
    with pytest.raises(ValueError):
        wl.sparse_macs(conv, Phase.FORWARD, -0.1)


def test_wu_density_bounds_idealized_speedup():
    net = wl.vgg_mini_network()
    dense = net.total_dense_macs()
    fwbw = sum(wl.sparse_macs(l, ph, 0.2) for l in net for ph in (Phase.FORWARD, Phase.BACKWARD))
    wu = sum(wl.dense_macs(l, Phase.WEIGHT_UPDATE) for l in net)
    # weight sparsity alone cannot reach 2.6x when the weight update stays dense
    assert dense / (fwbw + wu) < 2.6
    wu_sparse = sum(wl.sparse_macs(l, Phase.WEIGHT_UPDATE, 0.5) for l in net)
    assert dense / (fwbw + wu_sparse) > 2.6


@st.composite
def layers(draw):
    r = draw(st.integers(1, 5))
    p = draw(st.integers(1, 6))
    stride = draw(st.sampled_from([1, 2]))
    pad = draw(st.integers(0, r - 1))
    # keep the input extent positive
    while pad and (p - 1) * stride + r - 2 * pad < 1:
        pad -= 1
    n, c, k = (draw(st.integers(1, 4)) for _ in range(3))
    return LayerShape("conv", n, c, k, r, r, p, p, stride, pad)


@settings(max_examples=200, deadline=None)
@given(layers())
def test_backward_macs_match_loop_oracle(layer):
    assert wl.dense_macs(layer, Phase.BACKWARD) == naive_backward_macs(layer)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 6))
def test_stride1_pad0_phases_equal(n, c, k, r, p):
    layer = LayerShape("conv", n, c, k, r, r, p, p)
    counts = {wl.dense_macs(layer, ph) for ph in wl.PHASES}
    assert len(counts) == 1


@settings(max_examples=100, deadline=None)
@given(layers(), st.floats(0, 1), st.floats(0, 1))
def test_sparse_macs_monotone(layer, a, b):
    lo, hi = sorted((a, b))
    assert wl.sparse_macs(layer, Phase.FORWARD, lo) <= wl.sparse_macs(layer, Phase.FORWARD, hi)
    assert wl.sparse_macs(layer, Phase.FORWARD, 1.0) == wl.dense_macs(layer, Phase.FORWARD)


def test_pool_is_mac_free():
    pool = LayerShape("pool", 2, 4, 4, 2, 2, 4, 4, 2, 0)
    assert all(wl.dense_macs(pool, ph) == 0 for ph in wl.PHASES)
    assert not pool.has_weights


@pytest.mark.parametrize("kw", [
    dict(kind="deconv", N=1, C=1, K=1),
    dict(kind="conv", N=0, C=1, K=1),
    dict(kind="conv", N=1, C=1, K=1, stride=3),
    dict(kind="conv", N=1, C=1, K=1, R=3, S=3, pad=3),
    dict(kind="fc", N=1, C=4, K=2, R=3),
    dict(kind="pool", N=1, C=2, K=3, R=2, S=2),
])
def test_invalid_layers_rejected(kw):
    with pytest.raises(ValueError):
        LayerShape(**kw)


def test_presets_chain_and_serialize(tmp_path):
    for name in wl.PRESETS:
        net = wl.preset(name, batch=8)
        assert all(l.N == 8 for l in net)
        path = tmp_path / f"{name}.json"
        wl.save_network(net, path)
        assert wl.load_network(path) == net
        assert wl.resolve_network(str(path)) == net
    with pytest.raises(KeyError):
        wl.preset("resnet")


def test_network_rejects_mismatched_chain():
    a = LayerShape("conv", 1, 1, 4, 3, 3, 8, 8, pad=1, name="a")
    b = LayerShape("conv", 1, 5, 4, 3, 3, 8, 8, pad=1, name="b")
    with pytest.raises(ValueError):
        wl.Network("bad", (a, b))
    with pytest.raises(ValueError):
        wl.Network("dup", (a, a))


def test_toy_shapes():
    net = wl.toy_network()
    assert [l.name for l in net.weighted_layers] == ["conv1", "conv2", "conv3", "fc"]
    assert net.layer("conv2").weight_shape == (64, 32, 3, 3)
    assert net.layer("conv1").iact_shape == (32, 1, 16, 16)
