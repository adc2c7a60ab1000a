from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesim import balance
from sparsesim import costmodel as cm
from sparsesim.workload import PHASES, LayerShape, Phase, dense_macs, toy_network

NET = toy_network(32)


def spread_masks(seed=0, base=0.2, cv=0.5):
    """Weights whose per-filter density scatters around ``base``."""
    rng = np.random.default_rng(seed)
    out = {}
    for layer in NET.weighted_layers:
        shape = layer.weight_shape
        p = np.clip(rng.normal(base, base * cv, size=(shape[0],) + (1,) * (len(shape) - 1)), 0.01, 1)
        out[layer.name] = (rng.random(shape) < p).astype(np.float32)
    return out


def test_four_mappings_with_legal_tiles():
    for layer in NET.weighted_layers:
        maps = cm.enumerate_mappings(layer)
        assert [m.name for m in maps] == list(cm.MAPPING_NAMES)
        for m in maps:
            assert m.feasible
            assert cm.rf_footprint(layer, m.tiles) == m.rf_words <= m.array.rf_words


@st.composite
def conv_layers(draw):
    r = draw(st.sampled_from([1, 3, 5]))
    p = draw(st.integers(1, 40))
    pad = draw(st.integers(0, (r - 1) // 2))
    return LayerShape("conv", draw(st.integers(1, 64)), draw(st.integers(1, 300)), draw(st.integers(1, 300)),
                      r, r, p, p, 1, pad)


@settings(max_examples=60, deadline=None)
@given(conv_layers(), st.sampled_from(["16x16", "8x8", "32x32"]))
def test_capacity_audit(layer, array):
    arr = cm.ArrayConfig.parse(array)
    for m in cm.enumerate_mappings(layer, arr):
        if m.feasible:
            assert cm.rf_footprint(layer, m.tiles) <= arr.rf_words
            assert 0 < m.utilization <= 1


def test_k1_layer_low_utilization():
    layer = LayerShape("conv", 32, 16, 1, 3, 3, 8, 8, pad=1)
    m = cm.best_mapping(layer, "KN")
    assert m.feasible and m.low_utilization


def test_infeasible_mapping():
    arr = cm.ArrayConfig(rf_bytes=16)
    layer = NET.layer("conv2")
    m = cm.best_mapping(layer, "KN", arr)
    assert not m.feasible and m.reason
    with pytest.raises(cm.InfeasibleMapping):
        cm.phase_cost(layer, m, Phase.FORWARD)
    with pytest.raises(cm.InfeasibleMapping):
        cm.dense_baseline(NET, array=arr)


def test_array_config():
    assert cm.ArrayConfig.parse("32x32") == cm.SCALED_ARRAY
    assert cm.ArrayConfig.parse("16x16") == cm.DEFAULT_ARRAY
    assert cm.SCALED_ARRAY.pes == 4 * cm.DEFAULT_ARRAY.pes
    with pytest.raises(ValueError):
        cm.ArrayConfig.parse("16by16")
    with pytest.raises(ValueError):
        cm.ArrayConfig(rows=0)


def test_energy_table(tmp_path):
    with pytest.raises(ValueError):
        cm.EnergyTable(e_glb_access=0.5)
    table = cm.EnergyTable(e_mac=3.0, e_dram_access=200.0)
    path = tmp_path / "e.json"
    path.write_text(json.dumps(table.to_dict()))
    assert cm.EnergyTable.load(path) == table


@pytest.mark.parametrize("name", cm.MAPPING_NAMES)
def test_full_density_balancing_is_neutral(name):
    for layer in NET.weighted_layers:
        m = cm.best_mapping(layer, name)
        for ph in PHASES:
            a = cm.phase_cost(layer, m, ph, None, 1.0, balanced=True)
            b = cm.phase_cost(layer, m, ph, None, 1.0, balanced=False)
            assert a.cycles == b.cycles == a.dense_cycles
            assert np.array_equal(a.trace.multicast, b.trace.multicast)


@pytest.mark.parametrize("d", [1 / 3, 2 / 9, 5 / 9])
@pytest.mark.parametrize("name", cm.MAPPING_NAMES)
def test_uniform_sparsity_scales_cycles(name, d):
    # densities that are whole multiples of a 3x3 kernel spread exactly evenly
    for layer in NET.weighted_layers:
        if layer.kind != "conv":
            continue
        m = cm.best_mapping(layer, name)
        mask = cm.uniform_mask(layer.weight_shape, d)
        for ph in PHASES:
            for bal in (False, True):
                c = cm.phase_cost(layer, m, ph, mask, d if ph is Phase.WEIGHT_UPDATE else 1.0, bal, trace=False)
                assert abs(c.cycles - d * c.dense_cycles) <= c.waves


@pytest.mark.parametrize("name", cm.MAPPING_NAMES)
def test_cycles_lower_bound_and_accounting(name):
    masks = spread_masks(1)
    e = cm.EnergyTable()
    for layer in NET.weighted_layers:
        m = cm.best_mapping(layer, name)
        for ph in PHASES:
            c = cm.phase_cost(layer, m, ph, masks[layer.name], 0.4, True, e)
            assert c.cycles >= math.ceil(c.macs / m.array.pes - 1e-6)
            assert c.cycles <= c.dense_cycles * (1 + m.array.cross_penalty)
            per = e.per_event()
            assert c.total_energy == pytest.approx(sum(c.accesses[k] * per[k] for k in per), rel=1e-12)
            assert set(c.energy) == {"mac", "rf", "glb", "dram"}
            assert np.all(c.overheads >= 0) and c.overheads.size == c.waves


def test_dense_against_itself():
    name, dense = cm.dense_baseline(NET)
    again = cm.network_cost(NET, name, None, None, balanced=False)
    for a, b in zip(dense.rows, again.rows):
        assert a.cycles == b.cycles and a.total_energy == b.total_energy
        assert a.dense_cycles == a.cycles


def test_uniform_five_x_speedup():
    masks = {l.name: cm.uniform_mask(l.weight_shape, 0.2) for l in NET.weighted_layers}
    sparse = cm.network_cost(NET, "KN", masks, None, trace=False)
    dense = cm.network_cost(NET, "KN", None, None, trace=False)
    for ph in (Phase.FORWARD, Phase.BACKWARD):
        assert dense.cycles(ph) / sparse.cycles(ph) == pytest.approx(5.0, rel=0.05)


def test_ideal_cost_definitions():
    one = cm.ideal_cost(NET, 1.0)
    for layer in NET.weighted_layers:
        for ph in PHASES:
            assert one.cycles[(layer.name, ph.value)] == math.ceil(dense_macs(layer, ph) / 256)
    for s in (2, 4, 8):
        ideal = cm.ideal_cost(NET, float(s))
        for layer in NET.weighted_layers:
            key = (layer.name, "fw")
            assert one.cycles[key] / ideal.cycles[key] == s
    with pytest.raises(ValueError):
        cm.ideal_cost(NET, 0.5)


def test_wu_operand_density():
    layer = LayerShape("conv", 1, 1, 1, 3, 3, 4, 4, pad=1)
    # padded border windows see zeros: 10 of 12 (p, r) pairs per axis are real
    want = dense_macs(layer, Phase.BACKWARD) / dense_macs(layer, Phase.FORWARD)
    assert want == pytest.approx(100 / 144)
    assert cm.wu_operand_density(layer, 1.0) == pytest.approx(want)
    assert cm.wu_operand_density(layer, np.ones(layer.iact_shape)) == pytest.approx(want)
    assert cm.wu_operand_density(LayerShape("conv", 1, 1, 1, 3, 3, 4, 4), 1.0) == 1.0
    with pytest.raises(ValueError):
        cm.wu_operand_density(layer, 1.5)


def test_realistic_dominates_ideal(final_snapshot):
    snap = final_snapshot
    s = {l.name: 1 / snap.weights[l.name].density for l in NET.weighted_layers}
    act = {l.name: cm.wu_operand_density(l, snap.iacts[l.name]) for l in NET.weighted_layers}
    ideal = cm.ideal_cost(NET, s, act_density=act)
    for name in cm.MAPPING_NAMES:
        for r in cm.network_cost(NET, name, snap.weights, snap.iacts).rows:
            key = (r.layer, r.phase.value)
            assert r.cycles >= ideal.cycles[key]
            assert r.total_energy >= ideal.energy[key]


def test_cycle_dominance(final_snapshot):
    snap = final_snapshot
    kn_b = cm.network_cost(NET, "KN", snap.weights, snap.iacts, balanced=True, trace=False)
    kn_u = cm.network_cost(NET, "KN", snap.weights, snap.iacts, balanced=False, trace=False)
    ck_u = cm.network_cost(NET, "CK", snap.weights, snap.iacts, balanced=False, trace=False)
    for b, u, c in zip(kn_b.rows, kn_u.rows, ck_u.rows):
        assert b.cycles <= u.cycles <= c.cycles
    assert kn_b.cycles() < ck_u.cycles()


def test_traffic_invariants(final_snapshot):
    snap = final_snapshot
    for layer in NET.weighted_layers:
        for ph in (Phase.FORWARD, Phase.BACKWARD):
            m = cm.best_mapping(layer, "KN")
            b = cm.phase_cost(layer, m, ph, snap.weights[layer.name], snap.iacts[layer.name], True)
            u = cm.phase_cost(layer, m, ph, snap.weights[layer.name], snap.iacts[layer.name], False)
            assert np.array_equal(b.trace.multicast, u.trace.multicast)
            assert np.array_equal(b.trace.unicast, u.trace.unicast)
    layer = NET.layer("conv2")
    m = cm.best_mapping(layer, "CK")
    b = cm.phase_cost(layer, m, Phase.FORWARD, snap.weights["conv2"], snap.iacts["conv2"], True)
    u = cm.phase_cost(layer, m, Phase.FORWARD, snap.weights["conv2"], snap.iacts["conv2"], False)
    assert b.mode == "cross"
    assert b.trace.multicast.sum() + b.trace.unicast.sum() > u.trace.multicast.sum() + u.trace.unicast.sum()


@pytest.mark.parametrize("name,phase", [("KN", Phase.FORWARD), ("KN", Phase.BACKWARD),
                                        ("KN", Phase.WEIGHT_UPDATE), ("CK", Phase.WEIGHT_UPDATE),
                                        ("CN", Phase.FORWARD)])
def test_balance_waves_match_phase_cost(name, phase):
    """Object-level split+pair on extracted waves equals the array path."""
    rng = np.random.default_rng(2)
    masks = spread_masks(2)
    for layer in NET.weighted_layers:
        m = cm.best_mapping(layer, name)
        act = (rng.random(layer.iact_shape) < 0.4).astype(np.float32)
        if layer.kind == "fc":
            act = act.reshape(layer.N, layer.C, 1, 1)
        c = cm.phase_cost(layer, m, phase, masks[layer.name], act, True, trace=False)
        if c.mode is None:
            continue
        waves = cm.balance_waves(layer, m, phase, masks[layer.name], act)
        got = np.sort([balance.wave_overhead(w, balanced=True) for w in waves])
        assert np.allclose(got, np.sort(c.overheads), atol=1e-4)
        unbal = cm.phase_cost(layer, m, phase, masks[layer.name], act, False, trace=False)
        got_u = np.sort([balance.wave_overhead(w) for w in waves])
        assert np.allclose(got_u, np.sort(unbal.overheads), atol=1e-4)


def test_balance_waves_rejects_cross():
    with pytest.raises(ValueError):
        cm.balance_waves(NET.layer("conv2"), cm.best_mapping(NET.layer("conv2"), "CK"), Phase.FORWARD)
    with pytest.raises(ValueError):
        cm.balance_waves(NET.layer("conv2"), cm.best_mapping(NET.layer("conv2"), "PQ"), Phase.FORWARD)


def test_input_forms_agree():
    layer = NET.layer("conv2")
    m = cm.best_mapping(layer, "KN")
    mask = spread_masks(3)["conv2"]
    enc = cm.csb.encode(mask, cm.csb.weight_block("conv", mask.shape))
    a = cm.phase_cost(layer, m, Phase.FORWARD, mask, 1.0)
    b = cm.phase_cost(layer, m, Phase.FORWARD, enc, 1.0)
    assert a.cycles == b.cycles and a.total_energy == b.total_energy


def test_cycles_only_leaves_energy_undefined():
    layer = NET.layer("conv2")
    m = cm.best_mapping(layer, "CK")
    mask = spread_masks(5)["conv2"]
    full = cm.phase_cost(layer, m, Phase.FORWARD, mask, 0.5)
    quick = cm.phase_cost(layer, m, Phase.FORWARD, mask, 0.5, trace=False)
    assert quick.cycles == full.cycles and quick.trace is None
    assert math.isnan(quick.total_energy) and math.isfinite(full.total_energy)


def test_network_tables_and_csv():
    cost = cm.network_cost(NET, "KN", spread_masks(4), None)
    rows = cost.table()
    assert len(rows) == 3 * len(NET.weighted_layers)
    text = cm.to_csv(rows)
    assert text.splitlines()[0].startswith("layer,phase,mapping,balanced,cycles")
    assert len(text.splitlines()) == len(rows) + 1
    assert sum(cost.breakdown().values()) == pytest.approx(cost.energy())
    assert cost.cycles(Phase.FORWARD, "conv2") == cost.select(Phase.FORWARD, "conv2")[0].cycles
    assert cm.to_csv([]) == ""


def test_uniform_mask_is_even():
    mask = cm.uniform_mask((10, 10), 0.3)
    assert mask.sum() == 30
    run = mask.reshape(-1)
    for lo in range(0, 90, 7):
        assert abs(run[lo:lo + 10].sum() - 3) <= 1
