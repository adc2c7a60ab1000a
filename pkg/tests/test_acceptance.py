"""Acceptance gate: ten headline criteria, one PASS/FAIL line each.

Every criterion records its measured values through ``report`` so the
terminal summary lists all ten lines even when pytest output is captured.
"""

from __future__ import annotations

import collections
import math
import time

import numpy as np

from oracles import check_layer_gradients, random_layer
from sparsesim import balance, cli, costmodel as cm, csb
from sparsesim.quantile import QuantileEstimator
from sparsesim.workload import PHASES, Phase, toy_network

NET = toy_network(32)
RESULTS: dict[int, tuple[bool, str, str]] = {}
TITLES = {
    1: "CSB codec soundness",
    2: "quantile estimator accuracy",
    3: "selection fidelity",
    4: "decay neutrality",
    5: "gradient correctness",
    6: "load balancing",
    7: "cost-model sanity",
    8: "traffic invariant",
    9: "end-to-end energy and speedup",
    10: "determinism",
}
WARMUP = 200  # first tenth of the 2000-iteration toy run


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {TITLES[n]}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = (ok, TITLES[n], line)
    print(line)
    assert ok, line


# -- 1 ---------------------------------------------------------------------


def _block_multiset(t, order):
    return collections.Counter((c, blk.tobytes()) for c, blk in csb.iterate_blocks(t, order))


def test_criterion_01_csb_codec():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    failures = 0
    densities = (0.0, 0.05, 0.2, 0.5, 1.0)
    for i in range(1000):
        r, s = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        k, c = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        d = densities[i % len(densities)]
        vals = rng.standard_normal((k, c, r, s)).astype(np.float32)
        vals[vals == 0] = 1.0
        dense = np.where(rng.random(vals.shape) < d, vals, 0).astype(np.float32)
        t = csb.encode(dense, csb.BlockShape(r, s))
        ok = np.array_equal(csb.decode(t), dense)
        # dense oracle: one block per (k, c) kernel
        oracle = np.count_nonzero(dense, axis=(2, 3))
        ok &= all(csb.block_nnz(t, (kk, cc)) == oracle[kk, cc] for kk in range(k) for cc in range(c))
        ok &= _block_multiset(t, "c_major") == _block_multiset(t, "k_major")
        failures += not ok
    elapsed = time.perf_counter() - start
    report(1, failures == 0 and elapsed < 30.0, f"{failures} of 1000 tensors failed, {elapsed:.1f} s")


# -- 2 ---------------------------------------------------------------------


def test_criterion_02_quantile():
    start = time.perf_counter()
    errors = []
    for seed in range(10):
        xs = np.random.default_rng(seed).random(1_000_000)
        e = QuantileEstimator(q=0.9, q_hat=1e-6, rho=1e-3)
        e.feed(xs)
        exact = np.sort(xs)[int(np.ceil(0.9 * xs.size)) - 1]
        errors.append(abs(e.q_hat - exact))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    report(2, worst <= 0.02 and elapsed < 10.0, f"worst error {worst:.4f} over 10 seeds, {elapsed:.1f} s")


# -- 3, 4 -------------------------------------------------------------------


def test_criterion_03_selection_fidelity(sparse_run):
    steps = sparse_run.steps[WARMUP:]
    overlap = np.array([s.overlap for s in steps])
    density = np.array([s.density for s in steps])
    target = sparse_run.config.target_density
    ok = overlap.min() >= 0.90 and density.max() <= 1.45 * target
    report(3, ok, f"min overlap {overlap.min():.4f}, mean {overlap.mean():.4f} after iteration {WARMUP}; "
                  f"max density {density.max():.4f} vs bound {1.45 * target:.4f}")


def test_criterion_04_decay_neutrality(sparse_run, nodecay_run):
    a, b = sparse_run.final_accuracy, nodecay_run.final_accuracy
    report(4, abs(a - b) <= 0.01, f"decayed {a:.4f}, no decay {b:.4f}, gap {abs(a - b) * 100:.2f} points")


# -- 5 ---------------------------------------------------------------------


def test_criterion_05_gradients():
    rng = np.random.default_rng(55)
    bad = collections.Counter()
    for _ in range(50):
        for name, ok in check_layer_gradients(random_layer(rng), rng).items():
            bad[name] += not ok
    total = sum(bad.values())
    report(5, total == 0, ", ".join(f"{k} {v} failures" for k, v in sorted(bad.items())) + " over 50 layers")


# -- 6 ---------------------------------------------------------------------


def _matchings(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for i, other in enumerate(rest):
        for m in _matchings(rest[:i] + rest[i + 1:]):
            yield [(first, other)] + m


def test_criterion_06_load_balancing(final_snapshot):
    rng = np.random.default_rng(66)
    suboptimal = 0
    for _ in range(400):
        n = 2 * int(rng.integers(1, 5))
        loads = rng.integers(0, 100, size=n).tolist()
        rule = max(loads[a] + loads[b] for a, b in balance.pair_order(loads))
        best = min(max(loads[a] + loads[b] for a, b in m) for m in _matchings(list(range(n))))
        suboptimal += rule != best
    snap = final_snapshot
    kw = dict(trace=False)
    bal = cm.network_cost(NET, "KN", snap.weights, snap.iacts, balanced=True, **kw)
    unbal = cm.network_cost(NET, "KN", snap.weights, snap.iacts, balanced=False, **kw)
    ob = np.concatenate([r.overheads for r in bal.rows])
    ou = np.concatenate([r.overheads for r in unbal.rows])
    reduction = ou.max() / ob.max() if ob.max() > 0 else float("inf")
    shape = f"worst {ob.max():.3f} (target <= 0.30), {np.mean(ob < 0.10):.0%} of waves below 0.10 (target >= 80%)"
    ok = suboptimal == 0 and reduction >= 2.0
    report(6, ok, f"pairing suboptimal on {suboptimal} of 400 waves; max overhead {ou.max():.3f} -> {ob.max():.3f}, "
                  f"reduction {reduction:.2f}x (gate >= 2x); reported only: {shape}")


# -- 7 ---------------------------------------------------------------------


def test_criterion_07_cost_model(final_snapshot):
    snap = final_snapshot
    notes, ok = [], True

    dense = cm.ideal_cost(NET, 1.0)
    sparse = cm.ideal_cost(NET, 5.0)
    fw = [dense.cycles[(l.name, "fw")] / sparse.cycles[(l.name, "fw")] for l in NET.weighted_layers]
    a = all(abs(s / 5.0 - 1) <= 0.05 for s in fw)
    notes.append(f"(a) ideal fw speedup {min(fw):.3f}-{max(fw):.3f} at 5x")

    costs = {(m, b): cm.network_cost(NET, m, snap.weights, snap.iacts, balanced=b)
             for m in cm.MAPPING_NAMES for b in (True, False)}
    spread = {}
    for b in (True, False):
        e = [costs[(m, b)].energy() for m in cm.MAPPING_NAMES]
        spread[b] = max(e) / min(e) - 1
    b_ok = max(spread.values()) < 0.05
    notes.append(f"(b) energy spread {spread[True]:.1%} balanced, {spread[False]:.1%} unbalanced")

    kn = costs[("KN", True)].cycles()
    others = {f"{m}{'' if b else '-u'}": c.cycles() for (m, b), c in costs.items() if (m, b) != ("KN", True)}
    c_ok = all(kn <= v for v in others.values())
    notes.append(f"(c) KN balanced {kn:.0f} cycles, next best {min(others.values()):.0f}")

    small = big = 0
    for layer in NET.weighted_layers:
        if layer.K < 32 or layer.N < 32:
            continue
        for ph in PHASES:
            w, x = snap.weights[layer.name], snap.iacts[layer.name]
            small += cm.phase_cost(layer, cm.best_mapping(layer, "KN"), ph, w, x, True, trace=False).cycles
            big += cm.phase_cost(layer, cm.best_mapping(layer, "KN", cm.SCALED_ARRAY), ph, w, x, True,
                                 trace=False).cycles
    scaling = small / big
    d_ok = scaling >= 3.8
    notes.append(f"(d) 16x16 -> 32x32 scaling {scaling:.2f}x (gate >= 3.8x)")
    ok = a and b_ok and c_ok and d_ok
    report(7, ok, "; ".join(notes))


# -- 8 ---------------------------------------------------------------------


def _busy_rows(layer, mapping) -> int:
    size = getattr(layer, mapping.rows_dim)
    return min(mapping.array.rows, math.ceil(size / mapping.tiles[mapping.rows_dim]))


def test_criterion_08_traffic(final_snapshot):
    snap = final_snapshot
    kn_equal = ck_more = ck_total = 0
    checked = 0
    single_row = []
    for layer in NET.weighted_layers:
        w, x = snap.weights[layer.name], snap.iacts[layer.name]
        for ph in (Phase.FORWARD, Phase.BACKWARD):
            m = cm.best_mapping(layer, "KN")
            b = cm.phase_cost(layer, m, ph, w, x, True)
            u = cm.phase_cost(layer, m, ph, w, x, False)
            checked += 1
            kn_equal += np.array_equal(b.trace.multicast, u.trace.multicast)
            m = cm.best_mapping(layer, "CK")
            b = cm.phase_cost(layer, m, ph, w, x, True)
            u = cm.phase_cost(layer, m, ph, w, x, False)
            if b.mode != "cross" or b.cycles >= u.cycles:
                continue  # no wave was re-paired
            if _busy_rows(layer, m) < 2:
                # every busy PE sits in one row, so the exchange never leaves it
                single_row.append(f"{layer.name} {ph.value}")
                continue
            ck_total += 1
            ck_more += (b.trace.multicast.sum() + b.trace.unicast.sum()
                        > u.trace.multicast.sum() + u.trace.unicast.sum())
    ok = kn_equal == checked and ck_total > 0 and ck_more == ck_total
    report(8, ok, f"KN multicast per wave equal in {kn_equal} of {checked} phases; "
                  f"CK cross traffic higher in {ck_more} of {ck_total} phases re-paired across rows; "
                  f"single-row phases not counted: {', '.join(single_row) or 'none'}")


# -- 9 ---------------------------------------------------------------------


def test_criterion_09_headline(final_snapshot):
    snap = final_snapshot
    energy = cm.EnergyTable()
    base_name, dense = cm.dense_baseline(NET, energy)
    sparse = cm.network_cost(NET, "KN", snap.weights, snap.iacts, energy, balanced=True)
    er = dense.energy() / sparse.energy()
    sp = dense.cycles() / sparse.cycles()
    report(9, 2.0 <= er <= 3.5 and 2.0 <= sp <= 4.0,
           f"energy reduction {er:.2f}x (band 2-3.5), speedup {sp:.2f}x (band 2-4) vs dense {base_name}")


# -- 10 --------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    short = ["--iterations", "60", "--batch", "16", "--eval-every", "20", "--snapshot-every", "30", "--oracle",
             "--seed", "11", "--quiet"]
    codes = [cli.main(["--root", str(tmp_path), "train", *short, "--out", f"t{i}"]) for i in range(2)]
    codes += [cli.main(["--root", str(tmp_path), "simulate", "--masks", f"t{i}", "--batch", "16", "--mappings",
                        "all", "--out", f"s{i}", "--quiet"]) for i in range(2)]
    compared = differ = 0
    for a, b in (("t0", "t1"), ("s0", "s1")):
        files = sorted(p.relative_to(tmp_path / a) for p in (tmp_path / a).rglob("*")
                       if p.is_file() and p.name != "manifest.json")
        for f in files:
            compared += 1
            other = tmp_path / b / f
            differ += not other.is_file() or (tmp_path / a / f).read_bytes() != other.read_bytes()
    ok = codes == [0, 0, 0, 0] and differ == 0 and compared > 0
    report(10, ok, f"{compared} output files compared across two train and two simulate runs, {differ} differ")
