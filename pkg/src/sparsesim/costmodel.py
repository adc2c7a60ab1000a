"""Analytical latency and energy model of a 2-D PE array training a network.

A mapping binds two of the loop dimensions (N, C, K, P, Q) to the array
rows and columns; every other dimension is temporal.  Each PE owns an
RF-sized tile of the operation space (R and S always whole).  The array
executes synchronous waves, one tile per PE, so a wave costs as many cycles
as its busiest PE has non-zero MACs.

Operands are grouped into three classes by the loop dimensions they depend
on: ``w`` (K, C), ``x`` (N, C and the input halo of P, Q) and ``y``
(N, K, P, Q).  Forward reads w and x and writes y, backward reads w and
dL/dy and writes dL/dx, weight update reads x and dL/dy and writes dL/dW.
A class that depends on only the row dimension is multicast along a row
(``H``), only the column dimension along a column (``V``), both is unicast
(``U``) and neither is broadcast (``B``).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping as TMapping

import numpy as np

from . import balance, csb
from .workload import PHASES, LayerShape, Network, Phase, dense_macs

DIMS = ("N", "C", "K", "P", "Q")
CLASS_DIMS = {"w": frozenset("KC"), "x": frozenset("NCPQ"), "y": frozenset("NKPQ")}
MAPPINGS = {"CK": ("C", "K"), "KN": ("K", "N"), "CN": ("C", "N"), "PQ": ("P", "Q")}
MAPPING_NAMES = tuple(MAPPINGS)

# (inputs, output) operand classes per phase
PHASE_CLASSES = {
    Phase.FORWARD: (("w", "x"), "y"),
    Phase.BACKWARD: (("w", "y"), "x"),
    Phase.WEIGHT_UPDATE: (("x", "y"), "w"),
}
SPARSE_CLASS = {Phase.FORWARD: "w", Phase.BACKWARD: "w", Phase.WEIGHT_UPDATE: "x"}
# spatial dimension along which the sparse operand is halved, per mapping/phase;
# "cross" pairs halves across the whole array, None leaves the wave as is
BALANCE_PLAN = {
    ("CK", "fw"): ("K", "cross"), ("CK", "bw"): ("K", "cross"), ("CK", "wu"): ("C", "row"),
    ("KN", "fw"): ("K", "row"), ("KN", "bw"): ("K", "row"), ("KN", "wu"): ("N", "col"),
    ("CN", "fw"): ("C", "row"), ("CN", "bw"): ("C", "row"), ("CN", "wu"): ("C", "cross"),
    ("PQ", "fw"): (None, None), ("PQ", "bw"): (None, None), ("PQ", "wu"): (None, None),
}
# metadata words per CSB block: a 64-bit mask and a 32-bit pointer
META_WORDS = 3


class InfeasibleMapping(ValueError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 16
    cols: int = 16
    rf_bytes: int = 1024
    glb_bytes: int = 128 * 1024
    word_bytes: int = 4
    # extra fraction of a wave's cycles when halves are exchanged across the
    # whole array (unicast re-routing and duplicated iact buffering)
    cross_penalty: float = 0.1
    wave_overhead_cycles: int = 0

    def __post_init__(self):
        if min(self.rows, self.cols, self.rf_bytes, self.glb_bytes, self.word_bytes) < 1:
            raise ValueError("array extents and buffer sizes must be positive")
        if self.cross_penalty < 0 or self.wave_overhead_cycles < 0:
            raise ValueError("penalties must be non-negative")

    @property
    def pes(self) -> int:
        return self.rows * self.cols

    @property
    def rf_words(self) -> int:
        return self.rf_bytes // self.word_bytes

    @property
    def glb_words(self) -> int:
        return self.glb_bytes // self.word_bytes

    def scaled(self, factor: int = 2) -> "ArrayConfig":
        """Each array side times ``factor``, global buffer doubled."""
        return replace(self, rows=self.rows * factor, cols=self.cols * factor, glb_bytes=self.glb_bytes * 2)

    @classmethod
    def parse(cls, text: str, **kw) -> "ArrayConfig":
        """``"16x16"`` style shorthand; buffers follow the scaling preset."""
        try:
            r, c = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"array must look like 16x16, got {text!r}") from None
        base = cls(**kw)
        # the buffer doubles whenever the PE count quadruples
        glb = int(round(base.glb_bytes * math.sqrt(r * c / base.pes)))
        return replace(base, rows=r, cols=c, glb_bytes=glb)


DEFAULT_ARRAY = ArrayConfig()
SCALED_ARRAY = DEFAULT_ARRAY.scaled()


@dataclass(frozen=True)
class EnergyTable:
    """Energy per event in pJ for FP32 operands.

    Ratios follow the commonly cited hierarchy for a 1 KB register file,
    a ~100 KB SRAM buffer and off-chip DRAM relative to one FP32 MAC.
    Absolute values are configuration, not measurements.
    """

    e_mac: float = 4.0
    e_rf_access: float = 1.0
    e_glb_access: float = 6.0
    e_dram_access: float = 160.0

    def __post_init__(self):
        if not (self.e_dram_access > self.e_glb_access > self.e_rf_access > 0 and self.e_mac > 0):
            raise ValueError("energy table must satisfy dram > glb > rf > 0 and mac > 0")

    def per_event(self) -> dict[str, float]:
        return {"mac": self.e_mac, "rf": self.e_rf_access, "glb": self.e_glb_access, "dram": self.e_dram_access}

    @classmethod
    def load(cls, path) -> "EnergyTable":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Mapping:
    name: str
    rows_dim: str
    cols_dim: str
    array: ArrayConfig
    tile: tuple[tuple[str, int], ...]
    feasible: bool = True
    reason: str = ""
    utilization: float = 0.0
    rf_words: int = 0

    @property
    def tiles(self) -> dict[str, int]:
        return dict(self.tile)

    @property
    def low_utilization(self) -> bool:
        return self.utilization < 0.5

    def extent(self, dim: str) -> int:
        """PEs along ``dim`` (1 for temporal dimensions)."""
        if dim == self.rows_dim:
            return self.array.rows
        if dim == self.cols_dim:
            return self.array.cols
        return 1

    def role(self, cls: str) -> str:
        dims = CLASS_DIMS[cls]
        r, c = self.rows_dim in dims, self.cols_dim in dims
        return {(True, True): "U", (True, False): "H", (False, True): "V", (False, False): "B"}[(r, c)]

    def roles(self, phase: Phase) -> dict[str, str]:
        """H/V/U assignment of the phase's tensors (names as in the phase)."""
        names = {
            Phase.FORWARD: {"w": "w", "x": "x", "y": "y"},
            Phase.BACKWARD: {"w": "w", "y": "dy", "x": "dx"},
            Phase.WEIGHT_UPDATE: {"x": "x", "y": "dy", "w": "dw"},
        }[phase]
        return {names[c]: self.role(c) for c in ("w", "x", "y")}


def _dim_sizes(layer: LayerShape) -> dict[str, int]:
    return {"N": layer.N, "C": layer.C, "K": layer.K, "P": layer.P, "Q": layer.Q}


def _candidates(d: int) -> list[int]:
    vals = {1 << i for i in range(d.bit_length()) if (1 << i) <= d}
    vals.add(d)
    return sorted(vals)


def _halo(ext, full, stride, filt):
    return np.minimum(full, (np.asarray(ext) - 1) * stride + filt)


def rf_footprint(layer: LayerShape, tile: TMapping[str, int]) -> int:
    """Words a PE must hold for one tile: weights, input halo and partial sums."""
    n, c, k, p, q = (tile[d] for d in DIMS)
    xt = int(_halo(p, layer.X, layer.stride, layer.R))
    yt = int(_halo(q, layer.Y, layer.stride, layer.S))
    return k * c * layer.R * layer.S + n * c * xt * yt + n * k * p * q


def enumerate_mappings(layer: LayerShape, array: ArrayConfig = DEFAULT_ARRAY) -> list[Mapping]:
    """The four spatial schemes, each with its best capacity-legal tiling.

    Tiles are powers of two (or the full extent).  A spatial dimension at
    least twice the array extent gets a tile of at least 2 so it can be
    halved for balancing.  Among legal tiles the fewest dense cycles win,
    then the least buffer traffic, then the lexicographically smallest tile.
    """
    return [best_mapping(layer, name, array) for name in MAPPING_NAMES]


def best_mapping(layer: LayerShape, name: str, array: ArrayConfig = DEFAULT_ARRAY) -> Mapping:
    rows_dim, cols_dim = MAPPINGS[name]
    sizes = _dim_sizes(layer)
    ext = {d: (array.rows if d == rows_dim else array.cols if d == cols_dim else 1) for d in DIMS}
    grids = np.meshgrid(*[np.array(_candidates(sizes[d]), dtype=np.int64) for d in DIMS], indexing="ij")
    t = {d: g.reshape(-1) for d, g in zip(DIMS, grids)}
    xt = _halo(t["P"], layer.X, layer.stride, layer.R)
    yt = _halo(t["Q"], layer.Y, layer.stride, layer.S)
    words = {
        "w": t["K"] * t["C"] * layer.R * layer.S,
        "x": t["N"] * t["C"] * xt * yt,
        "y": t["N"] * t["K"] * t["P"] * t["Q"],
    }
    rf = words["w"] + words["x"] + words["y"]
    ok = rf <= array.rf_words
    folds = {d: -(-sizes[d] // (ext[d] * t[d])) for d in DIMS}
    used = {d: np.minimum(ext[d], -(-sizes[d] // t[d])) for d in DIMS}
    glb_set = np.zeros_like(rf)
    for cls, dims in CLASS_DIMS.items():
        distinct = np.ones_like(rf)
        for d in (rows_dim, cols_dim):
            if d in dims:
                distinct = distinct * used[d]
        glb_set = glb_set + distinct * words[cls]
    ok &= glb_set <= array.glb_words
    for d in (rows_dim, cols_dim):
        if sizes[d] >= 2 * ext[d]:
            ok &= t[d] >= 2
    if not ok.any():
        return Mapping(name, rows_dim, cols_dim, array, tuple((d, 1) for d in DIMS),
                       feasible=False, reason="no tiling fits the register file and global buffer")
    waves = np.ones_like(rf)
    for d in DIMS:
        waves = waves * folds[d]
    tile_macs = t["N"] * t["C"] * t["K"] * t["P"] * t["Q"] * layer.R * layer.S
    dense_cycles = waves * tile_macs
    traffic = waves * glb_set
    idx = np.flatnonzero(ok)
    keys = [t[d][idx] for d in reversed(DIMS)] + [traffic[idx], dense_cycles[idx]]
    best = idx[np.lexsort(keys)[0]]
    tile = tuple((d, int(t[d][best])) for d in DIMS)
    full = layer.N * layer.C * layer.K * layer.P * layer.Q * layer.R * layer.S
    util = full / (int(dense_cycles[best]) * array.pes)
    return Mapping(name, rows_dim, cols_dim, array, tile, True, "", util, int(rf[best]))


# -- bucketing of each loop dimension into (fold, PE position[, half]) ------


@dataclass(frozen=True)
class _Buckets:
    onehot: np.ndarray  # (buckets, units)
    folds: int
    ext: int  # PEs along this dimension
    halves: bool

    @property
    def extents(self) -> np.ndarray:
        return self.onehot.sum(axis=1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.folds, self.ext, 2) if self.halves else (self.folds, self.ext, 1)


def _buckets(size: int, tile: int, ext: int, halves: bool) -> _Buckets:
    folds = -(-size // (ext * tile))
    groups = folds * ext
    u = np.arange(size)
    g = u // tile
    if halves:
        width = np.minimum(tile, size - g * tile)
        second = (width >= 2) & (u - g * tile >= width // 2)
        b = 2 * g + second
        n = 2 * groups
    else:
        b, n = g, groups
    onehot = np.zeros((n, size))
    onehot[b, u] = 1.0
    return _Buckets(onehot, folds, ext, halves)


def _contract(tensor: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
    """Apply bucket matrices to each axis in turn."""
    out = tensor
    for axis, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return out


def _window_counts(nz: np.ndarray, layer: LayerShape) -> np.ndarray:
    """Non-zero input activations under each (r, s) window: (N, C, P, Q)."""
    if layer.kind == "fc":
        return nz.reshape(layer.N, layer.C, 1, 1).astype(np.float64)
    x = nz.astype(np.float64)
    if layer.pad:
        x = np.pad(x, ((0, 0), (0, 0), (layer.pad, layer.pad), (layer.pad, layer.pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (layer.R, layer.S), axis=(2, 3))
    win = win[:, :, :: layer.stride, :: layer.stride][:, :, : layer.P, : layer.Q]
    return win.sum(axis=(4, 5))


def _act_nonzero(act, layer: LayerShape) -> np.ndarray | float:
    """Scalar density or an (N, C, X, Y) non-zero indicator."""
    if isinstance(act, csb.CsbTensor):
        act = csb.decode(act) != 0
    if np.isscalar(act) or np.ndim(act) == 0:
        d = float(act)
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"activation density must lie in [0, 1], got {d}")
        return d
    arr = np.asarray(act)
    want = (layer.N, layer.C, layer.X, layer.Y)
    if arr.size != math.prod(want):
        raise ValueError(f"activation map of shape {arr.shape} does not match layer {want}")
    return (arr.reshape(want) != 0)


def wu_operand_density(layer: LayerShape, act) -> float:
    """Non-zero fraction of the input operands the weight update multiplies.

    Padding positions count as zeros, so this is at most the plain
    activation density of an unpadded layer.
    """
    nz = _act_nonzero(act, layer)
    if isinstance(nz, float):
        grid_total = layer.N * layer.C * layer.P * layer.Q * layer.R * layer.S
        return float(_window_counts(np.ones((layer.N, layer.C, layer.X, layer.Y)), layer).sum()) * nz / grid_total
    return float(_window_counts(nz, layer).sum()) / (layer.N * layer.C * layer.P * layer.Q * layer.R * layer.S)


def _weight_counts(masks, layer: LayerShape) -> np.ndarray:
    """Non-zeros per (k, c): from a CsbTensor, a dense array, or a density."""
    rs = layer.R * layer.S
    if masks is None:
        return np.full((layer.K, layer.C), float(rs))
    if isinstance(masks, csb.CsbTensor):
        if tuple(masks.dense_shape) != layer.weight_shape:
            raise ValueError(f"mask shape {masks.dense_shape} does not match {layer.name} {layer.weight_shape}")
        return csb.kc_counts(masks).astype(np.float64)
    if np.isscalar(masks) or np.ndim(masks) == 0:
        d = float(masks)
        if not 0.0 <= d <= 1.0:
            raise ValueError("weight density must lie in [0, 1]")
        return np.full((layer.K, layer.C), d * rs)
    arr = np.asarray(masks)
    if arr.shape != layer.weight_shape:
        raise ValueError(f"mask shape {arr.shape} does not match {layer.name} {layer.weight_shape}")
    nz = arr != 0
    return nz.reshape(layer.K, layer.C, -1).sum(axis=2).astype(np.float64)


def _work_tensor(layer, mapping, phase, buckets, wcounts, act) -> np.ndarray:
    """Non-zero MACs per bucket, axes in DIMS order."""
    ext = {d: buckets[d].extents for d in DIMS}
    if phase is Phase.WEIGHT_UPDATE:
        if isinstance(act, float):
            grid = np.full((layer.N, layer.C, layer.P, layer.Q), act * layer.R * layer.S)
        else:
            grid = _window_counts(act, layer)
        a = _contract(grid, [buckets[d].onehot for d in ("N", "C", "P", "Q")])
        return a[:, :, None, :, :] * ext["K"][None, None, :, None, None]
    wg = buckets["K"].onehot @ wcounts @ buckets["C"].onehot.T  # (BK, BC)
    work = (ext["N"][:, None, None, None, None] * wg.T[None, :, :, None, None]
            * ext["P"][None, None, None, :, None] * ext["Q"][None, None, None, None, :])
    if phase is Phase.BACKWARD:
        fw = dense_macs(layer, Phase.FORWARD)
        work = work * (dense_macs(layer, Phase.BACKWARD) / fw if fw else 0.0)
    return work


def _to_waves(arr: np.ndarray, mapping: Mapping, buckets) -> np.ndarray:
    """Reshape bucket axes into (waves, rows, row-halves, cols, col-halves)."""
    shape, order = [], []
    for d in DIMS:
        shape.extend(buckets[d].shape)
    arr = arr.reshape(shape)
    # axis layout per dim: fold, ext, half
    pos = {d: 3 * i for i, d in enumerate(DIMS)}
    folds = [pos[d] for d in DIMS]
    r, c = mapping.rows_dim, mapping.cols_dim
    temporal_rest = [pos[d] + j for d in DIMS if d not in (r, c) for j in (1, 2)]
    order = folds + temporal_rest + [pos[r] + 1, pos[r] + 2, pos[c] + 1, pos[c] + 2]
    arr = arr.transpose(order)
    nw = math.prod(buckets[d].folds for d in DIMS)
    hr = 2 if buckets[r].halves else 1
    hc = 2 if buckets[c].halves else 1
    return arr.reshape(nw, buckets[r].ext, hr, buckets[c].ext, hc)


@dataclass
class Trace:
    """Per-wave interconnect activity."""

    multicast: np.ndarray  # distinct H/V/B flows per wave
    unicast: np.ndarray  # unicast messages per wave
    glb_reads: dict = field(default_factory=dict)  # class -> buffer words read, per wave
    rf_fills: dict = field(default_factory=dict)  # class -> words written into PE RFs, per wave
    out_words: np.ndarray | None = None  # distinct output words touched, per wave


@dataclass
class PhaseCost:
    layer: str
    phase: Phase
    mapping: str
    balanced: bool
    mode: str | None
    cycles: float
    dense_cycles: float
    waves: int
    macs: float
    accesses: dict
    energy: dict
    loop_order: tuple = ()  # temporal fold loops, outermost first
    overheads: np.ndarray = field(repr=False, default=None)
    trace: Trace | None = field(repr=False, default=None)

    @property
    def total_energy(self) -> float:
        return float(sum(self.energy.values()))


def _placement(mode, halves, dense_halves, group_dense=None, moved=None):
    """Physical (row, col) of every half, plus its origin (row, col, half).

    ``halves`` has shape (W, R, hr, C, hc).  ``group_dense`` (same shape)
    decides which rows, columns or PEs take part in the exchange and
    ``moved`` flags the waves that are re-paired at all.  Returns flat
    arrays over (W, R*hr*C*hc) in origin order.
    """
    W, R, hr, C, hc = halves.shape
    group_dense = dense_halves if group_dense is None else group_dense
    moved = np.ones(W, dtype=bool) if moved is None else moved
    grid = np.meshgrid(np.arange(R), np.arange(hr), np.arange(C), np.arange(hc), indexing="ij")
    oi, ohr, oj, ohc = (np.broadcast_to(g.reshape(-1), (W, g.size)) for g in grid)
    oh = ohr * hc + ohc
    pi, pj = oi.copy(), oj.copy()

    def slot_of(totals, busy, slot):
        # perm[w, position] = source slot; invert to find each slot's position
        perm = balance.pairing_permutation(totals, busy)
        dest = np.empty_like(perm)
        np.put_along_axis(dest, perm, np.broadcast_to(np.arange(perm.shape[1]), perm.shape).copy(), axis=1)
        return np.take_along_axis(dest, slot, axis=1) // 2

    if mode == "row":
        pi = slot_of(halves.sum(axis=(3, 4)).reshape(W, R * hr), group_dense.sum(axis=(2, 3, 4)) > 0,
                     oi * hr + ohr)
    elif mode == "col":
        pj = slot_of(halves.sum(axis=(1, 2)).reshape(W, C * hc), group_dense.sum(axis=(1, 2, 4)) > 0,
                     oj * hc + ohc)
    elif mode == "cross":
        # halves of one PE are adjacent in (R, C, hr, hc) order
        pe_slot = ((oi * C + oj) * hr + ohr) * hc + ohc
        pe = slot_of(halves.transpose(0, 1, 3, 2, 4).reshape(W, -1),
                     group_dense.sum(axis=(2, 4)).reshape(W, -1) > 0, pe_slot)
        pi, pj = pe // C, pe % C
    pi = np.where(moved[:, None], pi, oi)
    pj = np.where(moved[:, None], pj, oj)
    active = dense_halves.reshape(W, -1) > 0
    return oi, oj, oh, pi, pj, active


def _halo_union(layer: LayerShape, mapping: Mapping, buckets, fold_idx) -> np.ndarray:
    """Per wave, distinct input words over the sum of per-PE halos.

    Neighbouring PEs along a spatial P or Q share halo rows; the buffer
    reads each shared word once and the multicast network delivers it, and
    overlapping partial sums are added on the way back.
    """
    W = fold_idx["N"].shape[0]
    fac = np.ones(W)
    for d, full, filt in (("P", layer.X, layer.R), ("Q", layer.Y, layer.S)):
        if d not in (mapping.rows_dim, mapping.cols_dim):
            continue
        b = buckets[d]
        ext = b.extents.reshape(b.folds, b.ext)
        halos = np.where(ext > 0, _halo(ext, full, layer.stride, filt), 0).sum(axis=1)
        span = ext.sum(axis=1)
        union = np.where(span > 0, _halo(span, full, layer.stride, filt), 0)
        fac *= (union / np.maximum(halos, 1))[fold_idx[d]]
    return fac


def _trace(mapping, phase, halves, dense_halves, mode, split, words, x_share=None, group_dense=None,
           moved=None) -> Trace:
    """Count flows per operand class at half-tile granularity."""
    W = halves.shape[0]
    oi, oj, oh, pi, pj, active = _placement(mode, halves, dense_halves, group_dense, moved)
    wave = np.broadcast_to(np.arange(W)[:, None], oi.shape)
    multicast = np.zeros(W, dtype=np.int64)
    unicast = np.zeros(W, dtype=np.int64)
    reads, fills = {}, {}
    R, C = mapping.array.rows, mapping.array.cols
    inputs, output = PHASE_CLASSES[phase]
    for cls in inputs + (output,):
        dims = CLASS_DIMS[cls]
        role = mapping.role(cls)
        key = wave.astype(np.int64)
        if mapping.rows_dim in dims:
            key = key * R + oi
        if mapping.cols_dim in dims:
            key = key * C + oj
        if split is not None and split in dims:
            key = key * 4 + oh
        key, sel = key[active], active
        pi_a, pj_a, w_a = pi[sel], pj[sel], wave[sel]
        wd = words[cls][sel]
        if role == "H":
            flow = key * R + pi_a
        elif role == "V":
            flow = key * C + pj_a
        elif role == "U":
            flow = (key * R + pi_a) * C + pj_a
        else:
            flow = key
        uniq, first = np.unique(flow, return_index=True)
        counts = np.bincount(w_a[first], minlength=W)
        if role == "U":
            unicast += counts
        else:
            multicast += counts
        reads[cls] = np.bincount(w_a[first], weights=wd[first], minlength=W)
        if cls == "x" and x_share is not None:
            reads[cls] = reads[cls] * x_share
        pe = (key * R + pi_a) * C + pj_a
        _, pfirst = np.unique(pe, return_index=True)
        fills[cls] = np.bincount(w_a[pfirst], weights=wd[pfirst], minlength=W)
        if cls == output:
            _, dfirst = np.unique(key, return_index=True)
            out_words = np.bincount(w_a[dfirst], weights=wd[dfirst], minlength=W)
            if cls == "x" and x_share is not None:
                # overlapping halo partial sums are reduced before the write
                out_words = out_words * x_share
    return Trace(multicast, unicast, reads, fills, out_words)


def _class_words(layer, buckets, shape, split) -> dict[str, np.ndarray]:
    """Words of each class's datum for every (wave, half), flattened like the trace."""
    out = {}
    for cls, dims in CLASS_DIMS.items():
        ext = {}
        for d in DIMS:
            e = buckets[d].extents
            if buckets[d].halves and d not in dims:
                e = e.reshape(-1, 2).sum(axis=1).repeat(2)
            ext[d] = e
        if cls == "x":
            ext["P"] = _halo(ext["P"], layer.X, layer.stride, layer.R)
            ext["Q"] = _halo(ext["Q"], layer.Y, layer.stride, layer.S)
        arr = np.ones((), dtype=np.float64)
        for d in DIMS:
            arr = np.multiply.outer(arr, ext[d] if d in dims else np.ones_like(ext[d]))
        if cls == "w":
            arr = arr * layer.R * layer.S
        out[cls] = arr
    return out


def phase_cost(layer: LayerShape, mapping: Mapping, phase: Phase, weight_masks=None,
               act_density=1.0, balanced: bool = True, energy: EnergyTable | None = None,
               trace: bool = True) -> PhaseCost:
    """Cycles and energy of one training phase of one layer.

    ``weight_masks`` is a CsbTensor, a dense weight array, a density or None
    (dense).  ``act_density`` is a density, an (N, C, X, Y) array or a
    CsbTensor of input activations.  With ``trace=False`` only cycles are
    computed and every energy figure is NaN.
    """
    energy = energy or EnergyTable()
    if not mapping.feasible:
        raise InfeasibleMapping(f"{mapping.name} on {layer.name}: {mapping.reason}")
    if not layer.has_weights:
        raise ValueError("pool layers have no MACs to model")
    sizes = _dim_sizes(layer)
    tiles = mapping.tiles
    split, mode = BALANCE_PLAN[(mapping.name, phase.value)]
    if split is not None and tiles[split] < 2:
        split, mode = None, None
    use_halves = balanced and split is not None
    halve = split if split is not None else None
    buckets = {d: _buckets(sizes[d], tiles[d], mapping.extent(d), d == halve) for d in DIMS}
    wcounts = _weight_counts(weight_masks, layer)
    act = _act_nonzero(act_density, layer)
    work = _to_waves(_work_tensor(layer, mapping, phase, buckets, wcounts, act), mapping, buckets)
    dense = _to_waves(_work_tensor(layer, mapping, phase, buckets, _weight_counts(None, layer), 1.0),
                      mapping, buckets)
    W = work.shape[0]
    fold_idx = _fold_index(buckets, W)
    # a wave is one spatial fold; each PE runs its temporal folds inside it
    fr, fc = buckets[mapping.rows_dim].folds, buckets[mapping.cols_dim].folds
    sp = fold_idx[mapping.rows_dim] * fc + fold_idx[mapping.cols_dim]
    NW = fr * fc
    work_sp = np.zeros((NW,) + work.shape[1:])
    np.add.at(work_sp, sp, work)
    dense_sp = np.zeros((NW,) + dense.shape[1:])
    np.add.at(dense_sp, sp, dense)
    per_pe = work_sp.sum(axis=(2, 4))
    unbal = per_pe.reshape(NW, -1).max(axis=1)
    moved = np.zeros(NW, dtype=bool)
    if use_halves:
        # only groups holding work take part in the exchange
        if mode == "row":
            busy_g = dense_sp.sum(axis=(2, 3, 4)) > 0
            perm = balance.pairing_permutation(work_sp.sum(axis=(3, 4)).reshape(NW, -1), busy_g)
            src = work_sp.reshape(NW, -1, work.shape[3] * work.shape[4])
            moved_src = np.take_along_axis(src, perm[:, :, None], axis=1)
            loads = moved_src.reshape(NW, -1, 2, src.shape[2]).sum(axis=2).reshape(NW, -1)
            moved[:] = True
        elif mode == "col":
            busy_g = dense_sp.sum(axis=(1, 2, 4)) > 0
            perm = balance.pairing_permutation(work_sp.sum(axis=(1, 2)).reshape(NW, -1), busy_g)
            src = work_sp.transpose(0, 3, 4, 1, 2).reshape(NW, -1, work.shape[1] * work.shape[2])
            moved_src = np.take_along_axis(src, perm[:, :, None], axis=1)
            loads = moved_src.reshape(NW, -1, 2, src.shape[2]).sum(axis=2).transpose(0, 2, 1).reshape(NW, -1)
            moved[:] = True
        else:
            busy_g = dense_sp.sum(axis=(2, 4)).reshape(NW, -1) > 0
            pe_halves = work_sp.transpose(0, 1, 3, 2, 4).reshape(NW, -1)
            paired = balance.grouped_loads(pe_halves, busy_g)
            # the exchange is skipped when unicast re-routing costs more than it saves
            moved = paired.max(axis=1) * (1.0 + mapping.array.cross_penalty) < unbal
            loads = np.where(moved[:, None], paired, per_pe.reshape(NW, -1))
        wave_max = np.where(moved & (mode == "cross"), loads.max(axis=1) * (1.0 + mapping.array.cross_penalty),
                            loads.max(axis=1))
    else:
        loads = per_pe.reshape(NW, -1)
        wave_max = unbal
    # overhead relative to the mean over PEs that hold work in this wave
    busy = dense_sp.sum(axis=(2, 4)).reshape(NW, -1) > 0
    nbusy = np.maximum(busy.sum(axis=1), 1)
    busy_mean = (per_pe.reshape(NW, -1) * busy).sum(axis=1) / nbusy
    core_max = loads.reshape(NW, -1).max(axis=1)
    overheads = np.where(busy_mean > 0, core_max / np.where(busy_mean > 0, busy_mean, 1.0) - 1.0, 0.0)
    overheads = np.maximum(overheads, 0.0)  # float noise on perfectly even waves
    oc = mapping.array.wave_overhead_cycles
    cycles = float(np.ceil(wave_max - 1e-9).sum() + oc * NW)
    dense_cycles = float(np.ceil(dense_sp.sum(axis=(2, 4)).reshape(NW, -1).max(axis=1) - 1e-9).sum() + oc * NW)
    macs = float(work.sum())

    # traffic and energy
    words = _class_words(layer, buckets, work.shape, halve)
    flat_words = {c: _to_waves(v, mapping, buckets).reshape(W, -1) for c, v in words.items()}
    tr = None
    if trace:
        # the pairing is fixed per spatial wave and reused by its temporal folds
        tr = _trace(mapping, phase, work_sp[sp], dense, mode if use_halves else None, halve, flat_words,
                    _halo_union(layer, mapping, buckets, fold_idx), dense_sp[sp], moved[sp])
    e = energy.per_event()
    if tr is None:
        # buffer traffic needs the trace; a cycles-only run leaves energy undefined
        accesses = {k: float("nan") for k in ("mac", "rf", "glb", "dram")}
        order = ()
    else:
        accesses, order = _accesses(layer, phase, wcounts, act, macs, tr, _reduction_fanin(mapping, phase, sizes),
                                    fold_idx, e)
    energy_by = {k: accesses[k] * e[k] for k in ("mac", "rf", "glb", "dram")}
    return PhaseCost(layer.name, phase, mapping.name, balanced, mode if use_halves else None, cycles,
                     dense_cycles, NW, macs, accesses, energy_by, order, overheads, tr)


def _reduction_fanin(mapping: Mapping, phase: Phase, sizes) -> int:
    """PEs holding partial sums of one output: spatial dims the output lacks."""
    out = CLASS_DIMS[PHASE_CLASSES[phase][1]]
    fan = 1
    for d in (mapping.rows_dim, mapping.cols_dim):
        if d not in out:
            fan *= min(mapping.extent(d), -(-sizes[d] // mapping.tiles[d]))
    return fan


def _compression(layer: LayerShape, phase: Phase, wcounts, act) -> dict[str, float]:
    """Words moved per dense word for each class (sparse operand travels as CSB)."""
    comp = {"w": 1.0, "x": 1.0, "y": 1.0}
    if phase is Phase.WEIGHT_UPDATE:
        if not isinstance(act, float):
            d = float(np.mean(act))
            comp["x"] = min(1.0, d + META_WORDS / 64.0)
        elif act < 1.0:
            comp["x"] = min(1.0, act + META_WORDS / 64.0)
    else:
        rs = layer.R * layer.S
        d = float(wcounts.sum()) / (layer.K * layer.C * rs)
        block = 64 if layer.kind == "fc" else rs
        if d < 1.0:
            comp["w"] = min(1.0, d + META_WORDS / block)
    return comp


def _fold_index(buckets, W: int) -> dict[str, np.ndarray]:
    """Temporal fold index of every wave along each dimension."""
    idx = np.unravel_index(np.arange(W), [buckets[d].folds for d in DIMS])
    return dict(zip(DIMS, idx))


def _temporal_reuse(tr: Trace, fold_idx, phase: Phase, comp, fanin: int, e) -> tuple[float, float, tuple]:
    """Buffer and RF words under the cheapest order of the temporal fold loops.

    An input tile is refetched only when a loop it depends on advances, i.e.
    on waves where every loop nested inside its innermost relevant loop is at
    index 0.  An output tile is drained on the same rule; a drain that is not
    the tile's last costs a partial-sum write plus a later read-back.
    """
    inputs, output = PHASE_CLASSES[phase]
    live = [d for d in DIMS if fold_idx[d].max(initial=0) > 0]
    bit = {d: 1 << i for i, d in enumerate(live)}
    sel = {}
    for m in range(1 << len(live)):
        ok = np.ones(tr.multicast.shape[0], dtype=bool)
        for d in live:
            if m & bit[d]:
                ok &= fold_idx[d] == 0
        sel[m] = ok

    def sums(arr):
        return {m: float(arr[ok].sum()) for m, ok in sel.items()}

    rsum = {c: sums(tr.glb_reads[c]) for c in inputs}
    fsum = {c: sums(tr.rf_fills[c]) for c in inputs}
    osum = sums(tr.out_words)
    first = osum[sum(bit[d] for d in live if d not in CLASS_DIMS[output])]

    def inner_mask(order, dims):
        pos = [i for i, d in enumerate(order) if d in dims]
        j = pos[-1] if pos else -1
        return sum(bit[d] for d in order[j + 1:])

    best = None
    for order in itertools.permutations(live):
        glb = rf = 0.0
        for c in inputs:
            m = inner_mask(order, CLASS_DIMS[c])
            glb += rsum[c][m] * comp[c]
            rf += fsum[c][m] * comp[c]
        drains = osum[inner_mask(order, CLASS_DIMS[output])]
        glb += 2.0 * drains - first
        rf += fanin * drains + (drains - first)
        cost = e["glb"] * glb + e["rf"] * rf
        if best is None or cost < best[0] - 1e-9:
            best = (cost, glb, rf, order)
    return best[1], best[2], best[3]


def _accesses(layer, phase, wcounts, act, macs, tr, fanin, fold_idx, e) -> tuple[dict[str, float], tuple]:
    inputs, output = PHASE_CLASSES[phase]
    comp = _compression(layer, phase, wcounts, act)
    volumes = {"w": layer.num_weights, "x": layer.N * layer.iact_volume, "y": layer.N * layer.oact_volume}
    g, r, order = _temporal_reuse(tr, fold_idx, phase, comp, fanin, e)
    rf = 4.0 * macs + r
    glb = g
    dram = sum(volumes[c] * comp[c] for c in inputs) + volumes[output]
    if phase is Phase.WEIGHT_UPDATE:
        # one quantile-estimator event per produced gradient, on the buffer path
        glb += layer.num_weights
    return {"mac": macs, "rf": rf, "glb": glb, "dram": float(dram)}, order


def balance_waves(layer: LayerShape, mapping: Mapping, phase: Phase, weight_masks=None,
                  act_density=1.0) -> list[balance.Wave]:
    """The phase's spatial waves as :class:`balance.Wave` objects.

    One tile per PE group along the split dimension, profiled per unit of
    that dimension over the group's whole workload in the wave.  Only
    row- or column-scoped plans have such waves.
    """
    split, mode = BALANCE_PLAN[(mapping.name, phase.value)]
    if split is None or mode == "cross":
        raise ValueError(f"{mapping.name} {phase.value} has no row or column balancing plan")
    other = mapping.cols_dim if split == mapping.rows_dim else mapping.rows_dim
    sizes = _dim_sizes(layer)
    tiles = mapping.tiles
    buckets = {d: _buckets(sizes[d], tiles[d], mapping.extent(d), False) for d in DIMS}
    buckets[split] = _Buckets(np.eye(sizes[split]), sizes[split], 1, False)
    work = _work_tensor(layer, mapping, phase, buckets, _weight_counts(weight_masks, layer),
                        _act_nonzero(act_density, layer))
    axes = tuple(i for i, d in enumerate(DIMS) if d not in (split, other))
    m = work.sum(axis=axes)
    if DIMS.index(split) > DIMS.index(other):
        m = m.T  # (units, groups of the other dimension)
    t, e = tiles[split], mapping.extent(split)
    eo = mapping.extent(other)
    group = np.arange(sizes[split]) // t
    waves = []
    for fs in range(-(-sizes[split] // (e * t))):
        for fo in range(-(-m.shape[1] // eo)):
            cols = m[:, fo * eo:(fo + 1) * eo].sum(axis=1)
            prof = []
            for pos in range(e):
                units = np.flatnonzero(group == fs * e + pos)
                if units.size:
                    prof.append([int(round(v)) for v in cols[units]])
            waves.append(balance.Wave.from_profiles(prof))
    return waves


# -- network level -----------------------------------------------------------


@dataclass
class NetworkCost:
    rows: list[PhaseCost]

    def select(self, phase: Phase | None = None, layer: str | None = None) -> list[PhaseCost]:
        return [r for r in self.rows if (phase is None or r.phase is phase) and (layer is None or r.layer == layer)]

    def cycles(self, phase: Phase | None = None, layer: str | None = None) -> float:
        return sum(r.cycles for r in self.select(phase, layer))

    def energy(self, phase: Phase | None = None, layer: str | None = None) -> float:
        return sum(r.total_energy for r in self.select(phase, layer))

    def breakdown(self, phase: Phase | None = None) -> dict[str, float]:
        out = {"mac": 0.0, "rf": 0.0, "glb": 0.0, "dram": 0.0}
        for r in self.select(phase):
            for k, v in r.energy.items():
                out[k] += v
        return out

    def table(self) -> list[dict]:
        rows = []
        for r in self.rows:
            rows.append({
                "layer": r.layer, "phase": r.phase.value, "mapping": r.mapping,
                "balanced": int(r.balanced), "cycles": r.cycles, "waves": r.waves, "macs": r.macs,
                "e_mac": r.energy["mac"], "e_rf": r.energy["rf"], "e_glb": r.energy["glb"],
                "e_dram": r.energy["dram"], "e_total": r.total_energy,
            })
        return rows


def network_cost(network: Network, schedule="KN", masks=None, act_densities=None,
                 energy: EnergyTable | None = None, array: ArrayConfig = DEFAULT_ARRAY,
                 balanced: bool = True, phases: Iterable[Phase] = PHASES, trace: bool = True) -> NetworkCost:
    """Sum phase costs over every weighted layer.

    ``schedule`` is one mapping name for all layers or a dict per layer.
    ``masks`` maps layer name to weights (see :func:`phase_cost`), missing
    layers are dense; ``act_densities`` likewise maps to activation data.
    """
    masks = masks or {}
    act_densities = act_densities or {}
    rows = []
    for layer in network.weighted_layers:
        name = schedule if isinstance(schedule, str) else schedule[layer.name]
        mapping = best_mapping(layer, name, array)
        for ph in phases:
            rows.append(phase_cost(layer, mapping, ph, masks.get(layer.name), act_densities.get(layer.name, 1.0),
                                   balanced, energy, trace))
    return NetworkCost(rows)


def dense_baseline(network: Network, energy: EnergyTable | None = None, array: ArrayConfig = DEFAULT_ARRAY,
                   phases: Iterable[Phase] = PHASES) -> tuple[str, NetworkCost]:
    """Best single mapping for a dense accelerator (all operands dense)."""
    best = None
    for name in MAPPING_NAMES:
        try:
            cost = network_cost(network, name, None, None, energy, array, balanced=False, phases=phases)
        except InfeasibleMapping:
            continue
        if best is None or cost.cycles() < best[1].cycles():
            best = (name, cost)
    if best is None:
        raise InfeasibleMapping("no mapping is feasible for this network")
    return best


@dataclass
class IdealCost:
    cycles: dict
    energy: dict

    def total_cycles(self) -> float:
        return float(sum(self.cycles.values()))

    def total_energy(self) -> float:
        return float(sum(self.energy.values()))


def ideal_cost(network: Network, sparsity=1.0, energy: EnergyTable | None = None,
               array: ArrayConfig = DEFAULT_ARRAY, act_density=None) -> IdealCost:
    """Lower bound: the sparse operand's zeros evenly spread, every PE busy,
    compression and selection free.

    ``sparsity`` is a factor (>= 1) or a per-layer dict of factors.  Weight
    sparsity applies to forward and backward; the weight update uses
    ``act_density`` (per layer or scalar, see :func:`wu_operand_density`)
    when given, else weight sparsity.
    Keys of the result are (layer, phase value).
    """
    energy = energy or EnergyTable()
    cycles, en = {}, {}
    for layer in network.weighted_layers:
        s = sparsity[layer.name] if isinstance(sparsity, dict) else sparsity
        if s < 1.0:
            raise ValueError("sparsity factor must be >= 1")
        for ph in PHASES:
            d = 1.0 / s
            if ph is Phase.WEIGHT_UPDATE and act_density is not None:
                d = act_density[layer.name] if isinstance(act_density, dict) else act_density
            macs = dense_macs(layer, ph) * d
            cycles[(layer.name, ph.value)] = math.ceil(macs / array.pes - 1e-9)
            inputs, output = PHASE_CLASSES[ph]
            vol = {"w": layer.num_weights, "x": layer.N * layer.iact_volume, "y": layer.N * layer.oact_volume}
            sparse = SPARSE_CLASS[ph]
            dram = sum(vol[c] * (d if c == sparse else 1.0) for c in inputs) + vol[output]
            en[(layer.name, ph.value)] = macs * (energy.e_mac + 4 * energy.e_rf_access) + dram * energy.e_dram_access
    return IdealCost(cycles, en)


# -- CSV emitters ---------------------------------------------------------------


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def uniform_mask(shape, density: float, block_last: int | None = None) -> np.ndarray:
    """Deterministic evenly spread mask: every block keeps the same share.

    Non-zeros are spaced as evenly as rounding allows along the flattened
    tensor, so any contiguous run holds its proportional share within one.
    """
    total = math.prod(shape)
    keep = np.floor((np.arange(total) + 1) * density + 1e-9) - np.floor(np.arange(total) * density + 1e-9)
    return keep.reshape(shape).astype(np.float32)
