"""Dropback-style sparse training with initial-weight decay.

Only a bounded set of weights ("tracked") carries an accumulated gradient.
Every other weight equals its initial value, which is never stored: it is
recomputed from (seed, index) by a stateless xorshift generator and decayed
by ``lam**t`` until a hard cutoff makes it exactly zero.  Which gradients
enter the tracked set is decided against a streaming quantile threshold
instead of a sort.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .quantile import ADJUSTMENT_RATE, INITIAL_ESTIMATE, QuantileEstimator
from .workload import LayerShape, Network

DEFAULT_DECAY = 0.9
DEFAULT_CUTOFF = 1000

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_STREAMS = 3


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _xorshift32(x: np.ndarray) -> np.ndarray:
    x = x ^ (x << np.uint32(13))
    x = x ^ (x >> np.uint32(17))
    return x ^ (x << np.uint32(5))


def gaussianish(seed: int, indices) -> np.ndarray:
    """Sum of three uniforms on [-1, 1) drawn from per-index xorshift streams.

    Pure function of (seed, index); unit variance, zero mean.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    base = _splitmix64(np.full(idx.shape, seed & _M64, dtype=np.uint64))
    total = np.zeros(idx.shape, dtype=np.float64)
    for stream in range(_STREAMS):
        mixed = _splitmix64(base ^ (idx * np.uint64(_STREAMS) + np.uint64(stream + 1)))
        state = (mixed & np.uint64(0xFFFFFFFF)).astype(np.uint32)
        state[state == 0] = np.uint32(0x9E3779B9)
        out = _xorshift32(state)
        total += out.astype(np.float64) / 2.0**31 - 1.0
    return total


@dataclass(frozen=True)
class WeightRecompute:
    seed: int
    size: int
    fan_in: int
    fan_out: int
    init: str = "kaiming"
    lam: float = DEFAULT_DECAY
    cutoff: int | None = DEFAULT_CUTOFF

    def __post_init__(self):
        if self.init not in ("kaiming", "xavier"):
            raise ValueError(f"unknown init {self.init!r}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")

    @classmethod
    def for_layer(cls, layer: LayerShape, seed: int, lam=DEFAULT_DECAY, cutoff=DEFAULT_CUTOFF):
        if layer.kind == "fc":
            return cls(seed, layer.num_weights, layer.C, layer.K, "xavier", lam, cutoff)
        fan_in = layer.C * layer.R * layer.S
        fan_out = layer.K * layer.R * layer.S
        return cls(seed, layer.num_weights, fan_in, fan_out, "kaiming", lam, cutoff)

    @property
    def scale(self) -> float:
        if self.init == "kaiming":
            return math.sqrt(2.0 / self.fan_in)
        return math.sqrt(2.0 / (self.fan_in + self.fan_out))

    def decay(self, t: int) -> float:
        if self.cutoff is not None and t >= self.cutoff:
            return 0.0
        return self.lam**t

    def decay_many(self, ts) -> np.ndarray:
        ts = np.asarray(ts)
        out = np.array([self.decay(int(v)) for v in np.unique(ts)])
        return out[np.searchsorted(np.unique(ts), ts)] if ts.size else np.zeros(0)

    def values(self, indices, t: int) -> np.ndarray:
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError("weight index outside layer")
        d = self.decay(t)
        if d == 0.0:
            return np.zeros(idx.shape, dtype=np.float64)
        return d * (self.scale * gaussianish(self.seed, idx))

    def all_values(self, t: int) -> np.ndarray:
        return self.values(np.arange(self.size), t)


def wr_value(wr: WeightRecompute, index: int, t: int) -> float:
    return float(wr.values(np.array([index]), t)[0])


def select_sort_oracle(magnitudes, k: int) -> np.ndarray:
    """Exact top-``k`` indices by magnitude; ties keep the lower index."""
    mags = np.asarray(magnitudes)
    if k > mags.size:
        raise ValueError("k exceeds the number of weights")
    order = np.argsort(-mags, kind="stable")
    return np.sort(order[:k])


# -- indexed min-heap over tracked slots, keyed by (|acc|, weight index) ----


@njit(cache=True)
def _less(a, b, slot_acc, slot_idx):
    ka = abs(slot_acc[a])
    kb = abs(slot_acc[b])
    if ka < kb:
        return True
    if ka > kb:
        return False
    return slot_idx[a] > slot_idx[b]


@njit(cache=True)
def _swap(heap, heap_pos, i, j):
    a = heap[i]
    b = heap[j]
    heap[i] = b
    heap[j] = a
    heap_pos[b] = i
    heap_pos[a] = j


@njit(cache=True)
def _sift_up(heap, heap_pos, i, slot_acc, slot_idx):
    while i > 0:
        parent = (i - 1) // 2
        if _less(heap[i], heap[parent], slot_acc, slot_idx):
            _swap(heap, heap_pos, i, parent)
            i = parent
        else:
            break


@njit(cache=True)
def _sift_down(heap, heap_pos, i, size, slot_acc, slot_idx):
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and _less(heap[right], heap[left], slot_acc, slot_idx):
            child = right
        if _less(heap[child], heap[i], slot_acc, slot_idx):
            _swap(heap, heap_pos, i, child)
            i = child
        else:
            break


@njit(cache=True)
def _track(grads, neg_eta, t, slot_of, slot_idx, slot_acc, slot_born, heap, heap_pos, size,
           capacity, q_hat, up, down, width, buf, nbuf, use_estimator):
    inserted = 0
    evicted = 0
    for i in range(grads.shape[0]):
        d = neg_eta * grads[i]
        s = slot_of[i]
        if s >= 0:
            slot_acc[s] = slot_acc[s] + d
            mag = abs(slot_acc[s])
            p = heap_pos[s]
            _sift_up(heap, heap_pos, p, slot_acc, slot_idx)
            _sift_down(heap, heap_pos, heap_pos[s], size, slot_acc, slot_idx)
        else:
            mag = abs(d)
            if (not use_estimator) or mag > q_hat:
                if size < capacity:
                    s = size
                    slot_of[i] = s
                    slot_idx[s] = i
                    slot_acc[s] = d
                    slot_born[s] = t
                    heap[size] = s
                    heap_pos[s] = size
                    size += 1
                    _sift_up(heap, heap_pos, size - 1, slot_acc, slot_idx)
                    inserted += 1
                elif size > 0:
                    top = heap[0]
                    ktop = abs(slot_acc[top])
                    if mag > ktop or (mag == ktop and i < slot_idx[top]):
                        slot_of[slot_idx[top]] = -1
                        slot_of[i] = top
                        slot_idx[top] = i
                        slot_acc[top] = d
                        slot_born[top] = t
                        _sift_down(heap, heap_pos, 0, size, slot_acc, slot_idx)
                        inserted += 1
                        evicted += 1
        if use_estimator:
            if width == 1:
                if q_hat < mag:
                    q_hat = q_hat * up
                else:
                    q_hat = q_hat * down
            else:
                buf[nbuf] = mag
                nbuf += 1
                if nbuf == 4:
                    m = (buf[0] + buf[1] + buf[2] + buf[3]) / 4.0
                    if q_hat < m:
                        q_hat = q_hat * up
                    else:
                        q_hat = q_hat * down
                    nbuf = 0
    return size, q_hat, nbuf, inserted, evicted


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    shape: tuple[int, ...]
    wr: WeightRecompute

    @property
    def size(self) -> int:
        return self.wr.size


@dataclass
class StepStats:
    t: int
    density: float
    threshold: float
    inserted: int
    evicted: int
    overlap: float | None = None


@dataclass
class TrainState:
    """Tracked accumulated gradients plus everything needed to rebuild weights.

    Per weight, only the slot map (the analogue of the hardware mask array)
    is sized by the full network; values and accumulators scale with the
    tracked set and initial weights are always recomputed.
    """

    layers: tuple[LayerSlot, ...]
    target_density: float
    eta: float
    estimator: QuantileEstimator | None
    qe_width: int = 1
    t: int = 0
    size: int = 0
    slot_of: np.ndarray = field(repr=False, default=None)
    slot_idx: np.ndarray = field(repr=False, default=None)
    slot_acc: np.ndarray = field(repr=False, default=None)
    slot_born: np.ndarray = field(repr=False, default=None)
    heap: np.ndarray = field(repr=False, default=None)
    heap_pos: np.ndarray = field(repr=False, default=None)
    qe_buf: np.ndarray = field(repr=False, default=None)
    qe_nbuf: int = 0

    @classmethod
    def create(cls, network: Network, target_density: float, eta: float, seed: int,
               lam: float = DEFAULT_DECAY, cutoff: int | None = DEFAULT_CUTOFF,
               qe_width: int = 1) -> "TrainState":
        if not 0.0 < target_density <= 1.0:
            raise ValueError("target density must lie in (0, 1]")
        if qe_width not in (1, 4):
            raise ValueError("qe_width must be 1 or 4")
        slots = []
        offset = 0
        for li, layer in enumerate(network.weighted_layers):
            layer_seed = int(_splitmix64(np.array([seed & _M64], dtype=np.uint64))[0]) ^ li
            wr = WeightRecompute.for_layer(layer, layer_seed, lam, cutoff)
            slots.append(LayerSlot(layer.name, offset, layer.weight_shape, wr))
            offset += wr.size
        total = offset
        dense = target_density >= 1.0
        capacity = total if dense else max(1, int(round(target_density * total)))
        estimator = None if dense else QuantileEstimator.for_density(target_density)
        state = cls(tuple(slots), float(target_density), float(eta), estimator, qe_width)
        state.slot_of = np.full(total, -1, dtype=np.int32)
        state.slot_idx = np.zeros(capacity, dtype=np.int64)
        state.slot_acc = np.zeros(capacity, dtype=np.float32)
        state.slot_born = np.zeros(capacity, dtype=np.int32)
        state.heap = np.zeros(capacity, dtype=np.int32)
        state.heap_pos = np.zeros(capacity, dtype=np.int32)
        state.qe_buf = np.zeros(4, dtype=np.float64)
        return state

    @property
    def total(self) -> int:
        return int(self.slot_of.size)

    @property
    def capacity(self) -> int:
        return int(self.slot_idx.size)

    @property
    def density(self) -> float:
        return self.size / self.total

    @property
    def threshold(self) -> float:
        return self.estimator.threshold if self.estimator is not None else 0.0

    def tracked(self) -> dict[int, float]:
        idx = self.slot_idx[: self.size]
        acc = self.slot_acc[: self.size]
        return {int(i): float(a) for i, a in sorted(zip(idx, acc))}

    def tracked_indices(self) -> np.ndarray:
        return np.sort(self.slot_idx[: self.size])

    def layer(self, name: str) -> LayerSlot:
        for slot in self.layers:
            if slot.name == name:
                return slot
        raise KeyError(name)

    def _locate(self, index: int) -> LayerSlot:
        for slot in self.layers:
            if slot.offset <= index < slot.offset + slot.size:
                return slot
        raise IndexError(f"weight index {index} outside network")

    def effective_weight(self, index: int, t: int | None = None) -> float:
        """Untracked: the scaffold decayed to ``t``.  Tracked: the scaffold
        frozen at its insertion iteration plus the accumulator."""
        t = self.t if t is None else t
        slot = self._locate(index)
        s = self.slot_of[index]
        if s < 0:
            return float(np.float32(wr_value(slot.wr, index - slot.offset, t)))
        base = np.float32(wr_value(slot.wr, index - slot.offset, int(self.slot_born[s])))
        return float(base + self.slot_acc[s])

    def effective_weights(self, name: str, t: int | None = None) -> np.ndarray:
        """Dense float32 weights of one layer, same composition as :meth:`effective_weight`."""
        t = self.t if t is None else t
        slot = self.layer(name)
        s = self.slot_of[slot.offset : slot.offset + slot.size]
        hit = s >= 0
        factor = np.full(slot.size, slot.wr.decay(t))
        factor[hit] = slot.wr.decay_many(self.slot_born[s[hit]])
        unit = slot.wr.scale * gaussianish(slot.wr.seed, np.arange(slot.size))
        w = (factor * unit).astype(np.float32)
        w[hit] += self.slot_acc[s[hit]]
        return w.reshape(slot.shape)

    def layer_mask(self, name: str) -> np.ndarray:
        slot = self.layer(name)
        return (self.slot_of[slot.offset : slot.offset + slot.size] >= 0).reshape(slot.shape)

    def oracle_magnitudes(self, grads: np.ndarray, eta: float | None = None) -> np.ndarray:
        """|accumulated + new| for tracked weights, |new| for the rest."""
        d = np.float32(-(self.eta if eta is None else eta)) * grads
        mags = np.abs(d)
        idx = self.slot_idx[: self.size]
        mags[idx] = np.abs(self.slot_acc[: self.size] + d[idx])
        return mags


def train_step(state: TrainState, grads, oracle: bool = False, eta: float | None = None) -> StepStats:
    """Stream one iteration's gradients through selection; mutates ``state``.

    Tracked weights accumulate ``-eta * g``.  An untracked gradient whose
    magnitude beats the threshold joins the tracked set, evicting the
    smallest tracked entry once the set is full.  Every magnitude seen also
    updates the quantile estimate.
    """
    grads = np.ascontiguousarray(grads, dtype=np.float32).reshape(-1)
    eta = state.eta if eta is None else float(eta)
    if grads.size != state.total:
        raise ValueError(f"expected {state.total} gradients, got {grads.size}")
    oracle_keep = None
    if oracle:
        oracle_keep = select_sort_oracle(state.oracle_magnitudes(grads, eta), state.capacity)
    est = state.estimator
    use_est = est is not None
    q_hat = est.q_hat if use_est else 1.0
    up = est.up if use_est else 1.0
    down = est.down if use_est else 1.0
    size, q_hat, nbuf, inserted, evicted = _track(
        grads, np.float32(-eta), state.t, state.slot_of, state.slot_idx, state.slot_acc,
        state.slot_born, state.heap, state.heap_pos, state.size, state.capacity, q_hat, up, down,
        state.qe_width, state.qe_buf, state.qe_nbuf, use_est,
    )
    if use_est:
        est.q_hat = q_hat
        est.n += (grads.size + state.qe_nbuf) // state.qe_width
    state.size = int(size)
    state.qe_nbuf = int(nbuf)
    state.t += 1
    overlap = None
    if oracle_keep is not None:
        hits = np.count_nonzero(state.slot_of[oracle_keep] >= 0)
        overlap = hits / oracle_keep.size
    return StepStats(state.t, state.density, state.threshold, int(inserted), int(evicted), overlap)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DBCK"
CKPT_VERSION = 1


def checkpoint_bytes(state: TrainState, config_hash: str = "") -> bytes:
    digest = bytes.fromhex(config_hash) if config_hash else b""
    digest = digest.ljust(32, b"\0")[:32]
    est = state.estimator
    q, rho, q_hat, n = est.state() if est else (0.0, 0.0, 0.0, 0)
    parts = [
        struct.pack("<4sH", CKPT_MAGIC, CKPT_VERSION),
        digest,
        struct.pack("<QddIQQ", state.t, state.target_density, state.eta, state.qe_width,
                    state.total, state.capacity),
        struct.pack("<?dddQ", est is not None, q, rho, q_hat, n),
        struct.pack("<I", state.qe_nbuf),
        state.qe_buf.astype("<f8").tobytes(),
        struct.pack("<I", len(state.layers)),
    ]
    for slot in state.layers:
        name = slot.name.encode()
        wr = slot.wr
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", len(slot.shape)) + struct.pack(f"<{len(slot.shape)}I", *slot.shape))
        parts.append(struct.pack("<QQQQ8sdq", slot.offset, wr.seed, wr.fan_in, wr.fan_out,
                                 wr.init.encode(), wr.lam, -1 if wr.cutoff is None else wr.cutoff))
    order = np.argsort(state.slot_idx[: state.size], kind="stable")
    parts.append(struct.pack("<Q", state.size))
    parts.append(state.slot_idx[: state.size][order].astype("<i8").tobytes())
    parts.append(state.slot_acc[: state.size][order].astype("<f4").tobytes())
    parts.append(state.slot_born[: state.size][order].astype("<i4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, fmt: str):
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        arr = np.frombuffer(self.data, dtype, count, self.off)
        self.off += arr.nbytes
        return arr


def load_checkpoint_bytes(data: bytes) -> tuple[TrainState, str]:
    rd = _Reader(data)
    magic, version = rd.take("<4sH")
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError("not a training checkpoint or unsupported version")
    digest = rd.take("<32s")[0]
    t, target, eta, width, total, capacity = rd.take("<QddIQQ")
    has_est, q, rho, q_hat, n = rd.take("<?dddQ")
    (nbuf,) = rd.take("<I")
    qe_buf = rd.array("<f8", 4).astype(np.float64)
    (nlayers,) = rd.take("<I")
    slots = []
    for _ in range(nlayers):
        (ln,) = rd.take("<H")
        name = rd.take(f"<{ln}s")[0].decode()
        (nd,) = rd.take("<B")
        shape = rd.take(f"<{nd}I")
        offset, seed, fan_in, fan_out, init, lam, cutoff = rd.take("<QQQQ8sdq")
        size = int(np.prod(shape))
        wr = WeightRecompute(seed, size, fan_in, fan_out, init.rstrip(b"\0").decode(), lam,
                             None if cutoff < 0 else cutoff)
        slots.append(LayerSlot(name, offset, tuple(shape), wr))
    (size,) = rd.take("<Q")
    idx = rd.array("<i8", size).astype(np.int64)
    acc = rd.array("<f4", size).astype(np.float32)
    born = rd.array("<i4", size).astype(np.int32)
    est = QuantileEstimator(q, rho, q_hat, n) if has_est else None
    state = TrainState(tuple(slots), target, eta, est, width, t)
    state.slot_of = np.full(total, -1, dtype=np.int32)
    state.slot_idx = np.zeros(capacity, dtype=np.int64)
    state.slot_acc = np.zeros(capacity, dtype=np.float32)
    state.slot_born = np.zeros(capacity, dtype=np.int32)
    state.heap = np.zeros(capacity, dtype=np.int32)
    state.heap_pos = np.zeros(capacity, dtype=np.int32)
    state.qe_buf = qe_buf
    state.qe_nbuf = nbuf
    state.slot_idx[:size] = idx
    state.slot_acc[:size] = acc
    state.slot_born[:size] = born
    state.slot_of[idx] = np.arange(size, dtype=np.int32)
    state.size = int(size)
    _rebuild_heap(state)
    return state, (digest.hex() if any(digest) else "")


def _rebuild_heap(state: TrainState) -> None:
    keys = np.abs(state.slot_acc[: state.size])
    order = np.lexsort((-state.slot_idx[: state.size], keys))
    state.heap[: state.size] = order.astype(np.int32)
    state.heap_pos[order] = np.arange(state.size, dtype=np.int32)


def save_checkpoint(state: TrainState, path, config_hash: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state, config_hash))


def load_checkpoint(path) -> tuple[TrainState, str]:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
