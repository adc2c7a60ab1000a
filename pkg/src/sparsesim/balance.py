"""Half-tile load balancing and imbalance statistics.

Every PE's work tile is cut in half along the sparse spatial dimension and
the halves of one wave are re-paired densest-with-sparsest, so each PE ends
up with one dense and one sparse half.  The object API (:class:`WorkTile`,
:func:`split_half`, :func:`pair_halves`) states the rule directly; the
array helpers at the bottom apply the same rule to many waves at once for
the cost model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class WorkTile:
    """Contiguous slice ``[lo, hi)`` of the balanced dimension.

    ``profile[u]`` is the non-zero MAC count of unit ``lo + u`` summed over
    the PE's whole temporal workload; ``unit_dense`` is the dense MAC count
    of one unit.
    """

    lo: int
    hi: int
    profile: tuple[int, ...]
    unit_dense: int = 0
    index: int = 0

    def __post_init__(self):
        if self.hi < self.lo:
            raise ValueError("empty-or-positive extent required")
        if len(self.profile) != self.hi - self.lo:
            raise ValueError("profile length must equal the tile extent")
        if any(v < 0 for v in self.profile):
            raise ValueError("nnz counts must be non-negative")
        if self.unit_dense and any(v > self.unit_dense for v in self.profile):
            raise ValueError("nnz exceeds dense count")

    @classmethod
    def from_counts(cls, counts: Sequence[int], lo: int = 0, unit_dense: int = 0, index: int = 0):
        counts = tuple(int(c) for c in counts)
        return cls(lo, lo + len(counts), counts, unit_dense, index)

    @property
    def extent(self) -> int:
        return self.hi - self.lo

    @property
    def nnz(self) -> int:
        return sum(self.profile)

    @property
    def dense(self) -> int:
        return self.unit_dense * self.extent


@dataclass(frozen=True)
class TilePair:
    """Two half-tiles executed by one PE."""

    first: WorkTile
    second: WorkTile

    @property
    def nnz(self) -> int:
        return self.first.nnz + self.second.nnz

    @property
    def dense(self) -> int:
        return self.first.dense + self.second.dense


@dataclass(frozen=True)
class Wave:
    """One work tile per PE group along the balanced dimension."""

    tiles: tuple[WorkTile, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))

    @classmethod
    def from_profiles(cls, profiles: Iterable[Sequence[int]], unit_dense: int = 0) -> "Wave":
        tiles, lo = [], 0
        for i, prof in enumerate(profiles):
            tiles.append(WorkTile.from_counts(prof, lo, unit_dense, i))
            lo += len(prof)
        return cls(tuple(tiles))

    def loads(self, balanced: bool = False) -> list[int]:
        if not balanced:
            return [t.nnz for t in self.tiles]
        halves = [h for t in self.tiles for h in split_half(t)]
        return [p.nnz for p in pair_halves(halves)]


def split_half(tile: WorkTile) -> tuple[WorkTile, WorkTile]:
    """Cut at the midpoint; the first half gets the smaller share of an odd extent."""
    if tile.extent < 2:
        empty = WorkTile(tile.hi, tile.hi, (), tile.unit_dense, 2 * tile.index + 1)
        return _replace_index(tile, 2 * tile.index), empty
    mid = tile.extent // 2
    a = WorkTile(tile.lo, tile.lo + mid, tile.profile[:mid], tile.unit_dense, 2 * tile.index)
    b = WorkTile(tile.lo + mid, tile.hi, tile.profile[mid:], tile.unit_dense, 2 * tile.index + 1)
    return a, b


def _replace_index(tile: WorkTile, index: int) -> WorkTile:
    return WorkTile(tile.lo, tile.hi, tile.profile, tile.unit_dense, index)


def pair_order(loads: Sequence[float]) -> list[tuple[int, int]]:
    """Pairing as index pairs: sorted position i with position n-1-i.

    Sorting is stable on (load, original position).
    """
    n = len(loads)
    if n % 2:
        raise ValueError(f"pairing needs an even number of halves, got {n}")
    order = sorted(range(n), key=lambda i: (loads[i], i))
    return [(order[n - 1 - i], order[i]) for i in range(n // 2)]


def pair_halves(halves: Sequence[WorkTile]) -> list[TilePair]:
    """Densest half with sparsest, second densest with second sparsest, ..."""
    pairs = pair_order([h.nnz for h in halves])
    return [TilePair(halves[a], halves[b]) for a, b in pairs]


def overhead(loads: Sequence[float]) -> float:
    """max / mean - 1; zero for an idle wave."""
    loads = np.asarray(loads, dtype=np.float64)
    if loads.size == 0:
        raise ValueError("empty wave")
    mean = loads.mean()
    return 0.0 if mean == 0 else float(loads.max() / mean - 1.0)


def wave_overhead(wave: Wave, balanced: bool = False) -> float:
    return overhead(wave.loads(balanced))


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    bin_width: float

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def fractions(self) -> tuple[float, ...]:
        n = self.total
        return tuple(c / n if n else 0.0 for c in self.counts)

    def rows(self) -> list[tuple[float, int, float]]:
        return list(zip(self.edges, self.counts, self.fractions))

    def to_csv(self) -> str:
        lines = ["bin_lower,count,fraction"]
        lines += [f"{e:.4f},{c},{f:.6f}" for e, c, f in self.rows()]
        return "\n".join(lines) + "\n"


def histogram(overheads: Iterable[float], bin_width: float = 0.05) -> Histogram:
    """Fixed-width bins from 0 up to the bin holding the largest value."""
    vals = np.asarray(list(overheads), dtype=np.float64)
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    if vals.size == 0:
        return Histogram((0.0,), (0,), bin_width)
    # tolerate float noise just below a bin edge
    bins = np.floor(vals / bin_width + 1e-9).astype(np.int64)
    nb = int(bins.max()) + 1
    counts = np.bincount(bins, minlength=nb)
    edges = tuple(round(i * bin_width, 10) for i in range(nb))
    return Histogram(edges, tuple(int(c) for c in counts), bin_width)


def imbalance_histogram(waves: Iterable[Wave], balanced: bool = False, bin_width: float = 0.05) -> Histogram:
    return histogram((wave_overhead(w, balanced) for w in waves), bin_width)


# -- array forms used by the cost model ------------------------------------


def paired_loads(halves: np.ndarray) -> np.ndarray:
    """Apply the pairing rule along the last axis of ``halves`` (even length).

    Returns loads with half the last-axis length, pair i being the i-th
    densest half plus the i-th sparsest.
    """
    halves = np.asarray(halves)
    n = halves.shape[-1]
    if n % 2:
        raise ValueError("pairing needs an even number of halves")
    s = np.sort(halves, axis=-1, kind="stable")
    return s[..., ::-1][..., : n // 2] + s[..., : n // 2]


def pairing_permutation(halves: np.ndarray, busy: np.ndarray | None = None) -> np.ndarray:
    """For each wave (leading axes), the index of the half that lands at each
    position of the paired layout: positions 2i and 2i+1 hold pair i.

    ``busy`` (shape ``(..., n // 2)``) marks the groups that hold work; only
    their halves are re-paired and idle groups keep their own halves, so
    balancing never spills work onto otherwise unused hardware.
    """
    halves = np.asarray(halves)
    n = halves.shape[-1]
    if n % 2:
        raise ValueError("pairing needs an even number of halves")
    if busy is None:
        order = np.argsort(halves, axis=-1, kind="stable")
        out = np.empty(halves.shape, dtype=np.int64)
        out[..., 0::2] = order[..., ::-1][..., : n // 2]
        out[..., 1::2] = order[..., : n // 2]
        return out
    flat = halves.reshape(-1, n)
    groups = np.broadcast_to(busy, halves.shape[:-1] + (n // 2,)).reshape(-1, n // 2)
    out = np.tile(np.arange(n, dtype=np.int64), (flat.shape[0], 1))
    for w in range(flat.shape[0]):
        g = np.flatnonzero(groups[w])
        slots = np.stack([2 * g, 2 * g + 1], axis=1).reshape(-1)
        if slots.size:
            out[w, slots] = slots[pairing_permutation(flat[w, slots])]
    return out.reshape(halves.shape)


def grouped_loads(halves: np.ndarray, busy: np.ndarray | None = None) -> np.ndarray:
    """Per-group loads after re-pairing, in group order (see :func:`pairing_permutation`)."""
    halves = np.asarray(halves)
    perm = pairing_permutation(halves, busy)
    moved = np.take_along_axis(halves, perm, axis=-1)
    return moved.reshape(halves.shape[:-1] + (-1, 2)).sum(axis=-1)


def optimal_max_load(loads: Sequence[float]) -> float:
    """Brute force over all perfect matchings (exponential; tests only)."""
    loads = list(loads)
    if len(loads) % 2:
        raise ValueError("odd count")

    def best(rest: list[float]) -> float:
        if not rest:
            return -math.inf
        first, others = rest[0], rest[1:]
        result = math.inf
        for j in range(len(others)):
            cand = max(first + others[j], best(others[:j] + others[j + 1 :]))
            result = min(result, cand)
        return result

    return best(loads) if loads else 0.0


def all_matchings(n: int):
    """Every perfect matching of ``range(n)`` as a list of pairs."""
    if n == 0:
        yield []
        return
    for j in range(1, n):
        rest = [i for i in range(1, n) if i != j]
        for sub in all_matchings(len(rest)):
            yield [(0, j)] + [(rest[a], rest[b]) for a, b in sub]
