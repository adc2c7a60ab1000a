"""Compressed sparse block (CSB) tensors.

A dense tensor is cut into fixed-size 2-D blocks over its two trailing
dimensions; every leading dimension is a block-grid dimension.  Each block
gets a 64-bit occupancy mask (row-major within the block) and a pointer into
one packed value array, so the non-zero count of any block is the difference
of adjacent pointers and never needs a decode.

Conv weights (K, C, R, S) use one R x S kernel per block, FC weights (K, C)
use square fragments, and stored activations (N, C, X, Y) use plane tiles.

Binary layout (all little-endian)::

    magic     4 bytes   b"CSB\\x01"
    version   u16       FORMAT_VERSION
    ndim      u16
    shape     ndim x u32
    block     2 x u16   (rows, cols)
    nblocks   u32
    nvalues   u32
    pointers  (nblocks + 1) x u32
    masks     nblocks x u64
    values    nvalues x f32
"""

from __future__ import annotations

import enum
import io
import itertools
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

MASK_BITS = 64
MAGIC = b"CSB\x01"
FORMAT_VERSION = 1


class CsbError(ValueError):
    """Pointer, mask and value arrays disagree."""


class Transform(enum.Enum):
    IDENTITY = "identity"
    ROTATE180 = "rotate180"
    TRANSPOSE = "transpose"


class Order(enum.Enum):
    K_MAJOR = "k_major"
    C_MAJOR = "c_major"


@dataclass(frozen=True)
class BlockShape:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("block extents must be positive")
        if self.rows * self.cols > MASK_BITS:
            raise ValueError(
                f"block {self.rows}x{self.cols} needs {self.rows * self.cols} mask bits, "
                f"more than {MASK_BITS}"
            )

    @property
    def size(self) -> int:
        return self.rows * self.cols


def _popcount(masks: np.ndarray) -> np.ndarray:
    return np.bitwise_count(masks).astype(np.int64)


_BIT_WEIGHTS = np.left_shift(np.uint64(1), np.arange(MASK_BITS, dtype=np.uint64))


@dataclass(frozen=True, eq=False)
class CsbTensor:
    dense_shape: tuple[int, ...]
    block: BlockShape
    pointers: np.ndarray  # uint32, length nblocks + 1
    masks: np.ndarray  # uint64, block-grid shaped
    values: np.ndarray  # float32

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return tuple(self.masks.shape)

    @property
    def num_blocks(self) -> int:
        return int(self.masks.size)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def density(self) -> float:
        total = int(np.prod(self.dense_shape))
        return self.nnz / total if total else 0.0

    def flat_index(self, coord) -> int:
        coord = tuple(int(c) for c in np.atleast_1d(coord))
        # a conv kernel is one block, so (k, c) is enough to name it
        short = len(self.grid_shape) - len(coord)
        if 0 < short and all(n == 1 for n in self.grid_shape[len(coord):]):
            coord += (0,) * short
        if len(coord) != len(self.grid_shape) or any(
            not 0 <= c < n for c, n in zip(coord, self.grid_shape)
        ):
            raise IndexError(f"block coordinate {coord} outside grid {self.grid_shape}")
        return int(np.ravel_multi_index(coord, self.grid_shape))

    def block_counts(self) -> np.ndarray:
        """Per-block non-zero counts by pointer subtraction, grid shaped."""
        return np.diff(self.pointers.astype(np.int64)).reshape(self.grid_shape)

    def storage_bytes(self) -> int:
        return 4 * self.pointers.size + 8 * self.masks.size + 4 * self.values.size

    def dense_bytes(self) -> int:
        return 4 * int(np.prod(self.dense_shape))

    def __eq__(self, other):
        if not isinstance(other, CsbTensor):
            return NotImplemented
        return (
            self.dense_shape == other.dense_shape
            and self.block == other.block
            and np.array_equal(self.pointers, other.pointers)
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.values, other.values)
        )


def _padded_blocks(dense: np.ndarray, block: BlockShape) -> np.ndarray:
    """View ``dense`` as (*grid, rows*cols) after logical zero padding."""
    *lead, h, w = dense.shape
    gh = -(-h // block.rows)
    gw = -(-w // block.cols)
    if gh * block.rows != h or gw * block.cols != w:
        pad = [(0, 0)] * len(lead) + [(0, gh * block.rows - h), (0, gw * block.cols - w)]
        dense = np.pad(dense, pad)
    blocks = dense.reshape(*lead, gh, block.rows, gw, block.cols)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3]
    blocks = blocks.transpose(order)
    return blocks.reshape(*lead, gh, gw, block.size)


def encode(dense, block: BlockShape) -> CsbTensor:
    dense = np.asarray(dense, dtype=np.float32)
    if dense.ndim < 2:
        raise ValueError("CSB tensors need at least two dimensions")
    blocks = _padded_blocks(dense, block)
    grid = blocks.shape[:-1]
    flat = blocks.reshape(-1, block.size)
    nz = flat != 0
    masks = (nz.astype(np.uint64) * _BIT_WEIGHTS[: block.size]).sum(axis=1, dtype=np.uint64)
    counts = nz.sum(axis=1)
    pointers = np.zeros(flat.shape[0] + 1, dtype=np.uint32)
    np.cumsum(counts, out=pointers[1:])
    values = np.ascontiguousarray(flat[nz], dtype=np.float32)
    return CsbTensor(tuple(dense.shape), block, pointers, masks.reshape(grid), values)


def validate(t: CsbTensor) -> None:
    """Raise :class:`CsbError` unless the three arrays are mutually consistent."""
    ptr = t.pointers.astype(np.int64)
    if ptr.size != t.num_blocks + 1:
        raise CsbError(f"{ptr.size} pointers for {t.num_blocks} blocks")
    if ptr[0] != 0:
        raise CsbError("first pointer must be 0")
    deltas = np.diff(ptr)
    if np.any(deltas < 0):
        raise CsbError("pointer array is not monotone")
    masks = t.masks.reshape(-1)
    if t.block.size < MASK_BITS and np.any(masks >> np.uint64(t.block.size)):
        raise CsbError("mask bits set outside the block region")
    bad = np.flatnonzero(deltas != _popcount(masks))
    if bad.size:
        raise CsbError(f"pointer delta disagrees with mask popcount at block {int(bad[0])}")
    if ptr[-1] != t.values.size:
        raise CsbError(f"sentinel pointer {int(ptr[-1])} != {t.values.size} stored values")
    if np.any(t.values == 0):
        raise CsbError("explicit zero stored in value array")
    *lead, h, w = t.dense_shape
    expect = tuple(lead) + (-(-h // t.block.rows), -(-w // t.block.cols))
    if t.grid_shape != expect:
        raise CsbError(f"grid {t.grid_shape} does not match dense shape {t.dense_shape}")


def _unpack_masks(masks: np.ndarray, size: int) -> np.ndarray:
    flat = masks.reshape(-1, 1)
    return (flat & _BIT_WEIGHTS[:size]) != 0


def decode(t: CsbTensor) -> np.ndarray:
    validate(t)
    nz = _unpack_masks(t.masks, t.block.size)
    flat = np.zeros(nz.shape, dtype=np.float32)
    flat[nz] = t.values
    *lead, h, w = t.dense_shape
    gh, gw = t.grid_shape[-2:]
    br, bc = t.block.rows, t.block.cols
    blocks = flat.reshape(*lead, gh, gw, br, bc)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3]
    dense = blocks.transpose(order).reshape(*lead, gh * br, gw * bc)
    return np.ascontiguousarray(dense[..., :h, :w])


def block_nnz(t: CsbTensor, coord) -> int:
    i = t.flat_index(coord)
    return int(t.pointers[i + 1]) - int(t.pointers[i])


def fetch_block(t: CsbTensor, coord, transform: Transform | str = Transform.IDENTITY) -> np.ndarray:
    """Unpack one block, applying the transform to positions on the way out."""
    transform = Transform(transform)
    i = t.flat_index(coord)
    lo, hi = int(t.pointers[i]), int(t.pointers[i + 1])
    mask = t.masks.reshape(-1)[i]
    nz = (mask & _BIT_WEIGHTS[: t.block.size]) != 0
    out = np.zeros(t.block.size, dtype=np.float32)
    out[nz] = t.values[lo:hi]
    if transform is Transform.ROTATE180:
        return out[::-1].reshape(t.block.rows, t.block.cols)
    out = out.reshape(t.block.rows, t.block.cols)
    if transform is Transform.TRANSPOSE:
        return out.T.copy()
    return out


def iterate_blocks(t: CsbTensor, order: Order | str = Order.K_MAJOR) -> Iterator[tuple[tuple[int, ...], np.ndarray]]:
    """Yield ``(coord, block)`` for every block of a weight tensor.

    The first two grid axes are (K, C) for conv weights and (K-fragment,
    C-fragment) for FC matrices.  ``k_major`` walks K outermost, ``c_major``
    walks C outermost; coordinates are always reported in (k, c, ...) form.
    """
    order = Order(order)
    grid = t.grid_shape
    if len(grid) < 2:
        raise ValueError("iteration needs a (K, C, ...) block grid")
    k_range, c_range = range(grid[0]), range(grid[1])
    rest = [range(n) for n in grid[2:]]
    outer = itertools.product(k_range, c_range) if order is Order.K_MAJOR else (
        (k, c) for c, k in itertools.product(c_range, k_range)
    )
    for k, c in outer:
        for tail in itertools.product(*rest):
            coord = (k, c) + tail
            yield coord, fetch_block(t, coord)


def kc_counts(t: CsbTensor) -> np.ndarray:
    """Non-zeros per (k, c) weight pair.

    For conv weights this is pure pointer subtraction.  FC fragments hold
    many (k, c) pairs each, so their masks are unpacked bit by bit.
    """
    if len(t.dense_shape) == 4:
        counts = t.block_counts()
        return counts.reshape(counts.shape[0], counts.shape[1])
    if len(t.dense_shape) == 2:
        nz = _unpack_masks(t.masks, t.block.size)
        gk, gc = t.grid_shape
        grid = nz.reshape(gk, gc, t.block.rows, t.block.cols).transpose(0, 2, 1, 3)
        k, c = t.dense_shape
        return grid.reshape(gk * t.block.rows, gc * t.block.cols)[:k, :c].astype(np.int64)
    raise ValueError("kc_counts expects conv (K,C,R,S) or fc (K,C) weights")


def plane_counts(t: CsbTensor) -> np.ndarray:
    """Non-zeros per (n, c) plane of an (N, C, X, Y) activation tensor."""
    if len(t.dense_shape) != 4:
        raise ValueError("plane_counts expects (N, C, X, Y) activations")
    return t.block_counts().sum(axis=(2, 3))


def weight_block(layer_kind: str, weight_shape) -> BlockShape:
    """Default block for a layer: the whole kernel, or an 8x8 FC fragment."""
    if layer_kind == "fc":
        return BlockShape(8, 8)
    return BlockShape(int(weight_shape[2]), int(weight_shape[3]))


def activation_block(shape) -> BlockShape:
    return BlockShape(min(int(shape[-2]), 8), min(int(shape[-1]), 8))


_HEADER = struct.Struct("<4sHH")


def to_bytes(t: CsbTensor) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(t.dense_shape)))
    buf.write(struct.pack(f"<{len(t.dense_shape)}I", *t.dense_shape))
    buf.write(struct.pack("<HHII", t.block.rows, t.block.cols, t.num_blocks, t.nnz))
    buf.write(t.pointers.astype("<u4").tobytes())
    buf.write(t.masks.reshape(-1).astype("<u8").tobytes())
    buf.write(t.values.astype("<f4").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> CsbTensor:
    if not data:
        raise CsbError("empty CSB file")
    try:
        magic, version, ndim = _HEADER.unpack_from(data, 0)
    except struct.error as exc:
        raise CsbError("truncated CSB header") from exc
    if magic != MAGIC:
        raise CsbError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CsbError(f"unsupported CSB format version {version}")
    off = _HEADER.size
    try:
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        rows, cols, nblocks, nvalues = struct.unpack_from("<HHII", data, off)
        off += 12
    except struct.error as exc:
        raise CsbError("truncated CSB header") from exc
    need = off + 4 * (nblocks + 1) + 8 * nblocks + 4 * nvalues
    if len(data) != need:
        raise CsbError(f"expected {need} bytes, got {len(data)}")
    pointers = np.frombuffer(data, "<u4", nblocks + 1, off).astype(np.uint32)
    off += 4 * (nblocks + 1)
    masks = np.frombuffer(data, "<u8", nblocks, off).astype(np.uint64)
    off += 8 * nblocks
    values = np.frombuffer(data, "<f4", nvalues, off).astype(np.float32)
    block = BlockShape(rows, cols)
    *lead, h, w = shape
    grid = tuple(lead) + (-(-h // rows), -(-w // cols))
    if int(np.prod(grid)) != nblocks:
        raise CsbError("block count does not match dense shape")
    t = CsbTensor(tuple(shape), block, pointers, masks.reshape(grid), values)
    validate(t)
    return t


def save(t: CsbTensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load(path) -> CsbTensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
