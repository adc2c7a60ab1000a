"""Layer geometry, training phases and dense operation counts.

Every other module consumes :class:`LayerShape` and :class:`Network`.  A layer
is the seven-dimensional operation space (N, C, K, R, S, P, Q) of a
convolution; fully connected layers are the degenerate case R=S=P=Q=1 and
pooling layers are MAC-free pass-throughs that only reshape activations.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator


class Phase(enum.Enum):
    FORWARD = "fw"
    BACKWARD = "bw"
    WEIGHT_UPDATE = "wu"

    @property
    def sparse_operand(self) -> str:
        """Operand whose zeros the accelerator skips in this phase.

        The back-propagated gradient dL/dy is always treated as dense.
        """
        return "iacts" if self is Phase.WEIGHT_UPDATE else "weights"


PHASES = (Phase.FORWARD, Phase.BACKWARD, Phase.WEIGHT_UPDATE)

KINDS = ("conv", "fc", "pool")


@dataclass(frozen=True)
class LayerShape:
    kind: str
    N: int
    C: int
    K: int
    R: int = 1
    S: int = 1
    P: int = 1
    Q: int = 1
    stride: int = 1
    pad: int = 0
    name: str = ""
    relu: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for dim in ("N", "C", "K", "R", "S", "P", "Q"):
            if getattr(self, dim) < 1:
                raise ValueError(f"{dim} must be >= 1, got {getattr(self, dim)}")
        if self.stride not in (1, 2):
            raise ValueError("only stride 1 and 2 are supported")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        if self.kind == "fc" and (self.R, self.S, self.P, self.Q) != (1, 1, 1, 1):
            raise ValueError("fc layers require R=S=P=Q=1")
        if self.kind == "pool":
            if self.C != self.K:
                raise ValueError("pool layers require C == K")
            if self.pad:
                raise ValueError("pool layers take no padding")
        if self.pad > self.R - 1 or self.pad > self.S - 1:
            raise ValueError("pad must not exceed filter extent - 1")
        if self.X < 1 or self.Y < 1:
            raise ValueError("input activation extent must be >= 1")

    @property
    def X(self) -> int:
        """Input activation height."""
        return (self.P - 1) * self.stride + self.R - 2 * self.pad

    @property
    def Y(self) -> int:
        return (self.Q - 1) * self.stride + self.S - 2 * self.pad

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv", "fc")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "fc":
            return (self.K, self.C)
        return (self.K, self.C, self.R, self.S)

    @property
    def num_weights(self) -> int:
        return math.prod(self.weight_shape) if self.has_weights else 0

    @property
    def iact_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.C, self.X, self.Y)

    @property
    def oact_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.K, self.P, self.Q)

    @property
    def iact_volume(self) -> int:
        return self.C * self.X * self.Y

    @property
    def oact_volume(self) -> int:
        return self.K * self.P * self.Q

    def with_batch(self, n: int) -> "LayerShape":
        return replace(self, N=n)

    def to_dict(self) -> dict:
        return asdict(self)


def _valid_pairs(out_extent: int, filt: int, stride: int, pad: int, in_extent: int) -> int:
    """Number of (output, filter) index pairs that land inside the unpadded input."""
    count = 0
    for r in range(filt):
        for p in range(out_extent):
            if 0 <= p * stride + r - pad < in_extent:
                count += 1
    return count


def dense_macs(layer: LayerShape, phase: Phase) -> int:
    """Multiply-accumulates performed by the dense computation of one phase.

    Forward and weight update both sweep the full N*C*K*R*S*P*Q loop nest.
    The backward pass is a full convolution of dL/dy with the rotated
    filters; products against the implicit zero padding of dL/dy are not
    counted, so it touches exactly the (r, p) pairs that hit unpadded input.
    """
    if layer.kind == "pool":
        return 0
    full = layer.N * layer.C * layer.K * layer.R * layer.S * layer.P * layer.Q
    if phase is not Phase.BACKWARD or layer.pad == 0:
        return full
    rows = _valid_pairs(layer.P, layer.R, layer.stride, layer.pad, layer.X)
    cols = _valid_pairs(layer.Q, layer.S, layer.stride, layer.pad, layer.Y)
    return layer.N * layer.C * layer.K * rows * cols


def sparse_macs(layer: LayerShape, phase: Phase, nnz_fraction: float) -> int:
    if not 0.0 <= nnz_fraction <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {nnz_fraction}")
    return math.ceil(dense_macs(layer, phase) * nnz_fraction)


@dataclass(frozen=True)
class Network:
    name: str
    layers: tuple[LayerShape, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.oact_volume != nxt.iact_volume:
                raise ValueError(
                    f"{prev.name} produces {prev.oact_volume} activations per sample "
                    f"but {nxt.name} consumes {nxt.iact_volume}"
                )
            if prev.N != nxt.N:
                raise ValueError("all layers must share the minibatch size")

    def __iter__(self) -> Iterator[LayerShape]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def weighted_layers(self) -> list[LayerShape]:
        return [l for l in self.layers if l.has_weights]

    @property
    def num_weights(self) -> int:
        return sum(l.num_weights for l in self.layers)

    def layer(self, name: str) -> LayerShape:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def with_batch(self, n: int) -> "Network":
        return Network(self.name, tuple(l.with_batch(n) for l in self.layers))

    def total_dense_macs(self, phases: Iterable[Phase] = PHASES) -> int:
        phases = tuple(phases)
        return sum(dense_macs(l, ph) for l in self.layers for ph in phases)

    def to_dict(self) -> dict:
        return {"name": self.name, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        layers = []
        for i, entry in enumerate(data["layers"]):
            entry = dict(entry)
            entry.setdefault("name", f"{entry['kind']}{i}")
            layers.append(LayerShape(**entry))
        return cls(data.get("name", "network"), tuple(layers))


def load_network(path: str | Path) -> Network:
    with open(path) as fh:
        return Network.from_dict(json.load(fh))


def save_network(network: Network, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(network.to_dict(), fh, indent=2, sort_keys=True)


def _conv(name, n, c, k, out, r=3, pad=1, stride=1):
    return LayerShape("conv", n, c, k, r, r, out, out, stride, pad, name=name)


def _pool(name, n, c, out):
    return LayerShape("pool", n, c, c, 2, 2, out, out, 2, 0, name=name, relu=False)


def toy_network(batch: int = 32, classes: int = 6) -> Network:
    """The refnet model: three 3x3 conv layers and one classifier on 16x16 inputs."""
    n = batch
    return Network(
        "toy",
        (
            _conv("conv1", n, 1, 32, 16),
            _pool("pool1", n, 32, 8),
            _conv("conv2", n, 32, 64, 8),
            _pool("pool2", n, 64, 4),
            _conv("conv3", n, 64, 64, 4),
            LayerShape("fc", n, 64 * 4 * 4, classes, name="fc", relu=False),
        ),
    )


def vgg_mini_network(batch: int = 32, classes: int = 10) -> Network:
    """A shape-only VGG-style stack on 32x32 inputs, used for cost-model studies."""
    n = batch
    return Network(
        "vgg-mini",
        (
            _conv("conv1", n, 3, 64, 32),
            _conv("conv2", n, 64, 64, 32),
            _pool("pool1", n, 64, 16),
            _conv("conv3", n, 64, 128, 16),
            _conv("conv4", n, 128, 128, 16),
            _pool("pool2", n, 128, 8),
            _conv("conv5", n, 128, 256, 8),
            _conv("conv6", n, 256, 256, 8),
            _pool("pool3", n, 256, 4),
            LayerShape("fc", n, 256 * 4 * 4, classes, name="fc", relu=False),
        ),
    )


PRESETS = {"toy": toy_network, "vgg-mini": vgg_mini_network}


def preset(name: str, batch: int | None = None) -> Network:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown network preset {name!r}; known: {sorted(PRESETS)}") from None
    return factory() if batch is None else factory(batch=batch)


def resolve_network(spec: str, batch: int | None = None) -> Network:
    """Preset name or path to a JSON network description."""
    if spec in PRESETS:
        return preset(spec, batch)
    net = load_network(spec)
    return net if batch is None else net.with_batch(batch)

