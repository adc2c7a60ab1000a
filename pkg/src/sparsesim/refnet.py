"""Reference trainer: explicit forward, backward and weight-update passes.

Activations are NCHW float32 arrays and conv weights are (K, C, R, S).  The
backward pass is the full convolution of dL/dy with 180-degree rotated
filters and the weight update correlates the input activations with dL/dy,
summed over the minibatch.  Training runs Dropback selection
(:mod:`sparsesim.sparsetrain`) in the loop and records the weight masks and
activation sparsity that the cost model consumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import csb
from .sparsetrain import DEFAULT_CUTOFF, DEFAULT_DECAY, StepStats, TrainState, train_step
from .workload import LayerShape, Network, resolve_network, toy_network

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, R: int, S: int, stride: int) -> np.ndarray:
    """(N, C, P, Q, R, S) view of every receptive field."""
    win = sliding_window_view(x, (R, S), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


# -- convolution -------------------------------------------------------------


def conv_forward(x, w, stride=1, pad=0):
    K, C, R, S = w.shape
    _check(x.ndim == 4 and x.shape[1] == C, f"iacts {x.shape} do not match weights {w.shape}")
    win = _windows(_pad(x, pad), R, S, stride)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv_backward(dy, w, stride=1, pad=0):
    """dL/dx as a full convolution of dL/dy with rotated filters."""
    K, C, R, S = w.shape
    _check(dy.ndim == 4 and dy.shape[1] == K, f"gradient {dy.shape} does not match weights {w.shape}")
    N, _, P, Q = dy.shape
    if stride > 1:
        dil = np.zeros((N, K, (P - 1) * stride + 1, (Q - 1) * stride + 1), dtype=dy.dtype)
        dil[:, :, ::stride, ::stride] = dy
        dy = dil
    ph, pw = R - 1 - pad, S - 1 - pad
    dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    rot = w[:, :, ::-1, ::-1]
    win = _windows(dyp, R, S, 1)
    dx = np.tensordot(win, rot, axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv_weight_grad(x, dy, R, S, stride=1, pad=0):
    win = _windows(_pad(x, pad), R, S, stride)
    _check(win.shape[2:4] == dy.shape[2:4] and win.shape[0] == dy.shape[0],
           f"iacts {x.shape} and gradient {dy.shape} disagree")
    return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))


# -- pooling -------------------------------------------------------------------


def pool_forward(x):
    N, C, X, Y = x.shape
    _check(X % 2 == 0 and Y % 2 == 0, "2x2 pooling needs even extents")
    tiles = x.reshape(N, C, X // 2, 2, Y // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, X // 2, Y // 2, 4)
    arg = tiles.argmax(axis=-1)
    return np.take_along_axis(tiles, arg[..., None], -1)[..., 0], arg


def pool_backward(dy, arg):
    N, C, P, Q = dy.shape
    tiles = np.zeros((N, C, P, Q, 4), dtype=dy.dtype)
    np.put_along_axis(tiles, arg[..., None], dy[..., None], -1)
    return tiles.reshape(N, C, P, Q, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * P, 2 * Q)


# -- layer-level passes --------------------------------------------------------


def forward(layer: LayerShape, x, w=None):
    """Linear part of a layer's forward pass (no activation function)."""
    if layer.kind == "conv":
        _check(tuple(w.shape) == layer.weight_shape, f"weights {w.shape} != {layer.weight_shape}")
        _check(x.shape[2:] == (layer.X, layer.Y), f"iacts {x.shape} != {layer.iact_shape}")
        return conv_forward(x, w, layer.stride, layer.pad)
    if layer.kind == "fc":
        flat = x.reshape(x.shape[0], -1)
        _check(flat.shape[1] == layer.C and tuple(w.shape) == layer.weight_shape,
               f"fc shapes {x.shape} x {w.shape} disagree with {layer.weight_shape}")
        return flat @ w.T
    return pool_forward(x)[0]


def backward(layer: LayerShape, dy, w=None, x_shape=None):
    """dL/dx from dL/dy: rotated-filter convolution, or W^T for fc."""
    if layer.kind == "conv":
        _check(tuple(w.shape) == layer.weight_shape, f"weights {w.shape} != {layer.weight_shape}")
        _check(dy.shape[1:] == layer.oact_shape[1:], f"gradient {dy.shape} != {layer.oact_shape}")
        return conv_backward(dy, w, layer.stride, layer.pad)
    if layer.kind == "fc":
        _check(dy.shape[1] == layer.K, f"gradient {dy.shape} does not have {layer.K} outputs")
        dx = dy @ w
        return dx if x_shape is None else dx.reshape(x_shape)
    raise ValueError("pool layers need the forward argmax; use pool_backward")


def weight_update_grad(layer: LayerShape, x, dy):
    if layer.kind == "conv":
        _check(x.shape[1:] == layer.iact_shape[1:] and dy.shape[1:] == layer.oact_shape[1:],
               "activation shapes disagree with layer")
        return conv_weight_grad(x, dy, layer.R, layer.S, layer.stride, layer.pad)
    if layer.kind == "fc":
        flat = x.reshape(x.shape[0], -1)
        _check(flat.shape[1] == layer.C and dy.shape[1] == layer.K, "fc shapes disagree")
        return dy.T @ flat
    raise ValueError("pool layers have no weights")


def softmax_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-30))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class Pass:
    """Per-layer tensors from one forward/backward sweep."""

    x: dict = field(default_factory=dict)
    y: dict = field(default_factory=dict)
    dy: dict = field(default_factory=dict)
    dw: dict = field(default_factory=dict)
    loss: float = 0.0
    logits: np.ndarray | None = None


def network_forward(net: Network, weights: dict, x):
    """Run all layers; returns logits and the per-layer cache."""
    cache = Pass()
    h = x
    for layer in net:
        cache.x[layer.name] = h
        if layer.kind == "pool":
            h, arg = pool_forward(h)
            cache.y[layer.name] = arg
            continue
        y = forward(layer, h, weights[layer.name])
        if layer.relu:
            y = np.maximum(y, 0)
        cache.y[layer.name] = y
        h = y
    cache.logits = h
    return h, cache


def network_grads(net: Network, weights: dict, x, labels) -> Pass:
    logits, cache = network_forward(net, weights, x)
    cache.loss, g = softmax_cross_entropy(logits, labels)
    for layer in reversed(net.layers):
        xin = cache.x[layer.name]
        if layer.kind == "pool":
            g = pool_backward(g, cache.y[layer.name])
            continue
        if layer.relu:
            g = g * (cache.y[layer.name] > 0)
        cache.dy[layer.name] = g
        cache.dw[layer.name] = weight_update_grad(layer, xin, g)
        if layer is not net.layers[0]:
            g = backward(layer, g, weights[layer.name], xin.shape)
    return cache


def accuracy(net: Network, weights: dict, images, labels, batch: int = 500) -> float:
    hits = 0
    for lo in range(0, len(labels), batch):
        logits, _ = network_forward(net, weights, images[lo : lo + batch])
        hits += int(np.count_nonzero(logits.argmax(axis=1) == labels[lo : lo + batch]))
    return hits / len(labels)


# -- toy dataset -------------------------------------------------------------

SHAPES = ("hbar", "vbar", "diag", "antidiag", "square", "cross")


def _draw(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float32)
    level = rng.uniform(0.6, 1.0)
    length = int(rng.integers(6, 13))
    lo = int(rng.integers(0, size - length + 1))
    at = int(rng.integers(1, size - 2))
    if kind == 0:
        img[at : at + 2, lo : lo + length] = level
    elif kind == 1:
        img[lo : lo + length, at : at + 2] = level
    elif kind in (2, 3):
        lo2 = int(rng.integers(0, size - length + 1))
        for i in range(length):
            col = lo2 + i if kind == 2 else lo2 + length - 1 - i
            img[lo + i, col] = level
            if col + 1 < size:
                img[lo + i, col + 1] = level
    elif kind == 4:
        side = int(rng.integers(5, 10))
        r0, c0 = (int(v) for v in rng.integers(0, size - side + 1, size=2))
        img[r0, c0 : c0 + side] = level
        img[r0 + side - 1, c0 : c0 + side] = level
        img[r0 : r0 + side, c0] = level
        img[r0 : r0 + side, c0 + side - 1] = level
    else:
        arm = int(rng.integers(3, 6))
        cr, cc = (int(v) for v in rng.integers(arm, size - arm, size=2))
        img[cr - arm : cr + arm + 1, cc] = level
        img[cr, cc - arm : cc + arm + 1] = level
    return img


def make_toy_dataset(n: int, seed: int, size: int = 16, classes: int = 6, noise: float = 0.15):
    """Deterministic synthetic line/shape images, background clipped at zero."""
    if not 2 <= classes <= len(SHAPES):
        raise ValueError(f"toy dataset supports 2..{len(SHAPES)} classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    images = np.stack([_draw(int(k), rng, size) for k in labels])
    images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return images[:, None].astype(np.float32), labels.astype(np.int64)


def load_image_set(path):
    """Images/labels from a local ``.npz`` (keys ``images`` and ``labels``)."""
    with np.load(path) as data:
        images = np.asarray(data["images"], dtype=np.float32)
        labels = np.asarray(data["labels"], dtype=np.int64)
    if images.ndim == 3:
        images = images[:, None]
    return images, labels


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    network: str = "toy"
    target_density: float = 0.2
    lam: float = DEFAULT_DECAY
    cutoff: int | None = DEFAULT_CUTOFF
    batch: int = 32
    seed: int = 7
    eta: float = 0.2
    # eta is multiplied by eta_drop at each milestone (fractions of the run)
    eta_milestones: tuple = (0.5, 0.75)
    eta_drop: float = 0.2
    iterations: int = 2000
    eval_every: int = 100
    snapshot_every: int = 500
    oracle: bool = False
    qe_width: int = 1
    n_train: int = 8000
    n_val: int = 2000
    classes: int = 6
    dataset: str | None = None

    @property
    def dense(self) -> bool:
        return self.target_density >= 1.0

    def eta_at(self, it: int) -> float:
        drops = sum(1 for m in self.eta_milestones if it >= int(m * self.iterations))
        return self.eta * self.eta_drop**drops


@dataclass
class Snapshot:
    t: int
    weights: dict  # layer name -> CsbTensor of effective weights
    iacts: dict  # layer name -> CsbTensor of that layer's input activations
    density: float


@dataclass
class TrainingResult:
    config: TrainConfig
    network: Network
    state: TrainState
    accuracy: list  # (iteration, validation accuracy)
    steps: list  # StepStats per iteration
    losses: list
    snapshots: list
    act_density: dict  # layer name -> mean input-activation density

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1][1]


def _snapshot(net: Network, state: TrainState, cache: Pass) -> Snapshot:
    weights, iacts = {}, {}
    for layer in net.weighted_layers:
        w = state.effective_weights(layer.name)
        weights[layer.name] = csb.encode(w, csb.weight_block(layer.kind, layer.weight_shape))
        x = cache.x[layer.name]
        if layer.kind == "fc":
            x = x.reshape(x.shape[0], layer.C, 1, 1)
        iacts[layer.name] = csb.encode(x, csb.activation_block(x.shape))
    return Snapshot(state.t, weights, iacts, state.density)


def run_training(cfg: TrainConfig, progress=None) -> TrainingResult:
    if cfg.network == "toy":
        net = toy_network(cfg.batch, cfg.classes)
    else:
        net = resolve_network(cfg.network, cfg.batch)
    if cfg.dataset:
        images, labels = load_image_set(cfg.dataset)
        split = int(0.8 * len(labels))
        train_x, train_y, val_x, val_y = images[:split], labels[:split], images[split:], labels[split:]
    else:
        images, labels = make_toy_dataset(cfg.n_train + cfg.n_val, cfg.seed, classes=cfg.classes)
        train_x, train_y = images[: cfg.n_train], labels[: cfg.n_train]
        val_x, val_y = images[cfg.n_train :], labels[cfg.n_train :]
    lam, cutoff = (1.0, None) if cfg.lam >= 1.0 else (cfg.lam, cfg.cutoff)
    state = TrainState.create(net, cfg.target_density, cfg.eta, cfg.seed, lam, cutoff, cfg.qe_width)
    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(len(train_y))
    cursor = 0
    weighted = net.weighted_layers
    act_sum = {l.name: 0.0 for l in weighted}
    acc_curve, steps, losses, snaps = [], [], [], []

    def weights_now():
        return {l.name: state.effective_weights(l.name) for l in weighted}

    for it in range(cfg.iterations):
        if cursor + cfg.batch > len(order):
            order = rng.permutation(len(train_y))
            cursor = 0
        pick = order[cursor : cursor + cfg.batch]
        cursor += cfg.batch
        cache = network_grads(net, weights_now(), train_x[pick], train_y[pick])
        if not np.isfinite(cache.loss):
            raise TrainingDiverged(f"loss became {cache.loss} at iteration {it}")
        grads = np.concatenate([cache.dw[l.name].reshape(-1) for l in weighted]).astype(np.float32)
        stats: StepStats = train_step(state, grads, oracle=cfg.oracle, eta=cfg.eta_at(it))
        steps.append(stats)
        losses.append(cache.loss)
        for l in weighted:
            act_sum[l.name] += float(np.count_nonzero(cache.x[l.name])) / cache.x[l.name].size
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            acc_curve.append((done, accuracy(net, weights_now(), val_x, val_y)))
            if progress:
                progress(done, cache.loss, acc_curve[-1][1], state.density)
        if done % cfg.snapshot_every == 0 or done == cfg.iterations:
            snaps.append(_snapshot(net, state, cache))
    act_density = {k: v / max(cfg.iterations, 1) for k, v in act_sum.items()}
    return TrainingResult(cfg, net, state, acc_curve, steps, losses, snaps, act_density)
