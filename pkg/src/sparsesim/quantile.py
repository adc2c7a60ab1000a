"""Multiplicative streaming quantile estimation.

The estimate moves up by a factor ``1 + rho*q`` whenever a sample exceeds
it and down by ``1 - rho*(1 - q)`` otherwise, so it stays positive and
settles where a fraction ``q`` of the stream lies below it.  The current
estimate is the keep/discard threshold for accumulated gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

INITIAL_ESTIMATE = 1e-6
ADJUSTMENT_RATE = 1e-3


@njit(cache=True)
def _step(q_hat, delta, up, down):
    if q_hat < delta:
        return q_hat * up
    return q_hat * down


@njit(cache=True)
def _run(q_hat, deltas, up, down, width):
    """Feed ``deltas`` through the estimator, ``width`` samples per update.

    Returns the final estimate and how many samples arrived at or below the
    estimate in force when they arrived.
    """
    below = 0
    n = deltas.shape[0]
    i = 0
    while i < n:
        if width == 1:
            d = deltas[i]
            if d <= q_hat:
                below += 1
            q_hat = _step(q_hat, d, up, down)
            i += 1
        else:
            d = (deltas[i] + deltas[i + 1] + deltas[i + 2] + deltas[i + 3]) / 4.0
            for j in range(4):
                if deltas[i + j] <= q_hat:
                    below += 1
            q_hat = _step(q_hat, d, up, down)
            i += 4
    return q_hat, below


@dataclass
class QuantileEstimator:
    q: float
    rho: float = ADJUSTMENT_RATE
    q_hat: float = INITIAL_ESTIMATE
    n: int = 0

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"quantile must lie in (0, 1), got {self.q}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"adjustment rate must lie in (0, 1), got {self.rho}")
        if not self.q_hat > 0.0:
            raise ValueError("estimate must be positive")

    @classmethod
    def for_density(cls, target_density: float, **kw) -> "QuantileEstimator":
        """Estimator whose threshold keeps ``target_density`` of the stream."""
        return cls(q=1.0 - target_density, **kw)

    @property
    def up(self) -> float:
        return 1.0 + self.rho * self.q

    @property
    def down(self) -> float:
        return 1.0 - self.rho * (1.0 - self.q)

    @property
    def threshold(self) -> float:
        return self.q_hat

    def update(self, delta: float) -> "QuantileEstimator":
        delta = float(delta)
        if not delta >= 0.0:
            raise ValueError(f"magnitudes fed to the estimator must be >= 0, got {delta}")
        self.q_hat = _step.py_func(self.q_hat, delta, self.up, self.down)
        self.n += 1
        return self

    def update4(self, deltas) -> "QuantileEstimator":
        """Treat the mean of four magnitudes as a single sample."""
        a, b, c, d = (float(x) for x in deltas)
        if min(a, b, c, d) < 0.0 or any(x != x for x in (a, b, c, d)):
            raise ValueError("magnitudes fed to the estimator must be >= 0")
        return self.update((a + b + c + d) / 4.0)

    def feed(self, deltas, width: int = 1) -> int:
        """Stream a whole array through the estimator.

        ``width=4`` averages consecutive groups of four.  Returns how many
        samples arrived at or below the estimate in force at their arrival.
        """
        deltas = np.ascontiguousarray(deltas, dtype=np.float64)
        if width not in (1, 4):
            raise ValueError("width must be 1 or 4")
        if width == 4 and deltas.size % 4:
            raise ValueError("width-4 feeding needs a multiple of four samples")
        if deltas.size and not deltas.min() >= 0.0:
            raise ValueError("magnitudes fed to the estimator must be >= 0")
        self.q_hat, below = _run(self.q_hat, deltas, self.up, self.down, width)
        self.n += deltas.size // width
        return int(below)

    def state(self) -> tuple[float, float, float, int]:
        return (self.q, self.rho, self.q_hat, self.n)
