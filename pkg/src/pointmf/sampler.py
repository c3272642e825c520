"""Samplers: the one-step mean-flow jump and multi-step references.

All samplers take any callable ``model(x_t, r, t, cond) -> u`` with batched
``r``/``t`` of shape (B,), so analytic oracle fields plug in directly.
"""

from __future__ import annotations

import numpy as np


def noise(seed: int, shape) -> np.ndarray:
    """Standard normal noise from a counter-based (Philox) stream."""
    return np.random.Generator(np.random.Philox(key=int(seed))).standard_normal(shape)


class NFECounter:
    """Wraps a model and counts its evaluations."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, x_t, r, t, cond):
        self.calls += 1
        return self.model(x_t, r, t, cond)


def _batch(cond) -> int:
    return len(cond)


def _times(value, batch):
    return np.full(batch, float(value))


def sample_one_step(model, cond, seed: int, n_points: int) -> np.ndarray:
    """x = eps - u(eps, 0, 1 | c): one network evaluation."""
    B = _batch(cond)
    eps = noise(seed, (B, n_points, 3))
    return eps - np.asarray(model(eps, _times(0.0, B), _times(1.0, B), cond))


def sample_k_step(model, cond, steps: int, seed: int, n_points: int) -> np.ndarray:
    """Mean-flow jumps across a uniform grid 1 = t_k > ... > t_0 = 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    B = _batch(cond)
    x = noise(seed, (B, n_points, 3))
    grid = np.arange(steps + 1) / steps
    for i in range(steps, 0, -1):
        t, r = grid[i], grid[i - 1]
        x = x - (t - r) * np.asarray(model(x, _times(r, B), _times(t, B), cond))
    return x


def sample_fm_euler(model, cond, steps: int, seed: int, n_points: int) -> np.ndarray:
    """Euler integration of the instantaneous field u(x, t, t) from t=1 to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    B = _batch(cond)
    x = noise(seed, (B, n_points, 3))
    grid = np.arange(steps + 1) / steps
    for i in range(steps, 0, -1):
        t, r = grid[i], grid[i - 1]
        x = x - (t - r) * np.asarray(model(x, _times(t, B), _times(t, B), cond))
    return x
