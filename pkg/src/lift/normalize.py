"""Per-window instance normalization without affine parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError

EPS = 1e-5


@dataclass(frozen=True)
class NormStats:
    """Channel means and standard deviations of a lookback window.

    Arrays have the window's leading shape with the time axis kept as a
    singleton, so ``(C, 1)`` for a single window and ``(B, C, 1)`` for a batch.
    """

    mean: np.ndarray
    std: np.ndarray


def fit(window, eps: float = EPS) -> NormStats:
    """Population mean and std along the last (time) axis, std floored at ``eps``."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] < 2:
        raise InvalidInputError("normalization needs at least two time steps")
    mean = window.mean(axis=-1, keepdims=True)
    std = np.sqrt(((window - mean) ** 2).mean(axis=-1, keepdims=True))
    return NormStats(mean, np.maximum(std, eps))


def _check(x: np.ndarray, stats: NormStats) -> None:
    if x.shape[:-1] != stats.mean.shape[:-1]:
        raise ShapeError(f"channel layout {x.shape[:-1]} does not match stats {stats.mean.shape[:-1]}")


def apply(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check(x, stats)
    return (x - stats.mean) / stats.std


def invert(x_norm, stats: NormStats):
    # Works on tensors too; the model denormalizes taped outputs with this.
    if isinstance(x_norm, np.ndarray):
        _check(x_norm, stats)
    return x_norm * stats.std + stats.mean
