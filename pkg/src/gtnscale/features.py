"""Quantum feature maps, binarization and center cropping.

A feature ``x`` in [0, 1] maps to the qubit vector
``(cos(theta*pi*x/2), sin(theta*pi*x/2))``. The multi-spin map repeats each
feature's vector on ``H`` consecutive sites.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .mps import ProductState

D_PHYS = 2


@dataclass(frozen=True)
class QfmConfig:
    theta: float = 1.0
    H: int = 1

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ParameterError(f"theta must lie in (0, 1], got {self.theta}")
        if int(self.H) != self.H or self.H < 1:
            raise ParameterError(f"H must be a positive integer, got {self.H}")


def _check_unit_interval(x: np.ndarray) -> None:
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1):
        bad = np.argwhere(~((x >= 0) & (x <= 1)))[0]
        raise ParameterError(f"feature value {x[tuple(bad)]!r} at {tuple(bad)} is outside [0, 1]")


def site_vectors(x: np.ndarray, theta: float) -> np.ndarray:
    """Map an array of features to qubit vectors; output has a trailing axis of size 2.

    ``theta * x == 1`` maps to exactly ``(0, 1)`` so binary data at
    ``theta = 1`` gives exactly orthogonal states.
    """
    t = theta * np.asarray(x, dtype=np.float64)
    half = 0.5 * np.pi * t
    out = np.stack([np.cos(half), np.sin(half)], axis=-1)
    out[t == 1.0] = (0.0, 1.0)
    return out


def qfm_encode_batch(x: np.ndarray, cfg: QfmConfig) -> np.ndarray:
    """Encode ``(N, M)`` features to stacked product states of shape ``(N, M*H, 2)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] == 0:
        raise ParameterError(f"features must be (N, M>0), got {x.shape}")
    _check_unit_interval(x)
    v = site_vectors(x, cfg.theta)
    if cfg.H > 1:
        v = np.repeat(v, cfg.H, axis=1)
    return v


def qfm_encode(x, cfg: QfmConfig) -> ProductState:
    """Encode one feature vector as a product state with ``M*H`` sites."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError(f"a feature vector is one-dimensional, got shape {x.shape}")
    return ProductState(qfm_encode_batch(x, cfg)[0])


def site_gram(cfg: QfmConfig, grid_levels: int) -> np.ndarray:
    """``sum_j phi(j/(D-1)) phi(j/(D-1))^T`` over a D-level grid on [0, 1].

    Only defined for ``H = 1``: with repeated spins the per-feature Gram
    matrix lives on ``2**H`` levels and no longer factorizes per site.
    """
    if cfg.H != 1:
        raise ParameterError("site_gram is defined for H = 1 only")
    if grid_levels < 2:
        raise ParameterError(f"grid_levels must be >= 2, got {grid_levels}")
    phi = site_vectors(np.linspace(0.0, 1.0, grid_levels), cfg.theta)
    return phi.T @ phi


def binarize(x, threshold: float = 0.5) -> np.ndarray:
    """0 below ``threshold``, 1 at or above it."""
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(x, dtype=np.float64) >= threshold).astype(np.float64)


def crop_center(image, side: int) -> np.ndarray:
    """Central ``side x side`` block, flattened row-major.

    When the margin is odd the block sits one pixel closer to the top-left.
    Works on a single ``(H, W)`` image or a stack ``(N, H, W)``.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ParameterError(f"expected (H, W) or (N, H, W), got {img.shape}")
    h, w = img.shape[-2:]
    if side < 1 or side > min(h, w):
        raise ParameterError(f"side {side} does not fit a {h}x{w} image")
    top, left = (h - side) // 2, (w - side) // 2
    block = img[..., top : top + side, left : left + side]
    return block.reshape(*img.shape[:-2], side * side)
