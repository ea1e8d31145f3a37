"""Magnitude pruning.

The mask is a flat uint8 array over the layer's weights: 1 keeps a weight,
0 zeroes it. Exactly floor(target * count) weights are pruned, the smallest
magnitudes first; equal magnitudes are pruned lower flat index first, which
makes masks nested as the target sparsity grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PruneMask:
    mask: np.ndarray  # flat uint8, 1 = keep

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8).ravel()
        if self.mask.size == 0:
            raise ValueError("empty mask")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def sparsity(self) -> float:
        """Fraction of pruned (zeroed) positions."""
        return float(np.count_nonzero(self.mask == 0)) / self.mask.size

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.mask))


def prune_by_magnitude(weights: np.ndarray, target_sparsity: float) -> PruneMask:
    """Mask the floor(target * count) smallest-magnitude weights.

    Ties are broken toward the lower flat index, so increasing the target
    never unmasks a weight that a smaller target pruned.
    """
    flat = np.asarray(weights, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("cannot prune an empty weight tensor")
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target sparsity {target_sparsity} outside [0, 1)")
    n_prune = int(np.floor(target_sparsity * flat.size))
    order = np.argsort(np.abs(flat), kind="stable")
    mask = np.ones(flat.size, dtype=np.uint8)
    mask[order[:n_prune]] = 0
    return PruneMask(mask)


def apply_mask(weights: np.ndarray, mask: PruneMask) -> np.ndarray:
    """Zero the masked weights; output shape and dtype match the input."""
    arr = np.asarray(weights)
    if mask.mask.size != arr.size:
        raise ValueError(f"mask length {mask.mask.size} != weight count {arr.size}")
    out = arr.ravel() * mask.mask.astype(arr.dtype)
    return out.reshape(arr.shape)
