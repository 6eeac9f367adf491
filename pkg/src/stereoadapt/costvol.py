"""Feature normalization and cost-volume construction.

Two parameter-free normalizations run back to back right before the
volume is built: channel normalization rescales every (sample, channel)
plane by its spatial L2 norm, then pixel normalization rescales every
per-pixel channel vector to unit length.  Matching costs computed from
features treated this way live on a fixed scale regardless of the input
domain, which is the whole point.

Volumes come in two layouts.  Correlation volumes are (n, D, h, w)
tensors, one matching score per disparity.  Concatenation volumes are
logically (n, 2c, D, h, w); the tensor engine is rank-4, so they are
stored as (n, 2c*D, h, w) with disparity-major channel blocks, block d
holding [left features | right features shifted by d].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class CostVolume:
    kind: str  # "correlation" or "concatenation"
    data: ad.Tensor
    max_disparity: int
    feature_channels: int
    valid: np.ndarray  # (n, D, h, w); 1 where x - d >= 0

    @property
    def shape5(self) -> tuple:
        """Logical (n, 2c, D, h, w) shape of a concatenation volume."""
        if self.kind != "concatenation":
            raise ValueError("shape5 applies to concatenation volumes")
        n, _, h, w = self.data.shape
        return (n, 2 * self.feature_channels, self.max_disparity, h, w)

    def slice_at(self, d: int) -> ad.Tensor:
        """Concatenation block at disparity d: (n, 2c, h, w)."""
        if self.kind != "concatenation":
            raise ValueError("slice_at applies to concatenation volumes")
        if not 0 <= d < self.max_disparity:
            raise ValueError(f"disparity {d} outside [0, {self.max_disparity})")
        c2 = 2 * self.feature_channels
        return ad.slice_channels(self.data, d * c2, (d + 1) * c2)


@dataclass
class CostHistogram:
    edges: np.ndarray  # (k+1,) monotone
    proportions: np.ndarray  # (k,) summing to 1


def channel_normalize(f: ad.Tensor, eps: float = 1e-12) -> ad.Tensor:
    """Divide each (n, c) plane by sqrt(spatial sum of squares + eps)."""
    sq = ad.reduce_sum(f * f, (2, 3))
    denom = ad.sqrt(sq + eps)
    return f / ad.expand(denom, f.shape)


def pixel_normalize(f: ad.Tensor, eps: float = 1e-12) -> ad.Tensor:
    """Divide each per-pixel channel vector by sqrt(sum of squares + eps)."""
    sq = ad.reduce_sum(f * f, (1,))
    denom = ad.sqrt(sq + eps)
    return f / ad.expand(denom, f.shape)


def cost_norm(f: ad.Tensor, eps: float = 1e-12) -> ad.Tensor:
    """Channel normalization then pixel normalization, in that order."""
    return pixel_normalize(channel_normalize(f, eps), eps)


def _check_volume_inputs(fl: ad.Tensor, fr: ad.Tensor, max_disparity: int):
    if fl.shape != fr.shape:
        raise ValueError(f"feature shape mismatch: {fl.shape} vs {fr.shape}")
    w = fl.shape[3]
    if not 1 <= max_disparity <= w:
        raise ValueError(f"max_disparity {max_disparity} outside [1, width={w}]")


def _validity_mask(n: int, max_disparity: int, h: int, w: int) -> np.ndarray:
    valid = np.zeros((n, max_disparity, h, w))
    for d in range(max_disparity):
        valid[:, d, :, d:] = 1.0
    return valid


def correlation_volume(fl: ad.Tensor, fr: ad.Tensor, max_disparity: int) -> CostVolume:
    """cost(n, d, y, x) = mean over channels of Fl(x) * Fr(x - d).

    Positions with x - d < 0 read zeros from the shift, so their cost is
    0; the validity mask records them for downstream masking.
    """
    _check_volume_inputs(fl, fr, max_disparity)
    n, c, h, w = fl.shape
    slices = []
    for d in range(max_disparity):
        prod = fl * ad.hshift(fr, d)
        slices.append(ad.reduce_sum(prod, (1,)) * (1.0 / c))
    data = ad.concat_channels(slices)
    return CostVolume("correlation", data, max_disparity, c, _validity_mask(n, max_disparity, h, w))


def concat_volume(fl: ad.Tensor, fr: ad.Tensor, max_disparity: int) -> CostVolume:
    """Stack [Fl, shifted Fr] per disparity; see module docstring for layout."""
    _check_volume_inputs(fl, fr, max_disparity)
    n, c, h, w = fl.shape
    blocks = []
    for d in range(max_disparity):
        blocks.append(fl)
        blocks.append(ad.hshift(fr, d))
    data = ad.concat_channels(blocks)
    return CostVolume("concatenation", data, max_disparity, c, _validity_mask(n, max_disparity, h, w))


def cost_histogram(volume: CostVolume, bins) -> CostHistogram:
    """Distribution of matching costs over valid positions only."""
    if volume.kind != "correlation":
        raise ValueError("cost_histogram expects a correlation volume")
    costs = volume.data.data[volume.valid > 0.5]
    if costs.size == 0:
        raise ValueError("no valid positions to histogram")
    counts, edges = np.histogram(costs, bins=bins)
    return CostHistogram(edges, counts / costs.size)
