"""Color statistics transfer between image domains.

LAB images are plain (h, w, 3) float64 arrays: L in [0, 100], a and b
roughly in [-128, 127].  RGB images are (h, w, 3) uint8.  The transfer is
a per-channel affine map in LAB whose target statistics are tracked with
a momentum average, so the style drifts toward the target domain over an
epoch instead of jumping image to image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

# sRGB primaries, D65 white point
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)  # exact inverse of the matrix above
_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


@dataclass(frozen=True)
class ColorStats:
    """Per-channel mean and population standard deviation of a LAB image."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(3))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class ProgressiveState:
    """Momentum-averaged target statistics.

    update_count tracks how many target images have been folded in; zero
    means the state is still at its (all-zero) initialization and must not
    be used for a transfer yet.
    """

    mu_t: np.ndarray
    sigma_t: np.ndarray
    gamma: float
    update_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mu_t", np.asarray(self.mu_t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "sigma_t", np.asarray(self.sigma_t, dtype=np.float64).reshape(3))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")


def initial_state(gamma: float) -> ProgressiveState:
    return ProgressiveState(np.zeros(3), np.zeros(3), gamma, 0)


def _check_hw3(image) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got shape {a.shape}")
    return a


def _srgb_decode(s: np.ndarray) -> np.ndarray:
    return np.where(s > 0.04045, ((s + 0.055) / 1.055) ** 2.4, s / 12.92)


def _srgb_encode(lin: np.ndarray) -> np.ndarray:
    lin = np.maximum(lin, 0.0)
    return np.where(lin > 0.0031308, 1.055 * lin ** (1.0 / 2.4) - 0.055, 12.92 * lin)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(u: np.ndarray) -> np.ndarray:
    return np.where(u > _DELTA, u**3, 3.0 * _DELTA**2 * (u - 4.0 / 29.0))


def rgb_to_lab(image) -> np.ndarray:
    """8-bit RGB (h, w, 3) to CIELAB float64 (h, w, 3), D65 white."""
    rgb = _check_hw3(image).astype(np.float64) / 255.0
    lin = _srgb_decode(rgb)
    xyz = lin @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    """CIELAB (h, w, 3) back to 8-bit RGB; out-of-gamut values clip."""
    lab = _check_hw3(lab).astype(np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    lin = xyz @ _XYZ_TO_RGB.T
    srgb = _srgb_encode(lin) * 255.0
    return np.clip(np.rint(srgb), 0.0, 255.0).astype(np.uint8)


def channel_stats(lab) -> ColorStats:
    """Mean and population std per channel over all pixels."""
    lab = _check_hw3(lab)
    if lab.shape[0] * lab.shape[1] == 0:
        raise ValueError("channel_stats needs at least one pixel")
    flat = lab.reshape(-1, 3).astype(np.float64)
    return ColorStats(flat.mean(axis=0), flat.std(axis=0))


def union_stats(labs: Iterable[np.ndarray]) -> ColorStats:
    """Stats pooled over the pixels of several LAB images."""
    flat = np.concatenate([np.asarray(l).reshape(-1, 3) for l in labs], axis=0)
    return ColorStats(flat.mean(axis=0), flat.std(axis=0))


def progressive_update(state: ProgressiveState, stats_i: ColorStats) -> ProgressiveState:
    g = state.gamma
    return ProgressiveState(
        (1.0 - g) * state.mu_t + g * stats_i.mu,
        (1.0 - g) * state.sigma_t + g * stats_i.sigma,
        g,
        state.update_count + 1,
    )


def transfer(source_lab, source_stats: ColorStats, state: ProgressiveState) -> np.ndarray:
    """Affine re-statistics per channel: out = (in - mu_s) * lam + mu_t.

    lam = sigma_t / sigma_s per channel; a constant source channel
    (sigma_s = 0) keeps lam = 1 so only the mean shifts.
    """
    if state.update_count < 1:
        raise ValueError("transfer requires at least one progressive update")
    lab = _check_hw3(source_lab).astype(np.float64)
    sigma_s = source_stats.sigma
    lam = np.where(sigma_s > 0.0, state.sigma_t / np.where(sigma_s > 0.0, sigma_s, 1.0), 1.0)
    return (lab - source_stats.mu) * lam + state.mu_t


def transfer_pair(
    left, right, state: ProgressiveState, stats_from: str = "union"
) -> tuple[np.ndarray, np.ndarray]:
    """Transfer both images of a stereo pair with one shared affine map.

    stats_from = "union" pools left+right pixels for the source statistics
    (keeps corresponding pixels photometrically consistent); "left" uses
    the left image alone.
    """
    lab_l = rgb_to_lab(left)
    lab_r = rgb_to_lab(right)
    if stats_from == "union":
        stats = union_stats([lab_l, lab_r])
    elif stats_from == "left":
        stats = channel_stats(lab_l)
    else:
        raise ValueError(f"stats_from must be 'union' or 'left', got {stats_from!r}")
    out_l = lab_to_rgb(transfer(lab_l, stats, state))
    out_r = lab_to_rgb(transfer(lab_r, stats, state))
    return out_l, out_r


def warm_start_state(target_rgb, gamma: float) -> ProgressiveState:
    """Seed the momentum state directly from one target image."""
    stats = channel_stats(rgb_to_lab(target_rgb))
    return ProgressiveState(stats.mu.copy(), stats.sigma.copy(), gamma, 1)


def epoch_driver(
    source_dataset: Sequence,
    target_dataset: Sequence,
    state: ProgressiveState,
    seed: int,
) -> Iterator[tuple[np.ndarray, np.ndarray, ProgressiveState]]:
    """One epoch of progressive transfer.

    source_dataset holds (left, right) RGB pairs, target_dataset RGB
    images (a tuple entry contributes its first image).  Both are
    shuffled with the seed; each iteration folds one target image into
    the state, transfers one source pair, and yields
    (left, right, state_after_update).  Runs len(source_dataset)
    iterations, wrapping target indices.
    """
    if len(source_dataset) == 0 or len(target_dataset) == 0:
        raise ValueError("epoch_driver requires non-empty datasets")
    rng = np.random.default_rng(seed)
    src_order = rng.permutation(len(source_dataset))
    tgt_order = rng.permutation(len(target_dataset))
    for i, si in enumerate(src_order):
        entry = target_dataset[tgt_order[i % len(tgt_order)]]
        tgt = entry[0] if isinstance(entry, tuple) else entry
        state = progressive_update(state, channel_stats(rgb_to_lab(tgt)))
        left, right = source_dataset[si]
        out_l, out_r = transfer_pair(left, right, state)
        yield out_l, out_r, state
