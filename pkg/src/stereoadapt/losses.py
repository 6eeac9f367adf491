"""Warping, SSIM, occlusion handling, and the five training losses.

The self-supervised target-domain signal comes from reconstructing the
left image out of the right image and a predicted disparity map, scoring
the reconstruction with SSIM + L1 outside occluded regions, regularizing
the occlusion mask toward empty, and keeping disparity gradients small
except across image edges.  Source-domain supervision stays classic:
smooth-L1 on disparity and binary cross entropy on occlusion.

Images here are (n, c, h, w) tensors scaled to [0, 1]; disparity and
occlusion maps are (n, 1, h, w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accum

_SSIM_C1 = 1e-4  # (0.01)^2 on [0,1] images
_SSIM_C2 = 9e-4  # (0.03)^2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85
    lambda_s_occ: float = 0.2
    lambda_t_ar: float = 1.0
    lambda_t_occ: float = 0.2
    lambda_t_sm: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("lambda_s_occ", "lambda_t_ar", "lambda_t_occ", "lambda_t_sm"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    l_s_main: float
    l_s_occ: float
    l_t_ar: float
    l_t_occ: float
    l_t_sm: float
    total: float


def warp_right_to_left(i_r: Tensor, d: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample the right image at x - d(x) per row, linearly interpolated.

    Returns the warped image and a (n, 1, h, w) validity mask; sample
    coordinates outside [0, w-1] give warped = 0 and valid = 0.
    Differentiable in both the image (interpolation weights) and the
    disparity (image difference at the sample point).
    """
    n, c, h, w = i_r.shape
    if d.shape != (n, 1, h, w):
        raise ValueError(f"disparity shape {d.shape} does not match image {i_r.shape}")
    xs = np.arange(w, dtype=np.float64)
    s = xs - d.data[:, 0]  # (n, h, w)
    inb = (s >= 0.0) & (s <= w - 1.0)
    sc = np.clip(s, 0.0, w - 1.0)
    x0 = np.floor(sc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    f = sc - x0
    mask = inb[:, None, :, :].astype(np.float64)

    idx0 = np.broadcast_to(x0[:, None, :, :], (n, c, h, w))
    idx1 = np.broadcast_to(x1[:, None, :, :], (n, c, h, w))
    g0 = np.take_along_axis(i_r.data, idx0, axis=3)
    g1 = np.take_along_axis(i_r.data, idx1, axis=3)
    fb = f[:, None, :, :]
    out_data = ((1.0 - fb) * g0 + fb * g1) * mask

    out = Tensor(out_data, (i_r, d), "warp")

    def bw():
        g = out.grad * mask
        gi = np.zeros_like(i_r.data)
        ni = np.arange(n).reshape(n, 1, 1, 1)
        ci = np.arange(c).reshape(1, c, 1, 1)
        yi = np.arange(h).reshape(1, 1, h, 1)
        np.add.at(gi, (ni, ci, yi, idx0), g * (1.0 - fb))
        np.add.at(gi, (ni, ci, yi, idx1), g * fb)
        _accum(i_r, gi)
        # d moves the sample point left: d(warped)/dd = -(g1 - g0)
        gd = (g * (g0 - g1)).sum(axis=1, keepdims=True)
        _accum(d, gd)

    out._backward = bw
    return out, mask


def error_map(i_l: Tensor, warped: Tensor) -> Tensor:
    """Channel-mean absolute difference, (n, 1, h, w)."""
    return ad.reduce_mean(ad.absolute(i_l - warped), (1,))


def _box3(t: Tensor) -> Tensor:
    """3x3 uniform box filter with replicate borders, channelwise."""
    n, c, h, w = t.shape
    flat = ad.reshape4(t, (n * c, 1, h, w))
    kernel = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    smoothed = ad.conv2d(ad.replicate_pad1(flat), kernel)
    return ad.reshape4(smoothed, (n, c, h, w))


def ssim3x3(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel single-scale SSIM with a 3x3 box window, clamped to [-1, 1]."""
    mu_a = _box3(a)
    mu_b = _box3(b)
    var_a = _box3(a * a) - mu_a * mu_a
    var_b = _box3(b * b) - mu_b * mu_b
    cov = _box3(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + _SSIM_C1) * (cov * 2.0 + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return ad.clamp(num / den, -1.0, 1.0)


def gt_occlusion_from_disparity(d_hat: np.ndarray) -> np.ndarray:
    """Binary occlusion mask from a (n, 1, h, w) disparity array.

    Per row, pixel x lands on right-image cell rint(x - d); within a
    cell the largest disparity stays visible and strictly smaller ones
    are occluded (ties all visible).  Out-of-image landings are occluded.
    """
    d = np.asarray(d_hat, dtype=np.float64)
    if d.ndim != 4 or d.shape[1] != 1:
        raise ValueError(f"expected (n, 1, h, w) disparity, got {d.shape}")
    n, _, h, w = d.shape
    xs = np.arange(w, dtype=np.float64)
    rf = np.rint(xs - d)
    rf = np.where(np.isfinite(rf), rf, -1.0)  # NaN/inf disparities land out of image
    r = rf.astype(np.intp)
    inb = (r >= 0) & (r < w)
    rc = np.where(inb, r, 0)
    ni = np.arange(n).reshape(n, 1, 1, 1)
    yi = np.arange(h).reshape(1, 1, h, 1)
    cellmax = np.full((n, 1, h, w), -np.inf)
    np.maximum.at(cellmax, (ni, 0, yi, rc), np.where(inb, d, -np.inf))
    occ = ~inb | (d < cellmax[ni, 0, yi, rc])
    return occ.astype(np.float64)


def _masked_mean(t: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of t over positions where the (n, 1, h, w) mask is 1."""
    count = float(mask.sum()) * t.shape[1]
    if count == 0:
        raise ValueError("no valid pixels to average over")
    weights = Tensor(np.broadcast_to(mask, t.shape).copy())
    return ad.reduce_sum_all(t * weights) * (1.0 / count)


def loss_recon(i_l: Tensor, warped: Tensor, o: Tensor, valid: np.ndarray, alpha: float) -> Tensor:
    """Occlusion-aware appearance reconstruction, SSIM and L1 mixed by alpha.

    Both images are gated by (1 - O) first, so fully occluded pixels
    contribute nothing; means run over warp-valid pixels only.
    """
    keep = ad.expand(1.0 - o, i_l.shape) if o.shape != i_l.shape else 1.0 - o
    a = i_l * keep
    b = warped * keep
    dssim = (1.0 - ssim3x3(a, b)) * 0.5
    l1 = ad.absolute(a - b)
    return _masked_mean(dssim, valid) * alpha + _masked_mean(l1, valid) * (1.0 - alpha)


def loss_smooth(d: Tensor, i_l: Tensor) -> Tensor:
    """Edge-aware disparity smoothness with forward differences."""

    def dx(t):
        return ad.crop2d(t, left=1) - ad.crop2d(t, right=1)

    def dy(t):
        return ad.crop2d(t, top=1) - ad.crop2d(t, bottom=1)

    gx = ad.reduce_mean(ad.absolute(dx(i_l)), (1,))
    gy = ad.reduce_mean(ad.absolute(dy(i_l)), (1,))
    term_x = ad.reduce_mean_all(ad.absolute(dx(d)) * ad.exp(-gx))
    term_y = ad.reduce_mean_all(ad.absolute(dy(d)) * ad.exp(-gy))
    return term_x + term_y


def loss_occ_reg(o: Tensor) -> Tensor:
    """Mean occlusion probability; pulls the mask toward empty."""
    return ad.reduce_mean_all(o)


def loss_bce(o: Tensor, o_hat: Tensor) -> Tensor:
    """Binary cross entropy of predicted probabilities against a binary mask."""
    oc = ad.clamp(o, 1e-7, 1.0 - 1e-7)
    ll = o_hat * ad.log(oc) + (1.0 - o_hat) * ad.log(1.0 - oc)
    return ad.reduce_mean_all(-ll)


def loss_smooth_l1(d: Tensor, d_hat: Tensor, valid_gt: np.ndarray) -> Tensor:
    """Huber penalty on disparity error over pixels with ground truth."""
    x = d - d_hat
    quad = x * x * 0.5
    lin = ad.absolute(x) - 0.5
    near = Tensor((np.abs(x.data) < 1.0).astype(np.float64))
    per_pixel = quad * near + lin * (1.0 - near)
    return _masked_mean(per_pixel, valid_gt)


def total_loss(
    l_s_main: Tensor,
    l_s_occ: Tensor,
    l_t_ar: Tensor,
    l_t_occ: Tensor,
    l_t_sm: Tensor,
    weights: LossWeights,
) -> tuple[LossBreakdown, Tensor]:
    """Weighted sum of the five terms, summed left to right.

    The breakdown stores unweighted components; recomputing
    main + w1*occ + w2*ar + w3*occ_t + w4*sm from them in this order
    reproduces total bit for bit.
    """
    total = l_s_main + l_s_occ * weights.lambda_s_occ
    total = total + l_t_ar * weights.lambda_t_ar
    total = total + l_t_occ * weights.lambda_t_occ
    total = total + l_t_sm * weights.lambda_t_sm
    bd = LossBreakdown(
        l_s_main.item(), l_s_occ.item(), l_t_ar.item(), l_t_occ.item(), l_t_sm.item(), total.item()
    )
    return bd, total
