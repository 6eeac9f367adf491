"""Layered fronto-parallel stereo scene generator with two color domains.

Scenes are a zero-disparity background plus rectangular layers at distinct
integer disparities. The right view is forward-composited per row with the
nearest (largest-disparity) writer winning a cell, which makes the stored
occlusion mask and the photometric relation I_l(x) = I_r(x - d) exact at
visible pixels. Hole cells nothing writes to keep the background texture;
no visible left pixel ever samples them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import color, fileio
from .losses import gt_occlusion_from_disparity

TEXTURE_KINDS = ("random-dot", "smoothed-noise")


@dataclass(frozen=True)
class SyntheticSpec:
    width: int = 160
    height: int = 96
    max_disparity: int = 12
    texture: str = "random-dot"
    num_layers: int = 3
    lab_mean: tuple = (45.0, 4.0, 10.0)
    lab_sigma: tuple = (10.0, 6.0, 6.0)
    brightness_offset: float = 0.0

    def __post_init__(self):
        if self.width < 8 or self.height < 4:
            raise ValueError(f"scene too small: {self.width}x{self.height}")
        if self.max_disparity < 0 or self.max_disparity * 4 >= self.width:
            raise ValueError(
                f"max_disparity {self.max_disparity} must satisfy 0 <= d < width/4"
            )
        if self.texture not in TEXTURE_KINDS:
            raise ValueError(f"texture must be one of {TEXTURE_KINDS}, got {self.texture!r}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.num_layers > 0 and self.max_disparity < self.num_layers:
            raise ValueError("need at least one distinct disparity per layer")
        l_target = self.lab_mean[0] + self.brightness_offset
        if not (10.0 <= l_target <= 90.0):
            raise ValueError(f"styled L mean {l_target} is out of gamut")
        if abs(self.lab_mean[1]) > 40.0 or abs(self.lab_mean[2]) > 40.0:
            raise ValueError("a/b mean targets beyond +-40 leave the sRGB gamut")
        if min(self.lab_sigma) <= 0.0:
            raise ValueError("lab_sigma entries must be positive")


@dataclass
class StereoSample:
    left: np.ndarray  # (h, w, 3) uint8
    right: np.ndarray  # (h, w, 3) uint8
    disparity: np.ndarray  # (h, w) float64, left-view
    valid: np.ndarray  # (h, w) float64 in {0, 1}
    occlusion: np.ndarray = field(default=None)  # (h, w) float64 in {0, 1}


def domain_spec(domain: str, **overrides) -> SyntheticSpec:
    """Preset A/B domains: differing texture statistics and LAB style.

    The L targets sit 18 units apart with B's spread 1.5x wider, so the
    two domains disagree in both luminance and contrast.
    """
    domain = domain.lower()
    if domain == "a":
        base = dict(
            texture="random-dot",
            lab_mean=(42.0, 6.0, 12.0),
            lab_sigma=(10.0, 6.0, 6.0),
            brightness_offset=0.0,
        )
    elif domain == "b":
        base = dict(
            texture="smoothed-noise",
            lab_mean=(60.0, -4.0, -8.0),
            lab_sigma=(15.0, 9.0, 9.0),
            brightness_offset=3.0,
        )
    else:
        raise ValueError(f"domain must be 'a' or 'b', got {domain!r}")
    base.update(overrides)
    return SyntheticSpec(**base)


def _texture(rng: np.random.Generator, h: int, w: int, kind: str) -> np.ndarray:
    """(h, w, 3) float64 in [0, 1]."""
    noise = rng.random((h, w, 3))
    if kind == "random-dot":
        return np.where(noise < 0.5, 0.2, 0.85)
    # sigma below 1 keeps enough high-frequency detail for matching
    smooth = np.stack([gaussian_filter(noise[:, :, c], 0.9) for c in range(3)], axis=2)
    lo, hi = smooth.min(), smooth.max()
    span = hi - lo if hi > lo else 1.0
    return (smooth - lo) / span * 0.7 + 0.15


def gen_synthetic_pair(spec: SyntheticSpec, seed: int) -> StereoSample:
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width

    disp = np.zeros((h, w))
    layer_id = np.zeros((h, w), dtype=np.int64)
    textures = [_texture(rng, h, w, spec.texture)]

    if spec.num_layers > 0:
        values = rng.choice(
            np.arange(1, spec.max_disparity + 1), size=spec.num_layers, replace=False
        )
        values = np.sort(values)
        values[-1] = spec.max_disparity  # the field names the scene maximum
        for i, dv in enumerate(values, start=1):
            rw = int(rng.integers(w // 5, w // 2 + 1))
            rh = int(rng.integers(h // 4, 3 * h // 4 + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            disp[y0 : y0 + rh, x0 : x0 + rw] = float(dv)
            layer_id[y0 : y0 + rh, x0 : x0 + rw] = i
            textures.append(_texture(rng, h, w, spec.texture))

    stack = np.stack(textures)  # (k+1, h, w, 3)
    ys, xs = np.mgrid[0:h, 0:w]
    left = stack[layer_id, ys, xs]

    right = textures[0].copy()
    for dv in np.unique(disp):
        yy, xx = np.nonzero(disp == dv)
        rr = xx - int(dv)
        keep = rr >= 0
        right[yy[keep], rr[keep]] = left[yy[keep], xx[keep]]

    left8 = np.clip(np.rint(left * 255.0), 0, 255).astype(np.uint8)
    right8 = np.clip(np.rint(right * 255.0), 0, 255).astype(np.uint8)

    style = color.ProgressiveState(
        mu_t=np.array(
            [
                spec.lab_mean[0] + spec.brightness_offset,
                spec.lab_mean[1],
                spec.lab_mean[2],
            ]
        ),
        sigma_t=np.array(spec.lab_sigma, dtype=np.float64),
        gamma=0.0,
        update_count=1,
    )
    left8, right8 = color.transfer_pair(left8, right8, style, stats_from="union")

    occ = gt_occlusion_from_disparity(disp[None, None])[0, 0]
    return StereoSample(
        left=left8,
        right=right8,
        disparity=disp,
        valid=np.ones((h, w)),
        occlusion=occ,
    )


def generate_dataset(spec: SyntheticSpec, n: int, seed: int) -> list:
    return [gen_synthetic_pair(spec, seed + i) for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk layout shared by the CLI and the training loop


def sample_stem(index: int) -> str:
    return f"{index:04d}"


def save_sample(out_dir, stem: str, sample: StereoSample) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_png8(out / f"{stem}_left.png", sample.left)
    fileio.write_png8(out / f"{stem}_right.png", sample.right)
    fileio.write_pfm(out / f"{stem}_disp.pfm", sample.disparity)
    occ8 = (sample.occlusion * 255).astype(np.uint8)
    fileio.write_png8(out / f"{stem}_occ.png", np.repeat(occ8[:, :, None], 3, axis=2))


def load_sample(data_dir, stem: str, with_gt: bool = True) -> StereoSample:
    d = Path(data_dir)
    left = fileio.read_png8(d / f"{stem}_left.png")
    right = fileio.read_png8(d / f"{stem}_right.png")
    if not with_gt:
        h, w = left.shape[:2]
        return StereoSample(left, right, np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w)))
    disp = fileio.read_pfm(d / f"{stem}_disp.pfm").astype(np.float64)
    occ_path = d / f"{stem}_occ.png"
    if occ_path.exists():
        occ = (fileio.read_png8(occ_path)[:, :, 0] > 127).astype(np.float64)
    else:
        occ = gt_occlusion_from_disparity(disp[None, None])[0, 0]
    return StereoSample(left, right, disp, np.ones_like(disp), occ)


def list_stems(data_dir) -> list:
    stems = sorted(p.name[: -len("_left.png")] for p in Path(data_dir).glob("*_left.png"))
    if not stems:
        raise ValueError(f"no samples found in {data_dir}")
    return stems
