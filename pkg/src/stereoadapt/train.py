"""Joint source-supervised / target-self-supervised training loop.

Every iteration draws source indices, target indices, and crop offsets in a
fixed order regardless of which module switches are on, so ablation runs
consume identical random streams and stay comparable seed for seed. The
progressive color state advances once per target sample and the paired
source crop is transferred with the state as of that update.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import color, fileio, losses, metrics, model, synth
from .autodiff import Tensor

__all__ = [
    "TrainConfig",
    "TrainResult",
    "parse_config_file",
    "config_from_sources",
    "train_adapt",
]

METRIC_COLUMNS = ("iter", "l_s_main", "l_s_occ", "l_t_ar", "l_t_occ", "l_t_sm", "total", "target_d1")


@dataclass(frozen=True)
class TrainConfig:
    source_dir: str = ""
    target_dir: str = ""
    out_dir: str = "run"
    iterations: int = 1000
    batch_size: int = 2
    crop_width: int = 128
    crop_height: int = 64
    lr: float = 0.001
    seed: int = 0
    gamma: float = 0.95
    color_transfer: bool = True
    cost_norm: bool = True
    recon: bool = True
    warm_start: bool = False
    eval_interval: int = 100
    lambda_s_occ: float = 0.2
    lambda_t_ar: float = 1.0
    lambda_t_occ: float = 0.2
    lambda_t_sm: float = 0.1
    alpha: float = 0.85
    feature_channels: int = 16
    feature_layers: int = 3
    max_disparity: int = 16
    reg_layers: int = 2

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be positive")
        if self.crop_width < self.max_disparity:
            raise ValueError(
                f"crop_width {self.crop_width} below disparity range {self.max_disparity}"
            )


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    rows: list
    final_target_d1: float


# ---------------------------------------------------------------------------
# configuration plumbing


def parse_config_file(path) -> dict:
    """`key = value` lines; # starts a comment; blank lines ignored."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        raw[key] = value
    return raw


_BOOL_WORDS = {"on": True, "true": True, "1": True, "yes": True,
               "off": False, "false": False, "0": False, "no": False}


def _coerce(name: str, value, target_type):
    if isinstance(value, target_type) and not isinstance(value, str):
        return value
    text = str(value).strip()
    if target_type is bool:
        if text.lower() not in _BOOL_WORDS:
            raise ValueError(f"{name}: expected on/off, got {value!r}")
        return _BOOL_WORDS[text.lower()]
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def config_from_sources(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then config-file values, then explicit overrides."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    types = {
        name: (bool if "bool" in str(t) else int if "int" in str(t) else float if "float" in str(t) else str)
        for name, t in fields.items()
    }
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, types[key])
    return TrainConfig(**merged)


# ---------------------------------------------------------------------------
# training


def _crop(arr: np.ndarray, y0: int, x0: int, ch: int, cw: int) -> np.ndarray:
    return arr[y0 : y0 + ch, x0 : x0 + cw]


def _stack_images(images8) -> Tensor:
    return Tensor(np.concatenate([fileio.image_to_tensor(im).data for im in images8], axis=0))


def _zero_scalar() -> Tensor:
    return Tensor(np.zeros((1, 1, 1, 1)))


def _eval_target_d1(params, stereo_cfg, target_samples) -> float:
    reports = []
    for sample in target_samples:
        pred = metrics.predict_disparity(params, stereo_cfg, sample)
        reports.append(metrics.d1_error(pred, sample.disparity, sample.valid))
    return metrics.aggregate_reports(reports).d1_percent


def train_adapt(config: TrainConfig, log_fn=None) -> TrainResult:
    source = [synth.load_sample(config.source_dir, s) for s in synth.list_stems(config.source_dir)]
    target = [synth.load_sample(config.target_dir, s) for s in synth.list_stems(config.target_dir)]
    ch, cw = config.crop_height, config.crop_width
    for name, dataset in (("source", source), ("target", target)):
        for i, s in enumerate(dataset):
            if s.left.shape[0] < ch or s.left.shape[1] < cw:
                raise ValueError(
                    f"{name} sample {i} is {s.left.shape[1]}x{s.left.shape[0]}, "
                    f"smaller than the {cw}x{ch} crop"
                )

    stereo_cfg = model.StereoNetConfig(
        feature_channels=config.feature_channels,
        feature_layers=config.feature_layers,
        max_disparity=config.max_disparity,
        reg_layers=config.reg_layers,
        cost_norm=config.cost_norm,
    )
    occ_cfg = model.OcclusionNetConfig()
    params = model.init_params(stereo_cfg, seed=config.seed, occ_config=occ_cfg)
    opt = ad.Adam(params, lr=config.lr)
    weights = losses.LossWeights(
        lambda_s_occ=config.lambda_s_occ,
        lambda_t_ar=config.lambda_t_ar,
        lambda_t_occ=config.lambda_t_occ,
        lambda_t_sm=config.lambda_t_sm,
        alpha=config.alpha,
    )

    if config.warm_start:
        state = color.warm_start_state(target[0].left, config.gamma)
    else:
        state = color.initial_state(config.gamma)

    rng = np.random.default_rng(config.seed)
    rows = []
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    for it in range(1, config.iterations + 1):
        # fixed draw order: indices, then source offsets, then target offsets
        si = rng.integers(0, len(source), size=config.batch_size)
        ti = rng.integers(0, len(target), size=config.batch_size)
        src_offs = []
        for b in si:
            s = source[b]
            src_offs.append(
                (
                    int(rng.integers(0, s.left.shape[0] - ch + 1)),
                    int(rng.integers(0, s.left.shape[1] - cw + 1)),
                )
            )
        tgt_offs = []
        for b in ti:
            t = target[b]
            tgt_offs.append(
                (
                    int(rng.integers(0, t.left.shape[0] - ch + 1)),
                    int(rng.integers(0, t.left.shape[1] - cw + 1)),
                )
            )

        src_l8, src_r8, gt_crops, valid_crops = [], [], [], []
        tgt_l8, tgt_r8 = [], []
        for b, (y0, x0) in zip(ti, tgt_offs):
            t = target[b]
            tgt_l8.append(_crop(t.left, y0, x0, ch, cw))
            tgt_r8.append(_crop(t.right, y0, x0, ch, cw))
        for k, (b, (y0, x0)) in enumerate(zip(si, src_offs)):
            s = source[b]
            left8 = _crop(s.left, y0, x0, ch, cw)
            right8 = _crop(s.right, y0, x0, ch, cw)
            if config.color_transfer:
                pair_lab = [color.rgb_to_lab(tgt_l8[k]), color.rgb_to_lab(tgt_r8[k])]
                state = color.progressive_update(state, color.union_stats(pair_lab))
                left8, right8 = color.transfer_pair(left8, right8, state)
            src_l8.append(left8)
            src_r8.append(right8)
            gt_crops.append(_crop(s.disparity, y0, x0, ch, cw))
            valid_crops.append(_crop(s.valid, y0, x0, ch, cw))

        src_l = _stack_images(src_l8)
        src_r = _stack_images(src_r8)
        gt = np.stack(gt_crops)[:, None]
        valid = np.stack(valid_crops)[:, None]

        d_s = model.forward_disparity(src_l, src_r, params, stereo_cfg)
        l_s_main = losses.loss_smooth_l1(d_s, Tensor(gt), valid)

        if config.recon:
            warped_s, _ = losses.warp_right_to_left(src_r, d_s)
            e_s = losses.error_map(src_l, warped_s)
            o_s = model.forward_occlusion(d_s, src_r, e_s, params, occ_cfg, config.max_disparity)
            occ_hat = losses.gt_occlusion_from_disparity(gt)
            l_s_occ = losses.loss_bce(o_s, Tensor(occ_hat))

            tgt_l = _stack_images(tgt_l8)
            tgt_r = _stack_images(tgt_r8)
            d_t = model.forward_disparity(tgt_l, tgt_r, params, stereo_cfg)
            warped_t, mask_t = losses.warp_right_to_left(tgt_r, d_t)
            e_t = losses.error_map(tgt_l, warped_t)
            o_t = model.forward_occlusion(d_t, tgt_r, e_t, params, occ_cfg, config.max_disparity)
            l_t_ar = losses.loss_recon(tgt_l, warped_t, o_t, mask_t, config.alpha)
            l_t_occ = losses.loss_occ_reg(o_t)
            l_t_sm = losses.loss_smooth(d_t, tgt_l)
        else:
            l_s_occ = _zero_scalar()
            l_t_ar = _zero_scalar()
            l_t_occ = _zero_scalar()
            l_t_sm = _zero_scalar()

        breakdown, total = losses.total_loss(l_s_main, l_s_occ, l_t_ar, l_t_occ, l_t_sm, weights)
        if not np.isfinite(breakdown.total):
            raise RuntimeError(
                f"non-finite loss at iteration {it}: source batch {list(map(int, si))}, "
                f"target batch {list(map(int, ti))}, breakdown {breakdown}"
            )

        ad.Adam.zero_grads(params)
        ad.backward(total)
        opt.step(params)

        if it % config.eval_interval == 0 or it == config.iterations:
            d1 = _eval_target_d1(params, stereo_cfg, target)
            row = {
                "iter": it,
                "l_s_main": breakdown.l_s_main,
                "l_s_occ": breakdown.l_s_occ,
                "l_t_ar": breakdown.l_t_ar,
                "l_t_occ": breakdown.l_t_occ,
                "l_t_sm": breakdown.l_t_sm,
                "total": breakdown.total,
                "target_d1": d1,
            }
            if not rows or rows[-1]["iter"] != it:
                rows.append(row)
                if log_fn is not None:
                    log_fn(row)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["iter"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]]
            )

    checkpoint_path = out / "checkpoint.ckpt"
    extra = {
        "iteration": config.iterations,
        "color_state": {
            "mu_t": [float(v) for v in np.atleast_1d(state.mu_t)],
            "sigma_t": [float(v) for v in np.atleast_1d(state.sigma_t)],
            "gamma": state.gamma,
            "update_count": state.update_count,
        },
        "train_config": dataclasses.asdict(config),
    }
    model.save_checkpoint(
        checkpoint_path, params, model.config_dicts(stereo_cfg, occ_cfg), adam=opt, extra=extra
    )
    return TrainResult(
        checkpoint_path=str(checkpoint_path),
        metrics_path=str(metrics_path),
        rows=rows,
        final_target_d1=rows[-1]["target_d1"],
    )
