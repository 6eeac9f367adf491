"""Disparity error metrics and checkpoint evaluation over a sample directory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio, model, synth

__all__ = ["MetricReport", "d1_error", "aggregate_reports", "evaluate", "evaluate_predictions"]


@dataclass(frozen=True)
class MetricReport:
    d1_percent: float
    epe_mean: float
    n_valid: int
    n_bad: int
    abs_thresh: float
    rel_thresh: float
    use_rel: bool

    def __post_init__(self):
        if not (0.0 <= self.d1_percent <= 100.0):
            raise ValueError(f"d1_percent {self.d1_percent} outside [0, 100]")


def d1_error(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray,
    abs_thresh: float = 3.0,
    rel_thresh: float = 0.05,
    use_rel: bool = False,
) -> MetricReport:
    """Bad-pixel rate: |err| > abs_thresh, optionally also > rel_thresh * gt."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(valid, dtype=np.float64) > 0.5
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {mask.shape}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels to evaluate")
    err = np.abs(pred - gt)[mask]
    bad = err > abs_thresh
    if use_rel:
        bad &= err > rel_thresh * np.abs(gt[mask])
    n_bad = int(bad.sum())
    return MetricReport(
        d1_percent=100.0 * n_bad / n_valid,
        epe_mean=float(err.mean()),
        n_valid=n_valid,
        n_bad=n_bad,
        abs_thresh=abs_thresh,
        rel_thresh=rel_thresh,
        use_rel=use_rel,
    )


def aggregate_reports(reports) -> MetricReport:
    """Valid-pixel-weighted pooling, identical to one pass over all pixels."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if (r.abs_thresh, r.rel_thresh, r.use_rel) != (
            first.abs_thresh,
            first.rel_thresh,
            first.use_rel,
        ):
            raise ValueError("cannot aggregate reports with different thresholds")
    n_valid = sum(r.n_valid for r in reports)
    n_bad = sum(r.n_bad for r in reports)
    epe = sum(r.epe_mean * r.n_valid for r in reports) / n_valid
    return MetricReport(
        d1_percent=100.0 * n_bad / n_valid,
        epe_mean=float(epe),
        n_valid=n_valid,
        n_bad=n_bad,
        abs_thresh=first.abs_thresh,
        rel_thresh=first.rel_thresh,
        use_rel=first.use_rel,
    )


def predict_disparity(params, stereo_cfg, sample) -> np.ndarray:
    """One deterministic forward pass on a full-resolution sample."""
    i_l = fileio.image_to_tensor(sample.left)
    i_r = fileio.image_to_tensor(sample.right)
    pred = model.forward_disparity(i_l, i_r, params, stereo_cfg)
    return fileio.tensor_to_disparity(pred)


def evaluate(
    checkpoint_path,
    data_dir,
    abs_thresh: float = 3.0,
    rel_thresh: float = 0.05,
    use_rel: bool = False,
) -> tuple[list, MetricReport]:
    """Per-sample reports plus the pixel-weighted aggregate."""
    params, configs, _, _ = model.load_checkpoint(checkpoint_path)
    stereo_cfg = model.stereo_config_from_dict(configs["stereo"])
    reports = []
    for stem in synth.list_stems(data_dir):
        sample = synth.load_sample(data_dir, stem)
        if sample.left.shape[1] < stereo_cfg.max_disparity:
            raise ValueError(
                f"sample {stem} width {sample.left.shape[1]} below the checkpoint's "
                f"disparity range {stereo_cfg.max_disparity}"
            )
        pred = predict_disparity(params, stereo_cfg, sample)
        reports.append(
            d1_error(pred, sample.disparity, sample.valid, abs_thresh, rel_thresh, use_rel)
        )
    return reports, aggregate_reports(reports)


def evaluate_predictions(
    pred_dir,
    data_dir,
    abs_thresh: float = 3.0,
    rel_thresh: float = 0.05,
    use_rel: bool = False,
) -> tuple[list, MetricReport]:
    """Compare stored disparity maps ({stem}_disp.pfm) against ground truth."""
    reports = []
    for stem in synth.list_stems(data_dir):
        sample = synth.load_sample(data_dir, stem)
        pred = fileio.read_pfm(f"{pred_dir}/{stem}_disp.pfm").astype(np.float64)
        if pred.shape != sample.disparity.shape:
            raise ValueError(
                f"prediction {stem} has shape {pred.shape}, ground truth "
                f"{sample.disparity.shape}"
            )
        reports.append(
            d1_error(pred, sample.disparity, sample.valid, abs_thresh, rel_thresh, use_rel)
        )
    return reports, aggregate_reports(reports)
