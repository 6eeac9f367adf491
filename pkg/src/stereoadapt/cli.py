"""Command line entry points.

Exit codes: 0 on success, 1 for bad invocations, 2 for runtime
failures (unreadable files, malformed data, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import sys
from pathlib import Path

import numpy as np

from . import color, costvol, fileio, metrics, synth, train


class UsageError(Exception):
    """Bad invocation that argparse cannot detect on its own."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract here
    # reserves 2 for runtime failures, so remap to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt3(values) -> str:
    return " ".join(f"{float(v):.4f}" for v in values)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_synth(args) -> int:
    spec = synth.domain_spec(
        args.domain,
        width=args.width,
        height=args.height,
        max_disparity=args.max_disp,
    )
    samples = synth.generate_dataset(spec, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        synth.save_sample(out, synth.sample_stem(i), sample)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _glob_images(pattern: str):
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise UsageError(f"no images match {pattern!r}")
    return paths


def _cmd_stats(args) -> int:
    paths = _glob_images(args.images)
    images = [fileio.read_image(p) for p in paths]
    lab = color.union_stats([color.rgb_to_lab(img) for img in images])
    rgb = np.concatenate([img.reshape(-1, 3).astype(np.float64) for img in images])
    print(f"images: {len(paths)}")
    print(f"rgb mean: {_fmt3(rgb.mean(axis=0))}")
    print(f"rgb std: {_fmt3(rgb.std(axis=0))}")
    print(f"lab mean: {_fmt3(lab.mu)}")
    print(f"lab std: {_fmt3(lab.sigma)}")
    return 0


def _cmd_transfer(args) -> int:
    src_paths = _glob_images(args.source)
    tgt_paths = _glob_images(args.target)
    targets = [fileio.read_image(p) for p in tgt_paths]
    if args.warm_start:
        state = color.warm_start_state(targets[0], args.gamma)
    else:
        state = color.initial_state(args.gamma)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Fold target statistics in a seed-shuffled order, one image per
    # transferred source, wrapping when sources outnumber targets.
    order = np.random.default_rng(args.seed).permutation(len(targets))
    for i, path in enumerate(src_paths):
        tgt = targets[order[i % len(order)]]
        state = color.progressive_update(state, color.channel_stats(color.rgb_to_lab(tgt)))
        lab = color.rgb_to_lab(fileio.read_image(path))
        out = color.lab_to_rgb(color.transfer(lab, color.channel_stats(lab), state))
        fileio.write_image(out_dir / Path(path).name, out)
    print(f"wrote {len(src_paths)} images to {out_dir}")
    return 0


def _cmd_costvol_hist(args) -> int:
    left = fileio.image_to_tensor(fileio.read_image(args.left))
    right = fileio.image_to_tensor(fileio.read_image(args.right))
    if args.cost_norm:
        left = costvol.cost_norm(left)
        right = costvol.cost_norm(right)
    volume = costvol.correlation_volume(left, right, args.max_disp)
    hist = costvol.cost_histogram(volume, args.bins)
    rows = list(zip(hist.edges[:-1], hist.edges[1:], hist.proportions))
    for lo, hi, p in rows:
        print(f"[{lo:9.4f}, {hi:9.4f})  {p:.6f}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("bin_lo", "bin_hi", "proportion"))
        for lo, hi, p in rows:
            writer.writerow((repr(float(lo)), repr(float(hi)), repr(float(p))))
    print(f"histogram csv: {args.out}")
    return 0


def _cmd_train(args) -> int:
    file_values = train.parse_config_file(args.config) if args.config else {}
    overrides = {}
    for field in dataclasses.fields(train.TrainConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            overrides[field.name] = value
    config = train.config_from_sources(file_values, overrides)
    for key in ("source_dir", "target_dir"):
        if not getattr(config, key):
            flag = "--" + key.replace("_", "-")
            raise UsageError(f"{flag} is required (flag or config file)")

    def log_row(row):
        parts = [f"iter {row['iter']:>6}"]
        parts += [f"{c} {row[c]:.6f}" for c in train.METRIC_COLUMNS[1:-1]]
        parts.append(f"target_d1 {row['target_d1']:.2f}%")
        print("  ".join(parts))

    result = train.train_adapt(config, log_fn=log_row)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    print(f"final target D1: {result.final_target_d1:.2f}%")
    return 0


def _cmd_eval(args) -> int:
    if args.pred:
        reports, aggregate = metrics.evaluate_predictions(
            args.pred, args.data, abs_thresh=args.threshold, use_rel=args.rel
        )
    else:
        reports, aggregate = metrics.evaluate(
            args.checkpoint, args.data, abs_thresh=args.threshold, use_rel=args.rel
        )
    print(f"samples: {len(reports)}")
    print(f"EPE: {aggregate.epe_mean:.4f}")
    print(f"D1: {aggregate.d1_percent:.2f}%")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stereoadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-synth", help="write a synthetic stereo dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=("a", "b"), default="a")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--max-disp", type=int, default=12)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("stats", help="print channel statistics for a set of images")
    p.add_argument("--images", required=True, help="glob over image files")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("transfer", help="color-match source images to a target set")
    p.add_argument("--source", required=True, help="glob over source images")
    p.add_argument("--target", required=True, help="glob over target images")
    p.add_argument("--gamma", type=float, default=0.95, help="statistics momentum")
    p.add_argument("--warm-start", action="store_true",
                   help="seed the running stats from the first target image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("costvol-hist", help="histogram of matching costs for one pair")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--max-disp", type=int, required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--cost-norm", action="store_true",
                   help="normalize features before correlation")
    p.add_argument("--out", default="costvol_hist.csv", help="csv path")
    p.set_defaults(func=_cmd_costvol_hist)

    p = sub.add_parser("train", help="run domain-adaptation training")
    p.add_argument("--config", help="key = value file; flags override it")
    switches = {"color_transfer", "cost_norm", "recon", "warm_start"}
    for field in dataclasses.fields(train.TrainConfig):
        if field.name == "out_dir":
            continue
        flag = "--" + field.name.replace("_", "-")
        if field.name in switches:
            p.add_argument(flag, choices=("on", "off"), default=None)
        else:
            p.add_argument(flag, default=None, metavar="V")
    p.add_argument("--out", dest="out_dir", default=None, help="run directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score disparities against a dataset's ground truth")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="trained checkpoint to run")
    source.add_argument("--pred", help="directory of predicted *_disp.pfm maps")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--threshold", type=float, default=3.0, help="absolute error bound, px")
    p.add_argument("--rel", action="store_true",
                   help="also require the error to exceed 5%% of ground truth")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if isinstance(code, int):
            return code
        return 0 if code is None else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
