"""``dualcorenet`` command line: synth, train, eval, segment, verify.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import Config, config_text, load_config
from .data import (RoiSample, SynthSpec, background_rois, load_dataset, load_rois, roi_for_inference, save_dataset,
                   split_dataset, synth_dataset)
from .errors import ConfigError, DualCoreError, FormatError, ShapeError, TrainingError
from .fileio import read_image_pgm, write_mask_pgm, write_soft_pgm
from .metrics import binarize, roc_svg
from .model import fused_forward, init_network
from .pipeline import evaluate, train_model
from .tensor import make_rng, no_grad, set_precision
from .training import checkpoint_load, make_batch
from .verify import run_suites


EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SPLIT_STREAM = 101  # rng stream of the train/test split, shared by train and eval
NEGATIVE_STREAM = 102


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommand copies must not reset values given before the subcommand name.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [network] [crf] [training] [data] [run]", **kw)
    common.add_argument("--seed", type=int, help="overrides [run] seed", **kw)
    common.add_argument("--precision", choices=("f32", "f64"), help="overrides [run] precision", **kw)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualcorenet", description="Dual-path segmentation and classification network.",
                parents=[_common_flags(False)])
    common = _common_flags(True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset directory")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=SynthSpec.size, help="image side in pixels")

    t = sub.add_parser("train", parents=[common], help="run the training schedule and report on the test split")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--out", type=Path, help="directory for report.txt and roc.svg (default: next to the checkpoint)")

    g = sub.add_parser("segment", parents=[common], help="segment and classify one image")
    g.add_argument("--ckpt", type=Path, required=True)
    g.add_argument("--image", type=Path, required=True)
    g.add_argument("--mask-out", type=Path, required=True)
    g.add_argument("--soft-out", type=Path, help="8-bit soft mask (default: MASK_OUT with .soft.pgm)")
    g.add_argument("--box", help="bounding box r0,r1,c0,c1 (half-open); default is the whole image")

    v = sub.add_parser("verify", parents=[common], help="run invariant suites")
    v.add_argument("--suite", choices=("grad", "crf", "metrics", "all"), default="all")
    return p


def _threads() -> int:
    raw = os.environ.get("DCN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DCN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DCN_THREADS must be a positive integer, got {raw!r}")
    return n


def resolve_config(args) -> Config:
    overrides: dict = {"run": {}}
    if args.seed is not None:
        overrides["run"]["seed"] = str(args.seed)
    if args.precision is not None:
        overrides["run"]["precision"] = args.precision
    return load_config(args.config, overrides)


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise ConfigError(f"{what} directory not found: {path}")


def _load_split(cfg: Config, data_dir: Path):
    _require_dir(data_dir, "dataset")
    n = cfg.network
    rois = load_rois(data_dir, n.bbox_size, n.context_size, n.mask_size, cfg.data.cache, cfg.data.context_scale)
    if len(rois) < 2:
        raise ConfigError(f"dataset {data_dir} needs at least 2 samples, has {len(rois)}")
    return split_dataset(rois, cfg.data.split_ratio, make_rng(cfg.run.seed, SPLIT_STREAM), cfg.run.seed)


def _load_params(cfg: Config, ckpt: Path):
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params = init_network(cfg.network, make_rng(cfg.run.seed, 0))
    checkpoint_load(ckpt, params)
    return params


def _write_report(report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write(out_dir / "report.txt")
    (out_dir / "roc.svg").write_text(roc_svg(report.roc))


def _summary(report) -> str:
    parts = [f"mean_dice {report.mean_dice():.4f}"] + [f"auc_{k} {v:.4f}" for k, v in report.auc.items()]
    return " ".join(parts)


def cmd_synth(args, cfg: Config) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    images = synth_dataset(args.count, make_rng(cfg.run.seed, 100), SynthSpec(size=args.size))
    try:
        save_dataset(args.out, images)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(images)} samples to {args.out}")
    return EXIT_OK


def _negatives(cfg: Config, data_dir: Path, train_ids: set) -> list:
    if cfg.data.negative_rois == 0:
        return []
    rng = make_rng(cfg.run.seed, NEGATIVE_STREAM)
    n = cfg.network
    return [roi for img in load_dataset(data_dir, train_ids)
            for roi in background_rois(img, cfg.data.negative_rois, rng, n.bbox_size, n.context_size,
                                       n.mask_size, cfg.data.context_scale)]


def cmd_train(args, cfg: Config) -> int:
    split = _load_split(cfg, args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.ini").write_text(config_text(cfg))
    (args.out / "split.tsv").write_text("".join(f"train\t{s.id}\n" for s in split.train)
                                        + "".join(f"test\t{s.id}\n" for s in split.test))

    negatives = _negatives(cfg, args.data, {s.id for s in split.train})
    with split.locked_test():
        result = train_model(split.train, cfg.network, cfg.crf, cfg.training, out_dir=args.out,
                             resume=args.resume, augment=cfg.data.augment, negatives=negatives)
    report = evaluate(split.test, result.params, cfg.network, cfg.crf, result.path_params,
                      cfg.training.dice_threshold)
    _write_report(report, args.out)
    print(_summary(report))
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    params = _load_params(cfg, args.ckpt)
    split = _load_split(cfg, args.data)
    samples = {"test": split.test, "train": split.train, "all": split.train + split.test}[args.split]
    report = evaluate(samples, params, cfg.network, cfg.crf, threshold=cfg.training.dice_threshold)
    _write_report(report, args.out or args.ckpt.parent / f"eval_{args.split}")
    print(_summary(report))
    return EXIT_OK


def _parse_box(text: str | None):
    if text is None:
        return None
    try:
        r0, r1, c0, c1 = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--box expects r0,r1,c0,c1 integers, got {text!r}") from None
    return r0, r1, c0, c1


def cmd_segment(args, cfg: Config) -> int:
    params = _load_params(cfg, args.ckpt)
    if not args.image.is_file():
        raise ConfigError(f"image not found: {args.image}")
    image = read_image_pgm(args.image)
    n = cfg.network
    bbox, ctx = roi_for_inference(image, n.bbox_size, n.context_size, cfg.data.context_scale, _parse_box(args.box))

    roi = RoiSample(bbox, ctx, np.zeros((n.mask_size, n.mask_size)), 0, args.image.stem)
    batch = make_batch([roi], n)
    with no_grad():
        out = fused_forward(batch["context"], batch["bbox"], params, n, cfg.crf)
    soft = out.soft_mask.data[0, ..., 1]
    mask = binarize(soft, cfg.training.dice_threshold)
    write_mask_pgm(args.mask_out, mask)
    soft_out = args.soft_out or args.mask_out.with_suffix(".soft.pgm")
    write_soft_pgm(soft_out, soft)
    p = out.class_probs.data[0]
    print(f"malignant_prob {float(p[1]):.6f} foreground_fraction {float(mask.mean()):.4f}")
    return EXIT_OK


def cmd_verify(args, cfg: Config) -> int:
    results = run_suites([args.suite], seed=cfg.run.seed, emit=print)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed} passed, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dualcorenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        threads = _threads()
        cfg = resolve_config(args)
        set_precision(cfg.run.precision)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"dualcorenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ShapeError, FormatError, DualCoreError, OSError) as exc:
        print(f"dualcorenet: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
