"""``rdcseg`` command line: synth, warp, gradcheck, train, eval."""

from __future__ import annotations

import argparse
import logging
import sys

from . import gradcheck
from .config import ConfigError, load_config
from .fisheye import ZoomAugmentConfig
from .metrics import write_metrics_csv
from .runner import DomainData, evaluate_directory, train, warp_directory, zoom_from_config
from .synth import SceneSpec, load_pairs, write_scenes

log = logging.getLogger("rdcseg")


def cmd_synth(args) -> int:
    if args.count <= 0:
        log.error("--count must be positive")
        return 2
    spec = SceneSpec(args.height, args.width, args.classes, args.rects, args.discs, args.noise, args.seed)
    write_scenes(spec, args.count, args.out)
    print(f"wrote {args.count} pairs to {args.out}")
    return 0


def cmd_warp(args) -> int:
    if args.focal is not None:
        zoom = ZoomAugmentConfig("fixed", args.focal, output_shape=(args.height, args.width))
    elif args.focal_min is not None and args.focal_max is not None:
        zoom = ZoomAugmentConfig("random", focal_range=(args.focal_min, args.focal_max),
                                 output_shape=(args.height, args.width))
    else:
        log.error("give --focal, or both --focal-min and --focal-max")
        return 2
    try:
        n = warp_directory(args.src, args.out, zoom, args.seed)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return 1
    if n == 0:
        log.error("no readable pairs in %s", args.src)
        return 1
    print(f"warped {n} pairs into {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(args.variant, args.seed, args.instances, args.tolerance, args.inject_fault)
    print(f"{args.variant}: {report}")
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if len(args.data) != cfg.K + 1:
        log.error("config has K=%d; pass %d --data directories (got %d)", cfg.K, cfg.K + 1, len(args.data))
        return 2
    zoom = zoom_from_config(cfg)
    domains = []
    for i, d in enumerate(args.data):
        images, labels = load_pairs(d)
        if not images:
            log.error("no pairs in %s", d)
            return 1
        domains.append(DomainData(images, labels, zoom if i > 0 else None))
    train(cfg, domains, args.out)
    print(f"trained {cfg.max_iter} iterations; log and checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    try:
        cm = evaluate_directory(args.checkpoint, args.data, args.domain)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    write_metrics_csv(args.out, cm)
    if args.counts:
        cm.write_counts_csv(args.counts)
    print(f"mIoU={cm.mean_iou():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdcseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic image/label pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--rects", type=int, default=3)
    s.add_argument("--discs", type=int, default=3)
    s.add_argument("--noise", type=float, default=12.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("warp", help="zoom-augment a directory of pairs into fisheye geometry")
    s.add_argument("--src", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--focal", type=float, help="fixed focal length in pixels")
    s.add_argument("--focal-min", type=float, help="random mode lower bound")
    s.add_argument("--focal-max", type=float, help="random mode upper bound")
    s.add_argument("--height", type=int, default=576, help="fisheye output height")
    s.add_argument("--width", type=int, default=640, help="fisheye output width")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("gradcheck", help="finite-difference check of an operator")
    s.add_argument("--variant", required=True, choices=gradcheck.SUITES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--inject-fault", action="store_true", help="corrupt one analytic gradient by +10%%")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="multi-task training of the toy network")
    s.add_argument("--config", required=True)
    s.add_argument("--data", action="append", required=True,
                   help="domain directory; repeat, real domain first")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--domain", type=int, default=0)
    s.add_argument("--out", required=True, help="metrics CSV")
    s.add_argument("--counts", help="optional confusion-matrix CSV")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
