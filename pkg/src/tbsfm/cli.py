"""Command-line entry point: ``tbsfm <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import simulator, stages
from .bundle import BAOptions
from .registration import RansacParams
from .scene import ReferentialIntegrityError, SceneFormatError
from .segmentation import DEFAULT_K

log = logging.getLogger("tbsfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STAGE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _ransac_args(p):
    p.add_argument("--tau", type=_positive_float, default=4.0, help="inlier threshold in pixels")
    p.add_argument("--max-ransac-iters", type=_positive_int, default=10000)
    p.add_argument("--confidence", type=float, default=0.999)
    p.add_argument("--min-inliers", type=_positive_int, default=15)
    p.add_argument("--max-models", type=_positive_int, default=4)


def _ba_args(p):
    p.add_argument("--robust", action="store_true", help="Huber loss with scale 2*tau")
    p.add_argument("--max-iters", type=_positive_int, default=100)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tbsfm", description="Two-body structure from motion over multiple takes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic scene with ground truth")
    p.add_argument("--config", type=Path, help="JSON simulator config")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("register", parents=[common], help="sequential RANSAC registration")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _ransac_args(p)

    p = sub.add_parser("group", parents=[common], help="per-take grouping and tracks")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--registrations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--motion-criterion", action="store_true")

    p = sub.add_parser("segment", parents=[common], help="global grouping and labels")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--groups", type=Path, required=True)
    p.add_argument("--tracks", type=Path, required=True)
    p.add_argument("--registrations", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--knn", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--swap", action="store_true", help="exchange background and foreground")

    p = sub.add_parser("merge", parents=[common], help="merge takes into the reference frame")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--registrations", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ba", parents=[common], help="two-body bundle adjustment")
    p.add_argument("--merged", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _ba_args(p)

    p = sub.add_parser("pipeline", parents=[common], help="all stages end to end")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--motion-criterion", action="store_true")
    p.add_argument("--knn", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--swap", action="store_true")
    _ransac_args(p)
    _ba_args(p)

    p = sub.add_parser("evaluate", parents=[common], help="score a result against ground truth")
    p.add_argument("--result", type=Path, required=True)
    p.add_argument("--ground-truth", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("export-ply", parents=[common], help="colored point cloud")
    p.add_argument("--result", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _ransac_params(args):
    return RansacParams(args.tau, args.max_ransac_iters, args.confidence, args.min_inliers, args.max_models)


def _ba_options(args, tau=4.0):
    return BAOptions(max_iters=args.max_iters, robust=args.robust, huber_scale=2.0 * tau)


def _run(args):
    cmd = args.command
    if cmd == "simulate":
        cfg = simulator.SimConfig.from_json(args.config) if args.config else simulator.SimConfig()
        simulator.write(cfg, args.out)
    elif cmd == "register":
        stages.run_register(args.scene, args.out, _ransac_params(args), args.seed, args.threads)
    elif cmd == "group":
        stages.run_group(args.scene, args.registrations, args.out, args.motion_criterion)
    elif cmd == "segment":
        stages.run_segment(args.scene, args.groups, args.tracks, args.out, args.knn, args.swap, args.registrations)
    elif cmd == "merge":
        stages.run_merge(args.scene, args.labels, args.out, args.registrations)
    elif cmd == "ba":
        stages.run_ba(args.merged, args.out, _ba_options(args))
    elif cmd == "pipeline":
        stages.run_pipeline(args.scene, args.out, _ransac_params(args), args.seed, args.threads,
                            args.motion_criterion, args.knn, args.swap, _ba_options(args, args.tau))
    elif cmd == "evaluate":
        stages.run_evaluate(args.result, args.out, args.ground_truth)
    elif cmd == "export-ply":
        stages.run_export_ply(args.result, args.out)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("effective config: %s", {k: str(v) for k, v in sorted(vars(args).items())})
    try:
        if getattr(args, "confidence", 0.5) >= 1 or getattr(args, "confidence", 0.5) <= 0:
            parser.error("--confidence must lie in (0, 1)")
        _run(args)
    except stages.StageError as e:
        print(f"stage failed: {e.stage}: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (FileNotFoundError, SceneFormatError, ReferentialIntegrityError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError, ArithmeticError) as e:
        print(f"stage failed: {args.command}: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
