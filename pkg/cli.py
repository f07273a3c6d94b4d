"""
adaptive-nms command line.

    adaptive-nms simulate --preset crowdhuman --images 200 -o data/
    adaptive-nms suppress data/detections.jsonl --method adaptive --density-source oracle \
        --annotations data/annotations.jsonl -o kept.jsonl
    adaptive-nms eval data/annotations.jsonl kept.jsonl --bins -o report.json
    adaptive-nms density data/annotations.jsonl -o densities.jsonl
    adaptive-nms sweep data/annotations.jsonl data/detections.jsonl \
        --methods greedy,adaptive --nt-values 0.4,0.5,0.6,0.7 --density-source oracle -o sweep.csv

Data goes to --output (a file, or '-' for stdout); logs and counts go to stderr.
Exit codes: 0 success, 1 usage error, 2 data error.
"""
import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from core.config import (
    DEFAULT_IOU_THRESH,
    DEFAULT_JOBS,
    DEFAULT_NT,
    DEFAULT_SEED,
    DEFAULT_SELF_ESTIMATE_FLOOR,
    DEFAULT_SIGMA,
    DEFAULT_SOFT_SCORE_FLOOR,
    LOG_LEVEL,
    MIN_BIN_HEIGHT,
    TOOL_NAME,
    TOOL_VERSION,
    configure_logging,
)
from core.decorators import EXIT_USAGE, cli_command
from core.errors import UsageError
from services.density_service import DensityService, DensitySource, crowd_statistics, normalize_mode
from services.evaluation_service import EvaluationService, check_image_ids
from services.io_service import (
    STDOUT,
    read_annotations,
    read_detections,
    write_curve_csv,
    write_density_dump,
    write_detections,
    write_json,
    write_report,
    write_table_csv,
)
from services.suppression_service import METHOD_ALIASES, SuppressionService, config_from_method_name
from services.sweep_service import SweepService
from services.synth_service import SCENE_PRESETS, DetectorParams, generate_dataset, scene_preset

METHOD_CHOICES = sorted(k.replace("_", "-") for k in METHOD_ALIASES)
DENSITY_SOURCES = ("oracle", "self-estimate", "provided")

logger = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; here bad flags are usage errors (1)."""

    def error(self, message):
        raise UsageError(message)


def _emit(message: str) -> None:
    print(message, file=sys.stderr)


def _envelope(command: str, args: argparse.Namespace, config: Dict[str, Any], body_key: str, body: Any) -> Dict[str, Any]:
    return {
        "tool": {"name": TOOL_NAME, "version": TOOL_VERSION},
        "command": command,
        "config": config,
        "seed": args.seed,
        body_key: body,
    }


def _write_sidecar(output: str, document: Dict[str, Any]) -> None:
    """Formats without a header slot get their config next to them as <output>.meta.json."""
    if output != STDOUT:
        write_json(f"{output}.meta.json", document)


def _density_source(args: argparse.Namespace) -> Optional[DensitySource]:
    if not args.density_source:
        return None
    return DensitySource(mode=normalize_mode(args.density_source), score_floor=args.self_floor)


def _parse_list(raw: str, cast, flag: str) -> List[Any]:
    try:
        values = [cast(item.strip()) for item in raw.split(",") if item.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from exc
    if not values:
        raise UsageError(f"{flag} needs at least one value")
    return values


@cli_command
def cmd_simulate(args: argparse.Namespace) -> None:
    if args.output == STDOUT:
        raise UsageError("simulate writes a dataset directory; pass --output DIR")
    overrides = {
        "persons_per_image": args.persons_per_image,
        "crowd_pair_rate": args.pair_rate,
        "image_width": args.width,
        "image_height": args.height,
        "aspect_ratio": args.aspect_ratio,
        "ignore_rate": args.ignore_rate,
    }
    if args.min_height is not None or args.max_height is not None:
        lo, hi = SCENE_PRESETS[args.preset]["person_height_range"]
        overrides["person_height_range"] = (
            args.min_height if args.min_height is not None else lo,
            args.max_height if args.max_height is not None else hi,
        )
    scene = scene_preset(args.preset, seed=args.seed, **{k: v for k, v in overrides.items() if v is not None})
    detector_fields = {
        "localization_noise": args.noise,
        "duplicate_count": args.duplicates,
        "fp_rate": args.fp_rate,
        "base_score": args.base_score,
        "score_slope": args.score_slope,
        "score_noise": args.score_noise,
    }
    detector = DetectorParams(
        seed=args.detector_seed if args.detector_seed is not None else args.seed,
        **{k: v for k, v in detector_fields.items() if v is not None},
    )
    paths = generate_dataset(args.images, scene, detector, args.output, jobs=args.jobs)
    _emit(f"simulate: {args.images} images -> {paths['annotations']}, {paths['detections']}")


@cli_command
def cmd_suppress(args: argparse.Namespace) -> None:
    cfg = config_from_method_name(
        args.method,
        adaptive=args.adaptive,
        nt=args.nt,
        sigma=args.sigma,
        score_floor=args.score_floor,
    )
    detections = read_detections(args.detections)
    source = _density_source(args)
    if not cfg.adaptive and (source or args.annotations):
        logger.warning(f"[CLI] {cfg.label} does not use densities; ignoring --density-source and --annotations")
        source = None
    if cfg.adaptive:
        annotations = None
        if args.annotations:
            annotations = read_annotations(args.annotations)
            check_image_ids(annotations, detections)
        detections = DensityService.attach(annotations, detections, source or DensitySource(), args.jobs)

    results = SuppressionService.run(detections, cfg, args.jobs)
    write_detections(args.output, {image_id: r.kept for image_id, r in results.items()})

    config = {"suppression": cfg.model_dump(), "density_source": source.model_dump() if source else None}
    _write_sidecar(args.output, _envelope("suppress", args, config, "counts", {
        "images": len(results),
        "kept": sum(len(r.kept) for r in results.values()),
        "suppressed": sum(r.suppressed_count for r in results.values()),
    }))
    _emit(
        f"suppress: {cfg.label} kept={sum(len(r.kept) for r in results.values())} "
        f"suppressed={sum(r.suppressed_count for r in results.values())}"
    )


@cli_command
def cmd_eval(args: argparse.Namespace) -> None:
    annotations = read_annotations(args.annotations)
    detections = read_detections(args.detections)
    report = EvaluationService.evaluate(
        annotations, detections, iou_thresh=args.iou, bins=args.bins, min_height=args.min_height, jobs=args.jobs
    )
    config = {"iou_thresh": args.iou, "bins": args.bins, "min_height": args.min_height}
    write_report(args.output, _envelope("eval", args, config, "report", report.to_dict()))
    if args.curve_csv:
        write_curve_csv(args.curve_csv, report.curve)
    _emit(f"eval: MR-2={report.mr2:.4f} AP={report.ap:.4f} recall={report.recall:.4f}")


@cli_command
def cmd_density(args: argparse.Namespace) -> None:
    annotations = read_annotations(args.annotations)
    write_density_dump(args.output, annotations)
    stats = crowd_statistics([annotations[i] for i in sorted(annotations)])
    _write_sidecar(args.output, _envelope("density", args, {}, "statistics", stats))
    _emit(f"density: {json.dumps(stats, sort_keys=True)}")


@cli_command
def cmd_sweep(args: argparse.Namespace) -> None:
    methods = _parse_list(args.methods, str, "--methods")
    nt_values = _parse_list(args.nt_values, float, "--nt-values")
    annotations = read_annotations(args.annotations)
    detections = read_detections(args.detections)
    source = _density_source(args)
    table = SweepService.run(
        annotations,
        detections,
        methods,
        nt_values,
        density_source=source,
        sigma=args.sigma,
        score_floor=args.score_floor,
        iou_thresh=args.iou,
        jobs=args.jobs,
    )
    write_table_csv(args.output, table)
    config = {
        "methods": methods,
        "nt_values": nt_values,
        "sigma": args.sigma,
        "score_floor": args.score_floor,
        "iou_thresh": args.iou,
        "density_source": source.model_dump() if source else None,
    }
    _write_sidecar(args.output, _envelope("sweep", args, config, "rows", len(table)))
    _emit(f"sweep: {len(table)} cells")


def _global_flags(suppress_defaults: bool) -> argparse.ArgumentParser:
    """Global flags; the subcommand copy uses SUPPRESS so it only overrides when given."""
    default = (lambda value: argparse.SUPPRESS) if suppress_defaults else (lambda value: value)
    parent = _ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=default(DEFAULT_SEED), help="base seed (default %(default)s)")
    parent.add_argument("--jobs", type=int, default=default(DEFAULT_JOBS), help="worker processes for per-image work")
    parent.add_argument("--output", "-o", default=default(STDOUT), help="output file, '-' for stdout")
    parent.add_argument("--log-level", default=default(LOG_LEVEL), help="DEBUG, INFO, WARNING, ERROR")
    return parent


def _add_suppression_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="soft_gaussian width")
    p.add_argument("--score-floor", type=float, default=DEFAULT_SOFT_SCORE_FLOOR, help="soft methods drop below this")
    p.add_argument("--density-source", choices=DENSITY_SOURCES, help="where adaptive densities come from")
    p.add_argument("--self-floor", type=float, default=DEFAULT_SELF_ESTIMATE_FLOOR, help="self-estimate score floor")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog=TOOL_NAME, description="Greedy, soft and adaptive NMS toolkit", parents=[_global_flags(False)])
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    common = [_global_flags(True)]

    p = sub.add_parser("simulate", parents=common, help="generate a synthetic crowd dataset")
    p.add_argument("--preset", choices=sorted(SCENE_PRESETS), default="crowdhuman")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--persons-per-image", type=float)
    p.add_argument("--pair-rate", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--min-height", type=float)
    p.add_argument("--max-height", type=float)
    p.add_argument("--aspect-ratio", type=float)
    p.add_argument("--ignore-rate", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--duplicates", type=int)
    p.add_argument("--fp-rate", type=float)
    p.add_argument("--base-score", type=float)
    p.add_argument("--score-slope", type=float)
    p.add_argument("--score-noise", type=float)
    p.add_argument("--detector-seed", type=int, help="defaults to --seed")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("suppress", parents=common, help="run NMS over a detection file")
    p.add_argument("detections")
    p.add_argument("--method", choices=METHOD_CHOICES, default="greedy")
    p.add_argument("--adaptive", action="store_true", help="use max(nt, density) as the threshold")
    p.add_argument("--nt", type=float, default=DEFAULT_NT)
    p.add_argument("--annotations", help="ground truth, needed by --density-source oracle")
    _add_suppression_flags(p)
    p.set_defaults(handler=cmd_suppress)

    p = sub.add_parser("eval", parents=common, help="MR-2 / AP / recall report")
    p.add_argument("annotations")
    p.add_argument("detections")
    p.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESH)
    p.add_argument("--bins", action="store_true", help="add MR-2 per ground-truth density bin")
    p.add_argument("--min-height", type=float, default=MIN_BIN_HEIGHT)
    p.add_argument("--curve-csv", help="also write the FPPI / miss-rate curve")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("density", parents=common, help="dump ground truth with densities")
    p.add_argument("annotations")
    p.set_defaults(handler=cmd_density)

    p = sub.add_parser("sweep", parents=common, help="evaluate a methods x nt grid")
    p.add_argument("annotations")
    p.add_argument("detections")
    p.add_argument("--methods", default="greedy,adaptive")
    p.add_argument("--nt-values", default="0.4,0.5,0.6,0.7")
    p.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESH)
    _add_suppression_flags(p)
    p.set_defaults(handler=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        configure_logging()
        parser.print_usage(sys.stderr)
        _emit(f"{TOOL_NAME}: error: {exc.message}")
        return EXIT_USAGE
    configure_logging(args.log_level)
    if args.jobs < 1:
        _emit(f"{TOOL_NAME}: error: --jobs must be >= 1")
        return EXIT_USAGE
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
