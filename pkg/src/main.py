# src/main.py

import argparse
import logging
import os
import sys

from .backends import close_backend, make_detector, make_segmenter
from .config import ConfigLoader, RunConfig
from .dataset import (
    SCENE_TAGS, generate_dataset, load_ground_truth, load_predictions, write_ground_truth, write_pgm,
    write_predictions, write_scene_tags,
)
from .errors import ConfigError, DatasetError, PromptSegError
from .metrics import ThresholdGrid, evaluate
from .pipeline import apply_confidence_filter, run_pipeline, summarize_timing
from .report import (
    RunRecord, build_run, compare, emit, emit_comparison, emit_curves, load_run, reaggregate, stored_radii,
)

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "PROMPTSEG_LOG_LEVEL"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# --- Flag registry ---
# Every flag the CLI reads is declared here; the parser is built from this table.

_CONFIG_FLAGS = [
    (("--config",), {"help": "Run configuration file (TOML, or YAML by suffix)"}),
    (("--set",), {"action": "append", "default": [], "metavar": "KEY=VALUE",
                  "help": "Override a config key, e.g. --set pipeline.confidence_threshold=0.4 (repeatable)"}),
]

_DATA_FLAGS = [
    (("--gt",), {"help": "COCO-layout ground-truth file (data.gt)"}),
    (("--scene-tags",), {"help": "Scene-tag JSON mapping image_id to inshore/offshore (data.scene_tags)"}),
]

_RUN_FLAGS = [
    (("--out",), {"help": "Output directory (output_dir)"}),
    (("--run-id",), {"help": "Run identifier recorded in the report (run_id)"}),
    (("--jobs",), {"type": int, "help": "Worker threads; results do not depend on it (pipeline.jobs)"}),
    (("--include-unmatched",), {"action": "store_true", "default": None,
                                "help": "Count unmatched GT as IoU 0 in mask statistics (report.include_unmatched)"}),
]

FLAGS: dict[str, list[tuple[tuple[str, ...], dict]]] = {
    "synth": [
        (("--out",), {"required": True, "help": "Directory for gt.json, scene_tags.json and images"}),
        (("--seed",), {"type": int, "required": True, "help": "Master seed for every random choice"}),
        (("--images",), {"type": int, "default": 1, "help": "Number of images (default 1)"}),
        (("--ships",), {"type": int, "default": 2, "help": "Ships per image, or the minimum with --ships-max"}),
        (("--ships-max",), {"type": int, "help": "Maximum ships per image (count drawn uniformly)"}),
        (("--size",), {"type": int, "default": 64, "help": "Image width in px (default 64)"}),
        (("--height",), {"type": int, "help": "Image height in px (default: --size)"}),
        (("--ship-width",), {"default": "8", "metavar": "MIN[:MAX]", "help": "Ship width range in px (default 8)"}),
        (("--ship-height",), {"default": "4", "metavar": "MIN[:MAX]", "help": "Ship height range in px (default 4)"}),
        (("--min-sep",), {"type": int, "default": 4, "help": "Minimum background gap between ships in px (default 4)"}),
        (("--scene",), {"default": "offshore", "choices": [t for t in SCENE_TAGS if t != "unknown"] + ["mixed"],
                        "help": "Scene tag for every image, or 'mixed'"}),
        (("--pgm",), {"action": "store_true", "help": "Also write 8-bit PGM images"}),
    ],
    "run": _CONFIG_FLAGS + _DATA_FLAGS + _RUN_FLAGS + [
        (("--seed",), {"type": int, "help": "Seed for the synthetic-oracle backends (seed)"}),
        (("--image-root",), {"help": "Directory holding the image files (data.image_root)"}),
    ],
    "eval": _CONFIG_FLAGS + _DATA_FLAGS + _RUN_FLAGS + [
        (("--predictions",), {"help": "COCO-results predictions file (data.predictions)"}),
    ],
    "sweep": [
        (("--run",), {"required": True, "help": "Run directory holding run.json"}),
        (("--out",), {"help": "Directory for curve CSVs (default: <run>/curves)"}),
        (("--step",), {"type": float, "help": "Threshold grid step on [0, 1] (default: the run's curve_step)"}),
        (("--radii",), {"metavar": "R0,R1,...", "help": "Dilation radii, ascending from 0 (default: the run's radii)"}),
    ],
    "report": [
        (("--run",), {"required": True, "help": "Run directory holding run.json"}),
        (("--out",), {"required": True, "help": "Directory for the re-aggregated report"}),
        (("--include-unmatched",), {"action": "store_true", "default": None,
                                    "help": "Count unmatched GT as IoU 0 in mask statistics"}),
        (("--include-synthesized",), {"action": "store_true", "default": None,
                                      "help": "Keep instances whose mask was synthesized from the box"}),
        (("--relaxed-radius",), {"type": int, "help": "Radius of the relaxed_iou column"}),
    ],
    "compare": [
        (("--run-a",), {"required": True, "help": "Run directory of the method under test"}),
        (("--run-b",), {"required": True, "help": "Run directory of the reference method"}),
        (("--out",), {"required": True, "help": "Directory for comparison.csv and comparison.json"}),
    ],
}

HELP = {
    "synth": "Generate a synthetic ship dataset with exact ground truth",
    "run": "Run detector and segmenter backends over a dataset, then evaluate and report",
    "eval": "Evaluate stored predictions against ground truth",
    "sweep": "Write threshold-curve and relaxed-IoU CSVs for a run",
    "report": "Re-aggregate a stored run with different report flags",
    "compare": "Compare two runs evaluated on the same ground truth",
}

# Flag destinations that map onto config keys (flag > --set > file > default).
FLAG_TO_CONFIG = {
    "gt": "data.gt",
    "scene_tags": "data.scene_tags",
    "predictions": "data.predictions",
    "image_root": "data.image_root",
    "out": "output_dir",
    "run_id": "run_id",
    "jobs": "pipeline.jobs",
    "seed": "seed",
    "include_unmatched": "report.include_unmatched",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m src.main",
        description="Detect-and-prompt instance segmentation harness and metrics toolkit.",
        epilog=f"Log verbosity: set {LOG_LEVEL_ENV} (DEBUG, INFO, WARNING, ERROR).",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, flags in FLAGS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        for names, kwargs in flags:
            p.add_argument(*names, **kwargs)
    return parser


def setup_logging() -> None:
    level_name = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    level = getattr(logging, level_name, None)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    if not isinstance(level, int):
        logger.warning(f"Unknown {LOG_LEVEL_ENV}={level_name!r} - using INFO")


# --- Helpers ---

def _range(value: str, flag: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in value.split(":")]
    except ValueError:
        raise ConfigError(f"{flag} expects MIN[:MAX] integers, got {value!r}")
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ConfigError(f"{flag} expects MIN[:MAX], got {value!r}")


def _radii(value: str) -> list[int]:
    try:
        radii = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--radii expects comma-separated integers, got {value!r}")
    if not radii or radii[0] != 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ConfigError(f"--radii must be strictly ascending from 0, got {radii}")
    return radii


def load_config(args: argparse.Namespace) -> RunConfig:
    loader = ConfigLoader()
    loader.load(args.config)
    loader.apply_overrides(args.set)
    for dest, key in FLAG_TO_CONFIG.items():
        value = getattr(args, dest, None)
        if value is not None:
            loader.set(key, value)
    return loader.build()


def _map_grid(config: RunConfig) -> ThresholdGrid:
    rc = config.report
    return ThresholdGrid.arange(rc.map_start, rc.map_stop, rc.map_step)


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required (flag or config)")
    return value


def _load_gt(config: RunConfig):
    return load_ground_truth(_require(config.data.gt, "ground truth (--gt / data.gt)"), config.data.scene_tags)


def _finish(config: RunConfig, gt, predictions, timing=None, skipped=(), meta=None) -> RunRecord:
    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    write_predictions(predictions, os.path.join(out_dir, "predictions.json"))
    evaluation = evaluate(gt, predictions, config.pipeline.match_threshold, config.pipeline.relaxed_radii,
                          _map_grid(config), config.pipeline.jobs)
    run = build_run(evaluation, gt, config, timing, skipped)
    emit(run, out_dir, meta={"jobs": config.pipeline.jobs, **(meta or {})})
    overall = run.overall
    if overall.iou_mean is not None:
        logger.info(f"Overall: N={overall.n} IoU={overall.iou_mean:.3f} Dice={overall.dice:.3f} "
                    f"detection rate={overall.detection_rate:.3f}")
    if run.map is not None:
        logger.info(f"Box mAP={run.map.map:.3f}")
    return run


# --- Subcommands ---

def cmd_synth(args: argparse.Namespace) -> int:
    ships_max = args.ships_max if args.ships_max is not None else args.ships
    gt, pixels = generate_dataset(
        n_images=args.images,
        width=args.size,
        height=args.height if args.height is not None else args.size,
        ships=(args.ships, ships_max),
        ship_width=_range(args.ship_width, "--ship-width"),
        ship_height=_range(args.ship_height, "--ship-height"),
        min_separation=args.min_sep,
        scene=args.scene,
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    write_ground_truth(gt, os.path.join(args.out, "gt.json"))
    write_scene_tags(gt, os.path.join(args.out, "scene_tags.json"))
    if args.pgm:
        for image_id, image in pixels.items():
            write_pgm(image, os.path.join(args.out, "images", gt.images[image_id].file_name))
    logger.info(f"Synthetic dataset written to {args.out}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args)
    gt = _load_gt(config)
    detector_desc = _require(config.detector, "[detector] backend")
    segmenter_desc = _require(config.segmenter, "[segmenter] backend")
    detector = make_detector(detector_desc, config, gt)
    try:
        segmenter = make_segmenter(segmenter_desc, config, gt)
        try:
            result = run_pipeline(gt, detector, segmenter, config.pipeline, image_root=config.data.image_root)
        finally:
            close_backend(segmenter)
    finally:
        close_backend(detector)

    timing = summarize_timing(result.timings) if result.timings else None
    meta = {
        "failed_images": [{"image_id": i, "error": e} for i, e in result.failed_images],
        "segmentation_failures": result.segmentation_failures,
        "timings": [t.to_dict() for t in result.timings],
    }
    _finish(config, gt, result.predictions, timing, result.failed_images, meta)
    if result.partial:
        logger.error(f"Run finished with {len(result.failed_images)} skipped image(s): "
                     f"{[i for i, _ in result.failed_images]}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args)
    gt = _load_gt(config)
    path = _require(config.data.predictions, "predictions (--predictions / data.predictions)")
    predictions = load_predictions(path, gt.images)
    threshold = config.pipeline.confidence_threshold
    predictions = {k: apply_confidence_filter(v, threshold) for k, v in predictions.items()}
    _finish(config, gt, predictions)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.step is not None and not 0.0 < args.step <= 1.0:
        raise ConfigError(f"--step must be in (0, 1], got {args.step}")
    radii = _radii(args.radii) if args.radii else None
    run = load_run(args.run)
    out_dir = args.out or os.path.join(args.run, "curves")
    if radii is not None and not set(radii) <= stored_radii(run):
        run = _reevaluate(args.run, run, radii)
    emit_curves(run, out_dir, args.step, radii)
    logger.info(f"Curves written to {out_dir}")
    return EXIT_OK


def _reevaluate(run_dir: str, run: RunRecord, radii: list[int]) -> RunRecord:
    """Recompute per-instance results from the run's GT and predictions at new radii."""
    data = run.config.get("data", {})
    predictions_path = os.path.join(run_dir, "predictions.json")
    if not data.get("gt") or not os.path.exists(predictions_path):
        raise DatasetError("radii not stored in the run and its masks cannot be re-derived "
                           "(needs data.gt and predictions.json)", run_dir)
    gt = load_ground_truth(data["gt"], data.get("scene_tags"))
    if gt.digest() != run.gt_digest:
        raise DatasetError("ground truth changed since the run was recorded", data["gt"])
    pipeline_cfg = run.config.get("pipeline", {})
    predictions = load_predictions(predictions_path, gt.images)
    threshold = pipeline_cfg.get("confidence_threshold", 0.5)
    predictions = {k: apply_confidence_filter(v, threshold) for k, v in predictions.items()}
    evaluation = evaluate(gt, predictions, pipeline_cfg.get("match_threshold", 0.5), radii)
    logger.info(f"Re-derived relaxed IoU at radii {radii} from {predictions_path}")
    return RunRecord(run.run_id, run.config, run.gt_digest, evaluation.results, run.scenes, run.map)


def cmd_report(args: argparse.Namespace) -> int:
    run = load_run(args.run)
    exclude_synthesized = False if args.include_synthesized else None
    run = reaggregate(run, args.include_unmatched, exclude_synthesized, args.relaxed_radius)
    emit(run, args.out, meta={"source_run": os.path.abspath(args.run)})
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    comparison = compare(load_run(args.run_a), load_run(args.run_b))
    emit_comparison(comparison, args.out)
    for row in comparison.rows:
        if row["delta_iou"] is not None:
            logger.info(f"{row['scene']}: IoU {row['iou_a']:.3f} vs {row['iou_b']:.3f} "
                        f"(delta {row['delta_iou']:+.3f})")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "run": cmd_run,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return COMMANDS[args.command](args)
    except PromptSegError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"File not found: {e.filename}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
