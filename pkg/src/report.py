# src/report.py

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence

from .config import RunConfig
from .dataset import GroundTruth
from .errors import DatasetError, IncompatibleRunsError, UndefinedMetricError
from .metrics import (
    Evaluation, InstanceResult, MapResult, ThresholdGrid, detection_rate, fraction_at, matchsets_from_results,
    relaxed_sweep_stored, threshold_curve,
)
from .pipeline import TimingSummary
from .scoring import describe, exact_mean

logger = logging.getLogger(__name__)

# Try to import git, but don't fail if not available
try:
    import git
    GIT_AVAILABLE = True
except ImportError:
    GIT_AVAILABLE = False
    logging.warning("GitPython not available - git provenance disabled")

OVERALL = "overall"

CSV_COLUMNS = (
    "scene", "N", "iou_mean", "iou_std", "iou_median", "dice", "precision", "recall",
    "iou_at_50", "iou_at_75", "relaxed_iou", "detection_rate",
)

COMPARISON_COLUMNS = (
    "scene", "method_a", "supervision_a", "iou_a", "dice_a",
    "method_b", "supervision_b", "iou_b", "dice_b",
    "delta_iou", "delta_dice", "ratio_iou", "ratio_dice",
)


# --- Types ---

@dataclass(frozen=True)
class SceneReport:
    """One report row. Mask fields are None when no instance contributes a mask."""
    scene: str
    n: int
    contributing: int
    iou_mean: float | None
    iou_std: float | None
    iou_median: float | None
    dice: float | None
    precision: float | None
    recall: float | None
    iou_at_50: float | None
    iou_at_75: float | None
    relaxed_iou: float | None
    detection_rate: float

    def row(self) -> list[str]:
        values = [self.iou_mean, self.iou_std, self.iou_median, self.dice, self.precision, self.recall,
                  self.iou_at_50, self.iou_at_75, self.relaxed_iou, self.detection_rate]
        return [self.scene, str(self.n)] + [_fmt(v) for v in values]

    def to_dict(self) -> dict:
        return {
            "scene": self.scene, "n": self.n, "contributing": self.contributing,
            "iou_mean": self.iou_mean, "iou_std": self.iou_std, "iou_median": self.iou_median,
            "dice": self.dice, "precision": self.precision, "recall": self.recall,
            "iou_at_50": self.iou_at_50, "iou_at_75": self.iou_at_75,
            "relaxed_iou": self.relaxed_iou, "detection_rate": self.detection_rate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    config: dict
    gt_digest: str
    results: tuple[InstanceResult, ...]
    scenes: tuple[SceneReport, ...]
    map: MapResult | None = None
    skipped_images: tuple[tuple[int, str], ...] = ()
    timing: TimingSummary | None = None
    created_at: str = ""

    def scene(self, name: str) -> SceneReport | None:
        return next((s for s in self.scenes if s.scene == name), None)

    @property
    def overall(self) -> SceneReport:
        return self.scene(OVERALL)

    def to_dict(self) -> dict:
        """Deterministic part of the run; timing and creation time live in run_meta.json."""
        return {
            "run_id": self.run_id,
            "config": self.config,
            "gt_digest": self.gt_digest,
            "map": _map_to_dict(self.map),
            "scenes": [s.to_dict() for s in self.scenes],
            "instances": [r.to_dict() for r in self.results],
            "skipped_images": [{"image_id": i, "error": e} for i, e in self.skipped_images],
        }


@dataclass(frozen=True)
class Comparison:
    run_a: str
    run_b: str
    rows: tuple[dict, ...] = field(default_factory=tuple)

    def row(self, scene: str) -> dict | None:
        return next((r for r in self.rows if r["scene"] == scene), None)

    def to_dict(self) -> dict:
        return {"run_a": self.run_a, "run_b": self.run_b, "rows": list(self.rows)}


# --- Aggregation ---

def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.3f}"


def _excluded(r: InstanceResult, exclude_synthesized: bool) -> bool:
    return r.segmentation_failed or (exclude_synthesized and r.synthesized)


def curve_population(results: Iterable[InstanceResult], exclude_synthesized: bool = True) -> list[InstanceResult]:
    """Instances that enter threshold curves: unmatched count as IoU 0, failed segmentations are left out."""
    return [r for r in results if not _excluded(r, exclude_synthesized)]


def mask_population(results: Iterable[InstanceResult], include_unmatched: bool = False,
                    exclude_synthesized: bool = True) -> list[InstanceResult]:
    return [r for r in curve_population(results, exclude_synthesized) if r.has_mask or include_unmatched]


def stratum_results(results: Iterable[InstanceResult], stratum: str) -> list[InstanceResult]:
    return [r for r in results if stratum == OVERALL or r.scene == stratum]


def aggregate(results: Sequence[InstanceResult], stratum: str = OVERALL, include_unmatched: bool = False,
              exclude_synthesized: bool = True, relaxed_radius: int = 1, match_threshold: float = 0.5) -> SceneReport:
    """Report row for one scene stratum (or ``overall``).

    N counts every GT instance in the stratum. IoU mean/std/median, Dice,
    precision, recall and relaxed IoU run over matched instances with a mask
    (plus unmatched as zeros with ``include_unmatched``); IoU@t fractions run
    over all non-failed instances with unmatched as zeros. Population std.
    """
    items = stratum_results(results, stratum)
    if not items:
        raise UndefinedMetricError(f"stratum '{stratum}' has no instances")
    rate = detection_rate(matchsets_from_results(items, match_threshold).values())

    curve_ious = [r.mask_iou for r in curve_population(items, exclude_synthesized)]
    masks = mask_population(items, include_unmatched, exclude_synthesized)

    at_50 = fraction_at(curve_ious, 0.5) if curve_ious else None
    at_75 = fraction_at(curve_ious, 0.75) if curve_ious else None

    if not masks:
        logger.warning(f"Stratum '{stratum}': no instance contributes a mask - mask statistics left empty")
        return SceneReport(stratum, len(items), 0, None, None, None, None, None, None,
                           at_50, at_75, None, rate)

    summary = describe([r.iou_fraction for r in masks])
    relaxed = [r.relaxed_fraction(relaxed_radius) for r in masks]
    if any(v is None for v in relaxed):
        logger.warning(f"Stratum '{stratum}': radius {relaxed_radius} was not evaluated - relaxed IoU left empty")
        relaxed_mean = None
    else:
        relaxed_mean = float(exact_mean(relaxed))

    return SceneReport(
        scene=stratum,
        n=len(items),
        contributing=len(masks),
        iou_mean=float(summary.mean),
        iou_std=summary.std,
        iou_median=float(summary.median),
        dice=float(exact_mean([r.dice_fraction for r in masks])),
        precision=float(exact_mean([r.precision_fraction for r in masks])),
        recall=float(exact_mean([r.recall_fraction for r in masks])),
        iou_at_50=at_50,
        iou_at_75=at_75,
        relaxed_iou=relaxed_mean,
        detection_rate=rate,
    )


def strata(results: Iterable[InstanceResult]) -> list[str]:
    """Scene strata present in the results, sorted, then ``overall``."""
    return sorted({r.scene for r in results}) + [OVERALL]


def aggregate_all(results: Sequence[InstanceResult], include_unmatched: bool = False,
                  exclude_synthesized: bool = True, relaxed_radius: int = 1, match_threshold: float = 0.5,
                  ) -> tuple[SceneReport, ...]:
    if not results:
        raise UndefinedMetricError("no ground-truth instances to aggregate")
    return tuple(aggregate(results, s, include_unmatched, exclude_synthesized, relaxed_radius, match_threshold)
                 for s in strata(results))


def build_run(evaluation: Evaluation, gt: GroundTruth, config: RunConfig, timing: TimingSummary | None = None,
              skipped_images: Sequence[tuple[int, str]] = (), created_at: str | None = None) -> RunRecord:
    rc = config.report
    scenes = aggregate_all(evaluation.results, rc.include_unmatched, rc.exclude_synthesized, rc.relaxed_column_radius,
                           config.pipeline.match_threshold)
    return RunRecord(
        run_id=config.run_id,
        config=config.snapshot(),
        gt_digest=gt.digest(),
        results=evaluation.results,
        scenes=scenes,
        map=evaluation.map,
        skipped_images=tuple(skipped_images),
        timing=timing,
        created_at=created_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def reaggregate(run: RunRecord, include_unmatched: bool | None = None, exclude_synthesized: bool | None = None,
                relaxed_radius: int | None = None) -> RunRecord:
    """Recompute scene rows of a stored run under different aggregation flags."""
    report_cfg = dict(run.config.get("report", {}))
    if include_unmatched is not None:
        report_cfg["include_unmatched"] = include_unmatched
    if exclude_synthesized is not None:
        report_cfg["exclude_synthesized"] = exclude_synthesized
    if relaxed_radius is not None:
        report_cfg["relaxed_column_radius"] = relaxed_radius
    scenes = aggregate_all(
        run.results,
        report_cfg.get("include_unmatched", False),
        report_cfg.get("exclude_synthesized", True),
        report_cfg.get("relaxed_column_radius", 1),
        run.config.get("pipeline", {}).get("match_threshold", 0.5),
    )
    config = dict(run.config)
    config["report"] = report_cfg
    return RunRecord(run.run_id, config, run.gt_digest, run.results, scenes, run.map,
                     run.skipped_images, run.timing, run.created_at)


# --- Curves ---

def threshold_curves(run: RunRecord, step: float | None = None) -> dict[str, list[tuple[float, float]]]:
    report_cfg = run.config.get("report", {})
    grid = ThresholdGrid.arange(0.0, 1.0, step or report_cfg.get("curve_step", 0.05))
    exclude = report_cfg.get("exclude_synthesized", True)
    out = {}
    for stratum in strata(run.results):
        ious = [r.mask_iou for r in curve_population(stratum_results(run.results, stratum), exclude)]
        if not ious:
            logger.warning(f"Stratum '{stratum}': no instances for the threshold curve")
            continue
        out[stratum] = threshold_curve(ious, grid)
    return out


def relaxed_curves(run: RunRecord, radii: Sequence[int] | None = None) -> dict[str, list[tuple[int, float]]]:
    """Mean relaxed IoU per radius over matched mask pairs, from the stored pixel counts."""
    radii = list(radii if radii is not None else run.config.get("pipeline", {}).get("relaxed_radii", [0, 1, 2, 3]))
    exclude = run.config.get("report", {}).get("exclude_synthesized", True)
    out = {}
    for stratum in strata(run.results):
        pairs = mask_population(stratum_results(run.results, stratum), False, exclude)
        if not pairs:
            logger.warning(f"Stratum '{stratum}': no matched masks for the relaxed sweep")
            continue
        out[stratum] = relaxed_sweep_stored(pairs, radii)
    return out


def stored_radii(run: RunRecord) -> set[int]:
    radii = None
    for r in run.results:
        if r.has_mask:
            present = {rc[0] for rc in r.relaxed_counts}
            radii = present if radii is None else radii & present
    return radii or set()


# --- Comparison ---

def _delta(a: float | None, b: float | None) -> float | None:
    return None if a is None or b is None else a - b


def _ratio(a: float | None, b: float | None) -> float | None:
    return None if a is None or not b else a / b


def compare(run_a: RunRecord, run_b: RunRecord) -> Comparison:
    """Per-scene IoU/Dice of two runs on the same ground truth, with deltas (a - b) and ratios (a / b)."""
    if run_a.gt_digest != run_b.gt_digest:
        raise IncompatibleRunsError(
            f"runs '{run_a.run_id}' and '{run_b.run_id}' were evaluated on different ground truth "
            f"({run_a.gt_digest} != {run_b.gt_digest})"
        )
    label_a = run_a.config.get("report", {})
    label_b = run_b.config.get("report", {})
    names = [s.scene for s in run_a.scenes if run_b.scene(s.scene) is not None]
    rows = []
    for name in names:
        a, b = run_a.scene(name), run_b.scene(name)
        rows.append({
            "scene": name,
            "method_a": label_a.get("label", run_a.run_id),
            "supervision_a": label_a.get("supervision", ""),
            "iou_a": a.iou_mean,
            "dice_a": a.dice,
            "method_b": label_b.get("label", run_b.run_id),
            "supervision_b": label_b.get("supervision", ""),
            "iou_b": b.iou_mean,
            "dice_b": b.dice,
            "delta_iou": _delta(a.iou_mean, b.iou_mean),
            "delta_dice": _delta(a.dice, b.dice),
            "ratio_iou": _ratio(a.iou_mean, b.iou_mean),
            "ratio_dice": _ratio(a.dice, b.dice),
        })
    return Comparison(run_a.run_id, run_b.run_id, tuple(rows))


# --- Emission ---

def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def get_git_info(path: str):
    """Extract git repository information"""
    if not GIT_AVAILABLE:
        return None
    try:
        repo = git.Repo(path, search_parent_directories=True)
        return {
            "repo": os.path.basename(repo.working_dir),
            "commit": repo.head.commit.hexsha,
            "dirty": repo.is_dirty(),
        }
    except Exception as e:
        logger.debug(f"Git detection failed: {e}")
        return None


def _map_to_dict(result: MapResult | None) -> dict | None:
    if result is None:
        return None
    return {
        "map": result.map,
        "ap50": result.ap_at(0.5),
        "ap75": result.ap_at(0.75),
        "per_threshold": {repr(t): ap for t, ap in result.ap_per_threshold.items()},
    }


def _map_from_dict(data: dict | None) -> MapResult | None:
    if data is None:
        return None
    return MapResult(float(data["map"]), {float(t): float(ap) for t, ap in data.get("per_threshold", {}).items()})


def emit(run: RunRecord, out_dir: str, formats: Sequence[str] = ("csv", "json", "curves"),
         meta: dict | None = None) -> list[str]:
    """Write report.csv, run.json, curves/*.csv and run_meta.json; returns the paths written.

    Everything except run_meta.json is byte-identical for identical runs.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "report.csv")
        _write_csv(path, CSV_COLUMNS, (s.row() for s in run.scenes))
        written.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "run.json")
        _write_json(path, run.to_dict())
        written.append(path)
    if "curves" in formats:
        written.extend(emit_curves(run, os.path.join(out_dir, "curves")))

    meta_path = os.path.join(out_dir, "run_meta.json")
    payload = {
        "run_id": run.run_id,
        "created_at": run.created_at,
        "timing": run.timing.to_dict() if run.timing else None,
        "git": get_git_info(os.path.dirname(os.path.abspath(__file__))),
    }
    payload.update(meta or {})
    _write_json(meta_path, payload)
    written.append(meta_path)
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def emit_curves(run: RunRecord, curve_dir: str, step: float | None = None,
                radii: Sequence[int] | None = None) -> list[str]:
    os.makedirs(curve_dir, exist_ok=True)
    written = []
    for stratum, curve in threshold_curves(run, step).items():
        path = os.path.join(curve_dir, f"threshold_{stratum}.csv")
        _write_csv(path, ("threshold", "fraction"), ((f"{t:.3f}", f"{v:.3f}") for t, v in curve))
        written.append(path)
    for stratum, curve in relaxed_curves(run, radii).items():
        path = os.path.join(curve_dir, f"relaxed_{stratum}.csv")
        _write_csv(path, ("radius", "relaxed_iou"), ((str(r), f"{v:.3f}") for r, v in curve))
        written.append(path)
    return written


def emit_comparison(comparison: Comparison, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "comparison.csv")
    rows = []
    for row in comparison.rows:
        rows.append([row[c] if isinstance(row[c], str) else _fmt(row[c]) for c in COMPARISON_COLUMNS])
    _write_csv(csv_path, COMPARISON_COLUMNS, rows)
    json_path = os.path.join(out_dir, "comparison.json")
    _write_json(json_path, comparison.to_dict())
    logger.info(f"Wrote comparison of '{comparison.run_a}' vs '{comparison.run_b}' to {out_dir}")
    return [csv_path, json_path]


# --- Loading ---

def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError("file not found", path)
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}", path)


def load_run(run_dir: str) -> RunRecord:
    path = os.path.join(run_dir, "run.json")
    data = _read_json(path)
    try:
        record = RunRecord(
            run_id=data["run_id"],
            config=data["config"],
            gt_digest=data["gt_digest"],
            results=tuple(InstanceResult.from_dict(d) for d in data["instances"]),
            scenes=tuple(SceneReport.from_dict(s) for s in data["scenes"]),
            map=_map_from_dict(data.get("map")),
            skipped_images=tuple((int(s["image_id"]), s["error"]) for s in data.get("skipped_images", [])),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"not a run record: {e}", path)
    meta_path = os.path.join(run_dir, "run_meta.json")
    if os.path.exists(meta_path):
        meta = _read_json(meta_path)
        record = RunRecord(record.run_id, record.config, record.gt_digest, record.results, record.scenes,
                           record.map, record.skipped_images, None, meta.get("created_at", ""))
    logger.info(f"Loaded run '{record.run_id}' with {len(record.results)} instances from {run_dir}")
    return record
