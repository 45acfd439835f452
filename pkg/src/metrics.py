# src/metrics.py

import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .dataset import Detection, GroundTruth, GtInstance, ImageInfo, ImagePrediction
from .errors import ReferentialIntegrityError, UndefinedMetricError
from .raster import BBox, BinaryMask, ConfusionCounts, dilate, pixel_counts
from .scoring import exact_mean

logger = logging.getLogger(__name__)

# Recall sampling points of the COCO interpolated AP: 0.00, 0.01, ..., 1.00.
RECALL_POINTS = tuple(Fraction(k, 100) for k in range(101))

# Slack for float error in (stop - start) / step.
GRID_EPS = 1e-9


# --- Types ---

@dataclass(frozen=True)
class ThresholdGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("threshold grid must not be empty")
        for a, b in zip(self.values, self.values[1:]):
            if not b > a:
                raise ValueError(f"threshold grid must be strictly increasing: {a} then {b}")
        if self.values[0] < 0 or self.values[-1] > 1:
            raise ValueError(f"thresholds must lie in [0, 1], got {self.values[0]}..{self.values[-1]}")

    @classmethod
    def arange(cls, start: float, stop: float, step: float) -> "ThresholdGrid":
        """Grid from ``start`` up to and including ``stop``, never past it.

        Values are rounded so that e.g. 0.6 is the same float as the literal 0.6.
        A step that does not divide the range ends on the last point below ``stop``.
        """
        if step <= 0:
            raise ValueError(f"grid step must be positive, got {step}")
        if stop < start:
            raise ValueError(f"grid stop {stop} is below start {start}")
        n = math.floor((stop - start) / step + GRID_EPS)
        return cls(tuple(min(round(start + k * step, 10), stop) for k in range(n + 1)))

    @classmethod
    def coco(cls) -> "ThresholdGrid":
        return cls.arange(0.5, 0.95, 0.05)

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class MatchSet:
    """``pairs`` holds (gt instance_id, detection index, box IoU)."""
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_gt: tuple[int, ...]
    unmatched_detections: tuple[int, ...]
    iou_threshold: float

    @property
    def gt_count(self) -> int:
        return len(self.pairs) + len(self.unmatched_gt)

    def matched_gt(self) -> dict[int, tuple[int, float]]:
        return {gt_id: (det, iou) for gt_id, det, iou in self.pairs}


@dataclass(frozen=True)
class InstanceResult:
    """Evaluation record for one ground-truth instance.

    Mask metrics derive from integer ``counts``; ``counts`` is None when the
    instance is unmatched or its prompt failed to segment, and every mask
    metric then reads 0. ``relaxed_counts`` holds (radius, intersection, union).
    """
    instance_id: int
    image_id: int
    scene: str
    matched: bool
    box_iou: float = 0.0
    detection_index: int | None = None
    counts: ConfusionCounts | None = None
    relaxed_counts: tuple[tuple[int, int, int], ...] = ()
    segmentation_failed: bool = False
    synthesized: bool = False

    @property
    def has_mask(self) -> bool:
        return self.counts is not None

    @property
    def iou_fraction(self) -> Fraction:
        c = self.counts
        return Fraction(c.intersection, c.union) if c and c.union else Fraction(0)

    @property
    def dice_fraction(self) -> Fraction:
        c = self.counts
        denom = c.pred_area + c.gt_area if c else 0
        return Fraction(2 * c.intersection, denom) if denom else Fraction(0)

    @property
    def precision_fraction(self) -> Fraction:
        c = self.counts
        return Fraction(c.intersection, c.pred_area) if c and c.pred_area else Fraction(0)

    @property
    def recall_fraction(self) -> Fraction:
        c = self.counts
        return Fraction(c.intersection, c.gt_area) if c and c.gt_area else Fraction(0)

    def relaxed_fraction(self, radius: int) -> Fraction | None:
        """None when ``radius`` was not evaluated for this instance."""
        if self.counts is None:
            return Fraction(0)
        for r, inter, union in self.relaxed_counts:
            if r == radius:
                return Fraction(inter, union) if union else Fraction(0)
        return None

    @property
    def mask_iou(self) -> float:
        return float(self.iou_fraction)

    @property
    def dice(self) -> float:
        return float(self.dice_fraction)

    @property
    def pixel_precision(self) -> float:
        return float(self.precision_fraction)

    @property
    def pixel_recall(self) -> float:
        return float(self.recall_fraction)

    @property
    def relaxed_iou(self) -> dict[int, float]:
        return {r: float(self.relaxed_fraction(r)) for r, _, _ in self.relaxed_counts}

    def to_dict(self) -> dict:
        c = self.counts
        return {
            "instance_id": self.instance_id,
            "image_id": self.image_id,
            "scene": self.scene,
            "matched": self.matched,
            "detection_index": self.detection_index,
            "box_iou": self.box_iou,
            "segmentation_failed": self.segmentation_failed,
            "synthesized": self.synthesized,
            "counts": None if c is None else {
                "intersection": c.intersection, "pred_area": c.pred_area,
                "gt_area": c.gt_area, "union": c.union,
            },
            "relaxed_counts": [list(rc) for rc in self.relaxed_counts],
            "mask_iou": self.mask_iou,
            "dice": self.dice,
            "pixel_precision": self.pixel_precision,
            "pixel_recall": self.pixel_recall,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InstanceResult":
        c = data.get("counts")
        return cls(
            instance_id=int(data["instance_id"]),
            image_id=int(data["image_id"]),
            scene=data.get("scene", "unknown"),
            matched=bool(data["matched"]),
            box_iou=float(data.get("box_iou", 0.0)),
            detection_index=data.get("detection_index"),
            counts=None if c is None else ConfusionCounts(
                int(c["intersection"]), int(c["pred_area"]), int(c["gt_area"]), int(c["union"])),
            relaxed_counts=tuple(tuple(int(v) for v in rc) for rc in data.get("relaxed_counts", [])),
            segmentation_failed=bool(data.get("segmentation_failed", False)),
            synthesized=bool(data.get("synthesized", False)),
        )


@dataclass(frozen=True)
class MapResult:
    map: float
    ap_per_threshold: dict[float, float] = field(default_factory=dict)

    def ap_at(self, threshold: float) -> float | None:
        return self.ap_per_threshold.get(threshold)


@dataclass(frozen=True)
class Evaluation:
    results: tuple[InstanceResult, ...]
    matchsets: dict[int, MatchSet]
    map: MapResult | None


# --- Pixel metrics ---

def mask_iou(pred: BinaryMask, gt: BinaryMask) -> float:
    c = pixel_counts(pred, gt)
    if c.union == 0:
        raise UndefinedMetricError("IoU is undefined for two empty masks")
    return c.intersection / c.union


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    c = pixel_counts(pred, gt)
    if c.pred_area + c.gt_area == 0:
        raise UndefinedMetricError("Dice is undefined for two empty masks")
    return 2 * c.intersection / (c.pred_area + c.gt_area)


def pixel_precision_recall(pred: BinaryMask, gt: BinaryMask) -> tuple[float, float]:
    c = pixel_counts(pred, gt)
    if c.pred_area == 0:
        raise UndefinedMetricError("pixel precision is undefined for an empty prediction")
    if c.gt_area == 0:
        raise UndefinedMetricError("pixel recall is undefined for an empty ground truth")
    return c.intersection / c.pred_area, c.intersection / c.gt_area


def relaxed_iou(pred: BinaryMask, gt: BinaryMask, radius: int) -> float:
    """IoU after dilating both masks by ``radius`` (square element)."""
    return mask_iou(dilate(pred, radius), dilate(gt, radius))


# --- Boxes and matching ---

def box_iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_instances(detections: Sequence[Detection], gts: Sequence[GtInstance], iou_threshold: float,
                    indices: Sequence[int] | None = None) -> MatchSet:
    """Greedy score-ordered matching for one image.

    Detections are visited by descending score (ties: lower index); each claims
    the unmatched GT with the highest box IoU >= threshold (ties: lower
    instance_id). ``indices`` relabels detections, defaulting to their positions.
    """
    if indices is None:
        indices = list(range(len(detections)))
    image_ids = {d.image_id for d in detections} | {g.image_id for g in gts}
    if len(image_ids) > 1:
        raise ValueError(f"match_instances expects a single image, got {sorted(image_ids)}")

    ordered_gts = sorted(gts, key=lambda g: g.instance_id)
    order = sorted(range(len(detections)), key=lambda k: (-detections[k].score, indices[k]))
    taken: set[int] = set()
    pairs = []
    unmatched_dets = []
    for k in order:
        best, best_iou = None, -1.0
        for pos, g in enumerate(ordered_gts):
            if pos in taken:
                continue
            iou = box_iou(detections[k].bbox, g.bbox)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = pos, iou
        if best is None:
            unmatched_dets.append(indices[k])
        else:
            taken.add(best)
            pairs.append((ordered_gts[best].instance_id, indices[k], best_iou))

    pairs.sort(key=lambda p: p[0])
    unmatched_gt = tuple(g.instance_id for pos, g in enumerate(ordered_gts) if pos not in taken)
    return MatchSet(tuple(pairs), unmatched_gt, tuple(sorted(unmatched_dets)), iou_threshold)


def detection_rate(matchsets: Iterable[MatchSet]) -> float:
    matched = total = 0
    for ms in matchsets:
        matched += len(ms.pairs)
        total += ms.gt_count
    if total == 0:
        raise UndefinedMetricError("detection rate is undefined without ground-truth instances")
    return matched / total


def matchsets_from_results(results: Iterable[InstanceResult], iou_threshold: float) -> dict[int, MatchSet]:
    """Rebuild per-image GT-side match sets from stored instance results."""
    by_image: dict[int, list[InstanceResult]] = defaultdict(list)
    for r in results:
        by_image[r.image_id].append(r)
    out = {}
    for image_id, items in sorted(by_image.items()):
        pairs = tuple(sorted((r.instance_id, r.detection_index, r.box_iou) for r in items if r.matched))
        unmatched = tuple(sorted(r.instance_id for r in items if not r.matched))
        out[image_id] = MatchSet(pairs, unmatched, (), iou_threshold)
    return out


# --- COCO box mAP ---

def _interpolated_ap(tp_flags: Sequence[bool], n_gt: int) -> Fraction:
    """101-point interpolated AP over a score-ranked TP/FP sequence, in exact arithmetic."""
    precision, recall = [], []
    tp = 0
    for n, flag in enumerate(tp_flags, start=1):
        tp += flag
        precision.append(Fraction(tp, n))
        recall.append(Fraction(tp, n_gt))
    # monotone non-increasing envelope
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = Fraction(0)
    j = 0
    for r in RECALL_POINTS:
        while j < len(recall) and recall[j] < r:
            j += 1
        if j == len(recall):
            break
        total += precision[j]
    return total / len(RECALL_POINTS)


def coco_map(detections: Iterable[Detection], gts: Iterable[GtInstance],
             thresholds: ThresholdGrid | None = None, max_detections: int | None = 100) -> MapResult:
    """Single-category box mAP under the COCO protocol.

    Detections are ranked globally by descending score (ties: image_id, then
    position within the image) and greedily assigned per image to unmatched GT
    at box IoU >= t. Images keep at most ``max_detections`` top-scored boxes.
    """
    thresholds = thresholds or ThresholdGrid.coco()
    gt_by_image: dict[int, list[GtInstance]] = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g)
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        raise UndefinedMetricError("mAP is undefined without ground-truth instances")
    for items in gt_by_image.values():
        items.sort(key=lambda g: g.instance_id)

    per_image: dict[int, list[tuple[int, Detection]]] = defaultdict(list)
    for det in detections:
        per_image[det.image_id].append((len(per_image[det.image_id]), det))
    ranked = []
    for image_id, items in per_image.items():
        items = sorted(items, key=lambda t: (-t[1].score, t[0]))
        if max_detections is not None:
            items = items[:max_detections]
        ranked.extend((image_id, idx, det) for idx, det in items)
    ranked.sort(key=lambda t: (-t[2].score, t[0], t[1]))

    ious = [[box_iou(det.bbox, g.bbox) for g in gt_by_image.get(image_id, [])] for image_id, _, det in ranked]

    aps: dict[float, Fraction] = {}
    for t in thresholds:
        taken: dict[int, set[int]] = defaultdict(set)
        flags = []
        for (image_id, _, _), row in zip(ranked, ious):
            best, best_iou = None, -1.0
            for pos, iou in enumerate(row):
                if pos not in taken[image_id] and iou >= t and iou > best_iou:
                    best, best_iou = pos, iou
            if best is not None:
                taken[image_id].add(best)
            flags.append(best is not None)
        aps[t] = _interpolated_ap(flags, n_gt)

    mean = sum(aps.values(), Fraction(0)) / len(aps)
    return MapResult(float(mean), {t: float(ap) for t, ap in aps.items()})


# --- Curves ---

def fraction_at(ious: Sequence[float], threshold: float) -> float:
    """Fraction of instances with IoU >= threshold (comparison on correctly rounded floats)."""
    if not ious:
        raise UndefinedMetricError("threshold fraction is undefined for an empty instance list")
    hits = sum(1 for v in ious if float(v) >= threshold)
    return hits / len(ious)


def threshold_curve(ious: Sequence[float], grid: ThresholdGrid) -> list[tuple[float, float]]:
    if not ious:
        raise UndefinedMetricError("threshold curve is undefined for an empty instance list")
    return [(t, fraction_at(ious, t)) for t in grid]


def _check_radii(radii: Sequence[int]) -> None:
    if not radii or radii[0] != 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError(f"radii must be strictly ascending and start at 0, got {list(radii)}")


def _mean_per_radius(rows: Sequence[dict[int, Fraction]], radii: Sequence[int]) -> list[tuple[int, float]]:
    return [(int(r), float(exact_mean([row[r] for row in rows]))) for r in radii]


def relaxed_sweep(pairs: Sequence[tuple[BinaryMask, BinaryMask]], radii: Sequence[int]) -> list[tuple[int, float]]:
    """Mean relaxed IoU over (pred, gt) mask pairs at each radius."""
    if not pairs:
        raise UndefinedMetricError("relaxed sweep is undefined without mask pairs")
    _check_radii(radii)
    rows = []
    for pred, gt in pairs:
        row = {}
        for r in radii:
            c = pixel_counts(dilate(pred, r), dilate(gt, r))
            if c.union == 0:
                raise UndefinedMetricError("IoU is undefined for two empty masks")
            row[r] = Fraction(c.intersection, c.union)
        rows.append(row)
    return _mean_per_radius(rows, radii)


def relaxed_sweep_stored(results: Sequence[InstanceResult], radii: Sequence[int]) -> list[tuple[int, float]]:
    """:func:`relaxed_sweep` over the relaxed counts stored in instance results."""
    if not results:
        raise UndefinedMetricError("relaxed sweep is undefined without mask pairs")
    _check_radii(radii)
    rows = []
    for res in results:
        row = {}
        for r in radii:
            value = res.relaxed_fraction(r)
            if value is None:
                raise UndefinedMetricError(f"radius {r} is not stored for instance {res.instance_id}; "
                                           "re-evaluate with it")
            row[r] = value
        rows.append(row)
    return _mean_per_radius(rows, radii)


# --- Per-image evaluation ---

def evaluate_image(gts: Sequence[GtInstance], info: ImageInfo, prediction: ImagePrediction,
                   match_threshold: float, radii: Sequence[int], scene: str = "unknown",
                   ) -> tuple[list[InstanceResult], MatchSet]:
    prompts = prediction.prompts()
    ms = match_instances([d for _, d in prompts], gts, match_threshold, indices=[i for i, _ in prompts])
    matched = ms.matched_gt()
    by_index = {p.index: p for p in prediction.instances}

    results = []
    for g in sorted(gts, key=lambda x: x.instance_id):
        hit = matched.get(g.instance_id)
        if hit is None:
            results.append(InstanceResult(g.instance_id, g.image_id, scene, matched=False))
            continue
        det_index, iou = hit
        inst = by_index.get(det_index)
        if inst is None:
            results.append(InstanceResult(g.instance_id, g.image_id, scene, matched=True, box_iou=iou,
                                          detection_index=det_index, segmentation_failed=True))
            continue
        gt_mask = g.mask(info.width, info.height)
        counts = pixel_counts(inst.mask, gt_mask)
        relaxed = []
        for r in radii:
            c = counts if r == 0 else pixel_counts(dilate(inst.mask, r), dilate(gt_mask, r))
            relaxed.append((int(r), c.intersection, c.union))
        results.append(InstanceResult(
            g.instance_id, g.image_id, scene, matched=True, box_iou=iou, detection_index=det_index,
            counts=counts, relaxed_counts=tuple(relaxed), synthesized=inst.synthesized,
        ))
    return results, ms


def evaluate(gt: GroundTruth, predictions: dict[int, ImagePrediction], match_threshold: float = 0.5,
             radii: Sequence[int] = (0, 1, 2, 3), map_thresholds: ThresholdGrid | None = None,
             jobs: int = 1) -> Evaluation:
    """Evaluate every GT image; results come back in (image_id, instance_id) order for any ``jobs``."""
    unknown = sorted(set(predictions) - set(gt.images))
    if unknown:
        raise ReferentialIntegrityError(f"predictions reference images not in ground truth: {unknown[:10]}")

    def _one(image_id: int):
        pred = predictions.get(image_id) or ImagePrediction(image_id)
        return evaluate_image(gt.instances(image_id), gt.images[image_id], pred,
                              match_threshold, radii, gt.scene_of(image_id))

    image_ids = gt.image_ids()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_one, image_ids))
    else:
        outputs = [_one(i) for i in image_ids]

    results: list[InstanceResult] = []
    matchsets: dict[int, MatchSet] = {}
    for image_id, (res, ms) in zip(image_ids, outputs):
        results.extend(res)
        matchsets[image_id] = ms

    map_result = None
    if gt.instance_count:
        all_dets = [d for image_id in image_ids for d in (predictions.get(image_id) or ImagePrediction(image_id)).detections]
        map_result = coco_map(all_dets, gt.all_instances(), map_thresholds)
    else:
        logger.warning("No ground-truth instances - mAP left undefined")
    logger.info(f"Evaluated {len(results)} instances over {len(image_ids)} images")
    return Evaluation(tuple(results), matchsets, map_result)
