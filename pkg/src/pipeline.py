# src/pipeline.py

import contextlib
import logging
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TypeVar

from .backends import Detector, ImageRef, Segmenter, image_refs
from .config import PipelineConfig
from .dataset import Candidate, Detection, GroundTruth, ImagePrediction, PredictedInstance
from .errors import BackendError, EmptyCandidateError, UndefinedMetricError
from .scoring import mean_std

logger = logging.getLogger(__name__)

DEFAULT_MODELED_SHIPS = (1, 2, 4)

T = TypeVar("T")


class MonotonicClock:
    def now_ms(self) -> float:
        return time.perf_counter_ns() / 1e6


@dataclass(frozen=True)
class TimingRecord:
    image_id: int
    detect_ms: float
    segment_ms: tuple[float, ...]
    ship_count: int
    scene: str = "unknown"

    def __post_init__(self):
        if len(self.segment_ms) != self.ship_count:
            raise ValueError(f"image {self.image_id}: {len(self.segment_ms)} segment timings for {self.ship_count} prompts")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "scene": self.scene, "detect_ms": self.detect_ms,
                "segment_ms": list(self.segment_ms), "ship_count": self.ship_count}


@dataclass(frozen=True)
class TimingSummary:
    images: int
    prompts: int
    detect_mean: float
    detect_std: float
    segment_mean: float
    segment_std: float
    modeled_total: dict[float, float] = field(default_factory=dict)
    by_scene: dict[str, dict] = field(default_factory=dict)

    def total_for(self, ships: float) -> float:
        return self.detect_mean + ships * self.segment_mean

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "prompts": self.prompts,
            "detect_ms": {"mean": self.detect_mean, "std": self.detect_std},
            "segment_ms": {"mean": self.segment_mean, "std": self.segment_std},
            "modeled_total_ms": {str(n): v for n, v in self.modeled_total.items()},
            "by_scene": self.by_scene,
        }


@dataclass(frozen=True)
class PipelineResult:
    predictions: dict[int, ImagePrediction]
    timings: tuple[TimingRecord, ...]
    failed_images: tuple[tuple[int, str], ...] = ()

    @property
    def partial(self) -> bool:
        return bool(self.failed_images)

    @property
    def segmentation_failures(self) -> int:
        return sum(len(p.failed) for p in self.predictions.values())


# --- Stages ---

def _score(detection: Detection) -> float:
    return detection.score


def _indexed_score(item: tuple[int, Detection]) -> float:
    return item[1].score


def filter_detections(detections: Iterable[T], threshold: float, score: Callable[[T], float] = _score) -> list[T]:
    """Keep detections with score >= threshold, in their original order.

    ``score`` reads the score from each item, so (index, detection) pairs can be filtered too.
    """
    return [d for d in detections if score(d) >= threshold]


def select_mask(candidates: Sequence[Candidate], detection: Detection, index: int = 0) -> PredictedInstance:
    """Highest-quality candidate; ties go to the earliest."""
    if not candidates:
        raise EmptyCandidateError(f"image {detection.image_id}: no candidate masks for prompt {index}")
    best = 0
    for k in range(1, len(candidates)):
        if candidates[k].quality > candidates[best].quality:
            best = k
    chosen = candidates[best]
    return PredictedInstance(detection, chosen.mask, chosen.quality, chosen.synthesized, index)


def apply_confidence_filter(prediction: ImagePrediction, threshold: float) -> ImagePrediction:
    """Drop prompts below the threshold; raw detections stay for mAP."""
    keep = {i for i, _ in filter_detections(enumerate(prediction.detections), threshold, _indexed_score)}
    return ImagePrediction(
        prediction.image_id,
        prediction.detections,
        tuple(p for p in prediction.instances if p.index in keep),
        tuple(i for i in prediction.failed if i in keep),
    )


def _guard(backend) -> contextlib.AbstractContextManager:
    return contextlib.nullcontext() if getattr(backend, "thread_safe", False) else threading.Lock()


def run_image(ref: ImageRef, detector: Detector, segmenter: Segmenter, config: PipelineConfig,
              clock=None, scene: str = "unknown", detector_guard=None, segmenter_guard=None,
              ) -> tuple[ImagePrediction, TimingRecord]:
    """Detect, filter, prompt each surviving box and select one mask per prompt."""
    clock = clock or MonotonicClock()
    detector_guard = detector_guard or contextlib.nullcontext()
    segmenter_guard = segmenter_guard or contextlib.nullcontext()

    t0 = clock.now_ms()
    with detector_guard:
        raw = detector.detect(ref)
    detect_ms = clock.now_ms() - t0
    detections = tuple(Detection(ref.image_id, d.bbox, d.score) for d in raw)

    instances, failed, segment_ms = [], [], []
    for index, det in filter_detections(enumerate(detections), config.confidence_threshold, _indexed_score):
        box = det.bbox.clip(ref.width, ref.height)
        if box is not None and config.box_expansion:
            box = box.expand(config.box_expansion).clip(ref.width, ref.height)
        s0 = clock.now_ms()
        try:
            if box is None:
                raise EmptyCandidateError(f"image {ref.image_id}: prompt {index} lies outside the image")
            with segmenter_guard:
                candidates = segmenter.segment(ref, box, detection_index=index)
            instances.append(select_mask(candidates[:config.max_candidates], det, index))
        except EmptyCandidateError as e:
            logger.warning(f"Segmentation failed: {e}")
            failed.append(index)
        segment_ms.append(clock.now_ms() - s0)

    prediction = ImagePrediction(ref.image_id, detections, tuple(instances), tuple(failed))
    timing = TimingRecord(ref.image_id, detect_ms, tuple(segment_ms), len(segment_ms), scene)
    return prediction, timing


def run_pipeline(dataset: GroundTruth, detector: Detector, segmenter: Segmenter, config: PipelineConfig,
                 clock=None, image_root: str | None = None) -> PipelineResult:
    """Run every image through the backends; output is ordered by image_id for any ``jobs``.

    A backend error on an image either skips it (its prediction stays empty and
    it is listed in ``failed_images``) or aborts the run, per ``config.on_error``.
    """
    if not dataset.images:
        raise UndefinedMetricError("pipeline needs at least one image")
    clock = clock or MonotonicClock()
    refs = image_refs(dataset, image_root)
    det_guard, seg_guard = _guard(detector), _guard(segmenter)

    def _one(image_id: int):
        try:
            return run_image(refs[image_id], detector, segmenter, config, clock,
                             dataset.scene_of(image_id), det_guard, seg_guard), None
        except BackendError as e:
            if config.on_error == "abort":
                raise
            logger.error(f"Skipping image {image_id}: {e}")
            return None, str(e)

    image_ids = dataset.image_ids()
    logger.info(f"Running pipeline over {len(image_ids)} images with {config.jobs} worker(s)")
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            outputs = list(pool.map(_one, image_ids))
    else:
        outputs = [_one(i) for i in image_ids]

    predictions, timings, failed_images = {}, [], []
    for image_id, (result, error) in zip(image_ids, outputs):
        if result is None:
            predictions[image_id] = ImagePrediction(image_id)
            failed_images.append((image_id, error))
            continue
        prediction, timing = result
        predictions[image_id] = prediction
        timings.append(timing)

    if failed_images:
        logger.warning(f"{len(failed_images)} image(s) skipped after backend errors")
    result = PipelineResult(predictions, tuple(timings), tuple(failed_images))
    logger.info(f"Pipeline produced {sum(len(p.instances) for p in predictions.values())} instances, "
                f"{result.segmentation_failures} segmentation failures")
    return result


# --- Timing ---

def summarize_timing(records: Sequence[TimingRecord], ships_per_image: Sequence[float] | None = None,
                     by_scene: bool = True) -> TimingSummary:
    """Per-stage mean/std and modeled per-image totals ``detect + n * segment``.

    Detect statistics run over images, segment statistics over prompts.
    Per-scene entries model each scene at its observed mean prompts per image.
    """
    if not records:
        raise UndefinedMetricError("timing summary is undefined without records")
    ships = tuple(ships_per_image) if ships_per_image is not None else DEFAULT_MODELED_SHIPS
    detect_mean, detect_std = mean_std([r.detect_ms for r in records])
    segments = [s for r in records for s in r.segment_ms]
    segment_mean, segment_std = mean_std(segments)

    scenes = {}
    if by_scene:
        grouped: dict[str, list[TimingRecord]] = defaultdict(list)
        for r in records:
            grouped[r.scene].append(r)
        for scene in sorted(grouped):
            items = grouped[scene]
            d_mean, _ = mean_std([r.detect_ms for r in items])
            s_mean, _ = mean_std([s for r in items for s in r.segment_ms])
            n_mean = sum(r.ship_count for r in items) / len(items)
            scenes[scene] = {
                "images": len(items),
                "mean_ships": n_mean,
                "detect_mean_ms": d_mean,
                "segment_mean_ms": s_mean,
                "modeled_total_ms": d_mean + n_mean * s_mean,
            }

    return TimingSummary(
        images=len(records),
        prompts=len(segments),
        detect_mean=detect_mean,
        detect_std=detect_std,
        segment_mean=segment_mean,
        segment_std=segment_std,
        modeled_total={n: detect_mean + n * segment_mean for n in ships},
        by_scene=scenes,
    )
