"""Tests for the detect-then-prompt pipeline, its timing model and the oracle backends end to end."""

import threading
import time

import pytest

from src.backends import OracleDetector, OracleSegmenter
from src.config import PipelineConfig
from src.dataset import Candidate, Detection, GroundTruth, ImagePrediction, PredictedInstance
from src.errors import BackendError, EmptyCandidateError, UndefinedMetricError
from src.metrics import detection_rate, evaluate
from src.pipeline import (
    TimingRecord, apply_confidence_filter, filter_detections, run_pipeline, select_mask, summarize_timing,
)
from src.raster import BBox, BinaryMask

from .conftest import rect_mask


def box_mask(ref, box: BBox) -> BinaryMask:
    return rect_mask(ref.width, ref.height, int(box.x), int(box.y), int(box.w), int(box.h))


class FakeDetector:
    """Fixed boxes per image; advances the clock by ``cost`` per call."""

    thread_safe = True

    def __init__(self, boxes: dict[int, list[tuple[tuple, float]]], clock=None, cost: int = 8, fail_on=()):
        self.boxes = boxes
        self.clock = clock
        self.cost = cost
        self.fail_on = set(fail_on)

    def detect(self, image):
        if self.clock:
            self.clock.advance(self.cost)
        if image.image_id in self.fail_on:
            raise BackendError("detector crashed", image.image_id)
        return [Detection(0, BBox(*b), s) for b, s in self.boxes.get(image.image_id, [])]


class FakeSegmenter:
    """Answers with the prompt box as a mask, one candidate per entry of ``qualities``."""

    thread_safe = True

    def __init__(self, clock=None, cost: int = 85, qualities=(0.9,)):
        self.clock = clock
        self.cost = cost
        self.qualities = qualities
        self.prompts = []

    def segment(self, image, box, detection_index=None):
        if self.clock:
            self.clock.advance(self.cost)
        self.prompts.append(box)
        return [Candidate(box_mask(image, box), q) for q in self.qualities]


class ExclusiveSegmenter(FakeSegmenter):
    """Records the largest number of concurrent calls."""

    thread_safe = False

    def __init__(self):
        super().__init__()
        self.active = 0
        self.peak = 0
        self._count_lock = threading.Lock()

    def segment(self, image, box, detection_index=None):
        with self._count_lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.002)
        try:
            return super().segment(image, box)
        finally:
            with self._count_lock:
                self.active -= 1


def one_image():
    return {1: [((2, 2, 8, 4), 0.9), ((16, 20, 8, 4), 0.8)]}


# --- Stages ---


class TestStages:
    """Filtering and mask selection."""

    def test_filter_keeps_threshold_inclusive(self):
        """Scores [0.3, 0.5, 0.8] at 0.5 -> [0.5, 0.8]."""
        dets = [Detection(1, BBox(0, 0, 1, 1), s) for s in (0.3, 0.5, 0.8)]
        assert [d.score for d in filter_detections(dets, 0.5)] == [0.5, 0.8]

    def test_filter_keeps_raw_indices(self):
        """Filtering (index, detection) pairs keeps each survivor's position in the raw list."""
        dets = [Detection(1, BBox(0, 0, 1, 1), s) for s in (0.9, 0.2, 0.6)]
        kept = filter_detections(enumerate(dets), 0.5, score=lambda pair: pair[1].score)
        assert [i for i, _ in kept] == [0, 2]

    def test_select_highest_quality_first_on_ties(self):
        """Qualities [0.7, 0.9, 0.9] -> index 1."""
        d = Detection(1, BBox(0, 0, 1, 1), 0.9)
        masks = [rect_mask(4, 4, 0, 0, k + 1, 1) for k in range(3)]
        cands = [Candidate(m, q) for m, q in zip(masks, (0.7, 0.9, 0.9))]
        chosen = select_mask(cands, d, index=4)
        assert chosen.mask == masks[1]
        assert chosen.quality == 0.9 and chosen.index == 4

    def test_select_empty_raises(self):
        """No candidate -> EmptyCandidateError."""
        with pytest.raises(EmptyCandidateError):
            select_mask([], Detection(1, BBox(0, 0, 1, 1), 0.9))

    def test_select_keeps_synthesized_flag(self):
        """The synthesized marker travels with the chosen mask."""
        m = rect_mask(4, 4, 0, 0, 2, 2)
        chosen = select_mask([Candidate(m, 0.5, synthesized=True)], Detection(1, BBox(0, 0, 2, 2), 0.9))
        assert chosen.synthesized

    def test_confidence_filter_keeps_raw_detections(self):
        """Prompts below threshold are dropped; detections stay for mAP."""
        dets = (Detection(1, BBox(0, 0, 2, 2), 0.9), Detection(1, BBox(2, 2, 2, 2), 0.3))
        insts = tuple(PredictedInstance(d, rect_mask(4, 4, 0, 0, 2, 2), 1.0, index=k) for k, d in enumerate(dets))
        out = apply_confidence_filter(ImagePrediction(1, dets, insts), 0.5)
        assert out.detections == dets
        assert [p.index for p in out.instances] == [0]


# --- Pipeline runs ---


class TestRunPipeline:
    """run_pipeline over fake and oracle backends."""

    def test_below_threshold_prompts_are_not_segmented(self, two_ship_gt):
        """Only detections at or above the threshold reach the segmenter."""
        seg = FakeSegmenter()
        det = FakeDetector({1: [((2, 2, 8, 4), 0.9), ((16, 20, 8, 4), 0.2)]})
        result = run_pipeline(two_ship_gt, det, seg, PipelineConfig())
        pred = result.predictions[1]
        assert len(pred.detections) == 2
        assert [p.index for p in pred.instances] == [0]
        assert len(seg.prompts) == 1

    def test_prompt_count_is_conserved(self, seed7_dataset):
        """segmented + failed + filtered == raw detections, per image."""
        det = OracleDetector(seed7_dataset, seed=7, score_low=0.3)
        result = run_pipeline(seed7_dataset, det, OracleSegmenter(seed7_dataset), PipelineConfig())
        for pred in result.predictions.values():
            below = sum(1 for d in pred.detections if d.score < 0.5)
            assert len(pred.instances) + len(pred.failed) + below == len(pred.detections)

    def test_box_outside_image_is_a_failed_prompt(self, two_ship_gt):
        """A box that clips to nothing counts as a segmentation failure."""
        det = FakeDetector({1: [((100, 100, 4, 4), 0.9)]})
        result = run_pipeline(two_ship_gt, det, FakeSegmenter(), PipelineConfig())
        assert result.predictions[1].failed == (0,)
        assert result.segmentation_failures == 1
        assert not result.partial

    def test_candidates_truncated_to_max(self, two_ship_gt):
        """Only the first max_candidates candidates compete."""
        seg = FakeSegmenter(qualities=(0.1, 0.2, 0.3, 0.9))
        det = FakeDetector({1: [((2, 2, 8, 4), 0.9)]})
        result = run_pipeline(two_ship_gt, det, seg, PipelineConfig(max_candidates=3))
        assert result.predictions[1].instances[0].quality == 0.3

    def test_box_expansion_is_clipped(self, two_ship_gt):
        """Expanded prompts stay inside the image."""
        seg = FakeSegmenter()
        det = FakeDetector({1: [((0, 1, 8, 4), 0.9)]})
        run_pipeline(two_ship_gt, det, seg, PipelineConfig(box_expansion=2))
        assert seg.prompts == [BBox(0, 0, 10, 7)]

    def test_backend_error_skips_image(self, seed7_dataset):
        """on_error=skip: the image gets an empty prediction and is reported."""
        det = FakeDetector({}, fail_on={3})
        result = run_pipeline(seed7_dataset, det, FakeSegmenter(), PipelineConfig())
        assert result.partial
        assert [image_id for image_id, _ in result.failed_images] == [3]
        assert result.predictions[3] == ImagePrediction(3)
        assert len(result.timings) == len(seed7_dataset.images) - 1

    def test_backend_error_aborts(self, seed7_dataset):
        """on_error=abort re-raises."""
        det = FakeDetector({}, fail_on={3})
        with pytest.raises(BackendError):
            run_pipeline(seed7_dataset, det, FakeSegmenter(), PipelineConfig(on_error="abort"))

    def test_unsafe_backend_is_serialized(self, seed7_dataset):
        """thread_safe=False backends never see concurrent calls."""
        seg = ExclusiveSegmenter()
        det = OracleDetector(seed7_dataset, seed=7)
        run_pipeline(seed7_dataset, det, seg, PipelineConfig(jobs=8))
        assert seg.peak == 1

    def test_jobs_do_not_change_predictions(self, seed7_dataset):
        """jobs=1 and jobs=8 produce equal predictions in the same order."""
        a = run_pipeline(seed7_dataset, OracleDetector(seed7_dataset, seed=7, shift=1),
                         OracleSegmenter(seed7_dataset, shift=1, distractors=2), PipelineConfig(jobs=1))
        b = run_pipeline(seed7_dataset, OracleDetector(seed7_dataset, seed=7, shift=1),
                         OracleSegmenter(seed7_dataset, shift=1, distractors=2), PipelineConfig(jobs=8))
        assert list(a.predictions) == list(b.predictions)
        assert a.predictions == b.predictions

    def test_empty_dataset_is_undefined(self, two_ship_gt):
        """No images -> nothing to run."""
        with pytest.raises(UndefinedMetricError):
            run_pipeline(GroundTruth({}, []), FakeDetector({}), FakeSegmenter(), PipelineConfig())

    # --- AC-4: oracle fixed point ---

    def test_oracle_fixed_point(self, seed7_dataset):
        """Unperturbed oracle backends -> every metric is exactly 1."""
        config = PipelineConfig()
        result = run_pipeline(seed7_dataset, OracleDetector(seed7_dataset, seed=7),
                              OracleSegmenter(seed7_dataset), config)
        ev = evaluate(seed7_dataset, result.predictions, radii=config.relaxed_radii)
        assert len(ev.results) == seed7_dataset.instance_count
        for r in ev.results:
            assert r.matched
            assert (r.mask_iou, r.dice, r.pixel_precision, r.pixel_recall) == (1.0, 1.0, 1.0, 1.0)
            assert set(r.relaxed_iou.values()) == {1.0}
        assert detection_rate(ev.matchsets.values()) == 1.0
        assert ev.map.map == 1.0

    # --- AC-5: known-shift oracle ---

    def test_shift_two_gives_point_six(self, seed7_dataset):
        """8x4 ships shifted right by 2 px -> IoU 24/40 = 0.6 wherever the shift stays inside."""
        result = run_pipeline(seed7_dataset, OracleDetector(seed7_dataset, seed=7, shift=2),
                              OracleSegmenter(seed7_dataset, shift=2), PipelineConfig())
        ev = evaluate(seed7_dataset, result.predictions)
        by_id = {g.instance_id: g for g in seed7_dataset.all_instances()}
        interior = 0
        for r in ev.results:
            g = by_id[r.instance_id]
            if g.bbox.x2 + 2 <= seed7_dataset.images[g.image_id].width:
                interior += 1
                assert r.matched
                assert r.mask_iou == 0.6
        assert interior > 0


# --- AC-8: timing model ---


class TestTiming:
    """Per-stage latency summaries from a deterministic clock."""

    def test_modeled_totals_from_fake_clock(self, two_ship_gt, fake_clock):
        """detect 8 ms, segment 85 ms -> 178 ms at 2 ships, 348 ms at 4."""
        det = FakeDetector(one_image(), clock=fake_clock, cost=8)
        seg = FakeSegmenter(clock=fake_clock, cost=85)
        result = run_pipeline(two_ship_gt, det, seg, PipelineConfig())
        assert result.timings[0].segment_ms == (85, 85)
        summary = summarize_timing(result.timings, ships_per_image=(2, 4))
        assert summary.detect_mean == 8 and summary.segment_mean == 85
        assert summary.modeled_total == {2: 178, 4: 348}
        assert summary.total_for(2) == 178

    def test_by_scene_uses_observed_ship_count(self, two_ship_gt, fake_clock):
        """Per-scene totals use the mean prompts per image."""
        det = FakeDetector(one_image(), clock=fake_clock, cost=8)
        result = run_pipeline(two_ship_gt, det, FakeSegmenter(clock=fake_clock, cost=85), PipelineConfig())
        scene = summarize_timing(result.timings).by_scene["offshore"]
        assert scene["images"] == 1 and scene["mean_ships"] == 2
        assert scene["modeled_total_ms"] == 178

    def test_default_ship_counts(self):
        """Default model covers 1, 2 and 4 ships."""
        summary = summarize_timing([TimingRecord(1, 10, (5,), 1)])
        assert summary.modeled_total == {1: 15, 2: 20, 4: 30}
        assert summary.detect_std == 0.0

    def test_record_length_must_match_ships(self):
        """One segment timing per prompt."""
        with pytest.raises(ValueError):
            TimingRecord(1, 10, (5, 5), 1)

    def test_empty_records_are_undefined(self):
        """No records -> undefined."""
        with pytest.raises(UndefinedMetricError):
            summarize_timing([])
