# src/dataset.py

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from PIL import Image

from .errors import DatasetError, GenerationError, MalformedRleError, ReferentialIntegrityError
from .raster import (
    BBox, BinaryMask, Polygon, RleMask,
    mask_from_bbox, rasterize_polygons, rle_decode, rle_encode, translate_mask,
)

logger = logging.getLogger(__name__)

SCENE_TAGS = ("inshore", "offshore", "unknown")
DEFAULT_CATEGORIES = [{"id": 1, "name": "ship"}]

# Annotation noise allowance when checking that a bbox encloses its polygon.
BBOX_SLACK_PX = 1.0

# Placement attempts per ship before a synthetic scene is declared infeasible.
MAX_PLACEMENT_ATTEMPTS = 1000


# --- Types ---

@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class GtInstance:
    instance_id: int
    image_id: int
    bbox: BBox
    polygons: tuple[Polygon, ...]
    scene: str = "unknown"

    def mask(self, width: int, height: int) -> BinaryMask:
        return rasterize_polygons(self.polygons, width, height)


@dataclass(frozen=True)
class Detection:
    image_id: int
    bbox: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class Candidate:
    """One segmenter output for a prompt box."""
    mask: BinaryMask
    quality: float
    synthesized: bool = False


@dataclass(frozen=True)
class PredictedInstance:
    """A segmented prompt. ``index`` is the position of ``detection`` in the raw detector output."""
    detection: Detection
    mask: BinaryMask
    quality: float
    synthesized: bool = False
    index: int = 0

    @property
    def rle(self) -> RleMask:
        return rle_encode(self.mask)


@dataclass(frozen=True)
class ImagePrediction:
    """Everything predicted for one image.

    ``detections`` is the raw detector output, ``instances`` the prompts that
    produced a mask, ``failed`` the raw indices of prompts whose segmenter
    returned no candidate.
    """
    image_id: int
    detections: tuple[Detection, ...] = ()
    instances: tuple[PredictedInstance, ...] = ()
    failed: tuple[int, ...] = ()

    def prompts(self) -> list[tuple[int, Detection]]:
        """Surviving prompts (segmented or failed) as (raw index, detection), in raw order."""
        indexed = [(p.index, p.detection) for p in self.instances]
        indexed += [(i, self.detections[i]) for i in self.failed]
        return sorted(indexed, key=lambda item: item[0])


@dataclass(frozen=True)
class PredictionRecord:
    """One entry of a COCO-results file; ``primary`` is None when segmentation failed."""
    detection: Detection
    primary: Candidate | None
    candidates: tuple[Candidate, ...] = ()
    segmentation_failed: bool = False


class GroundTruth:
    """Ground-truth instances grouped by image, plus image dimensions for rasterization."""

    def __init__(self, images: dict[int, ImageInfo], instances: list[GtInstance],
                 categories: list[dict] | None = None, scene_tags: dict[int, str] | None = None):
        self.images = dict(sorted(images.items()))
        self.categories = categories or list(DEFAULT_CATEGORIES)
        self._scenes = {k: v for k, v in (scene_tags or {}).items() if k in self.images}
        self._by_image: dict[int, list[GtInstance]] = {image_id: [] for image_id in self.images}
        seen: set[int] = set()
        for inst in instances:
            if inst.image_id not in self._by_image:
                raise ReferentialIntegrityError(f"instance {inst.instance_id} references unknown image {inst.image_id}")
            if inst.instance_id in seen:
                raise ReferentialIntegrityError(f"duplicate instance id {inst.instance_id}")
            seen.add(inst.instance_id)
            self._by_image[inst.image_id].append(inst)
        for items in self._by_image.values():
            items.sort(key=lambda i: i.instance_id)

    def image_ids(self) -> list[int]:
        return list(self.images)

    def instances(self, image_id: int) -> list[GtInstance]:
        return list(self._by_image.get(image_id, []))

    def all_instances(self) -> list[GtInstance]:
        return [inst for image_id in self.images for inst in self._by_image[image_id]]

    @property
    def instance_count(self) -> int:
        return sum(len(v) for v in self._by_image.values())

    def scene_of(self, image_id: int) -> str:
        return self._scenes.get(image_id, "unknown")

    def scene_tags(self) -> dict[int, str]:
        """Known (non-unknown) scene tags per image, including images with no instances."""
        return {k: v for k, v in sorted(self._scenes.items()) if v != "unknown"}

    def gt_mask(self, inst: GtInstance) -> BinaryMask:
        info = self.images[inst.image_id]
        return inst.mask(info.width, info.height)

    def digest(self) -> str:
        """Identity of the evaluated ground truth: image ids, per-image instance counts, total."""
        payload = json.dumps({
            "images": [[image_id, len(items)] for image_id, items in self._by_image.items()],
            "instances": self.instance_count,
        }, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# --- Ground truth I/O ---

def _read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError("file not found", path)
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}", path)


def load_scene_tags(path: str) -> dict[int, str]:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise DatasetError("scene tag file must be a JSON object {image_id: tag}", path)
    tags = {}
    for key, tag in data.items():
        if tag not in SCENE_TAGS:
            raise DatasetError(f"image {key}: scene tag must be one of {SCENE_TAGS}, got {tag!r}", path)
        try:
            tags[int(key)] = tag
        except ValueError:
            raise DatasetError(f"scene tag key {key!r} is not an integer image id", path)
    return tags


def _parse_polygons(ann: dict, bbox: BBox, path: str) -> tuple[Polygon, ...]:
    seg = ann.get("segmentation")
    if not seg:
        logger.warning(f"Annotation {ann['id']} has no segmentation - using its bbox outline")
        return (Polygon.from_bbox(bbox),)
    if isinstance(seg, dict):
        raise DatasetError(f"annotation {ann['id']}: only polygon segmentations are supported", path)
    try:
        return tuple(Polygon.from_flat(ring) for ring in seg)
    except (TypeError, ValueError) as e:
        raise DatasetError(f"annotation {ann['id']}: bad polygon: {e}", path)


def _check_enclosure(inst: GtInstance) -> None:
    b = inst.bbox
    for poly in inst.polygons:
        for x, y in poly.vertices:
            if (x < b.x - BBOX_SLACK_PX or x > b.x2 + BBOX_SLACK_PX
                    or y < b.y - BBOX_SLACK_PX or y > b.y2 + BBOX_SLACK_PX):
                logger.warning(f"Annotation {inst.instance_id}: vertex ({x}, {y}) lies outside bbox {b.to_list()}")
                return


def load_ground_truth(annotation_file: str, scene_tag_file: str | None = None) -> GroundTruth:
    """Load COCO-layout ground truth; images without a sidecar tag are 'unknown'."""
    data = _read_json(annotation_file)
    if not isinstance(data, dict) or "images" not in data:
        raise DatasetError("expected a COCO object with an 'images' array", annotation_file)

    tags = load_scene_tags(scene_tag_file) if scene_tag_file else {}

    images: dict[int, ImageInfo] = {}
    try:
        for img in data["images"]:
            info = ImageInfo(int(img["id"]), int(img["width"]), int(img["height"]), img.get("file_name", ""))
            if info.image_id in images:
                raise ReferentialIntegrityError(f"duplicate image id {info.image_id}", annotation_file)
            images[info.image_id] = info
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"image entry missing id/width/height: {e}", annotation_file)

    for image_id in tags:
        if image_id not in images:
            logger.warning(f"Scene tag for unknown image {image_id} ignored")

    instances = []
    seen_ids: set[int] = set()
    for ann in data.get("annotations", []):
        try:
            image_id = int(ann["image_id"])
            bbox = BBox.from_list(ann["bbox"])
            ann_id = int(ann["id"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"annotation missing id/image_id/bbox: {e}", annotation_file)
        if image_id not in images:
            raise ReferentialIntegrityError(f"annotation {ann_id} references unknown image {image_id}", annotation_file)
        if ann_id in seen_ids:
            raise ReferentialIntegrityError(f"duplicate annotation id {ann_id}", annotation_file)
        seen_ids.add(ann_id)
        inst = GtInstance(
            instance_id=ann_id,
            image_id=image_id,
            bbox=bbox,
            polygons=_parse_polygons(ann, bbox, annotation_file),
            scene=tags.get(image_id, "unknown"),
        )
        _check_enclosure(inst)
        instances.append(inst)

    gt = GroundTruth(images, instances, data.get("categories"), scene_tags=tags)
    logger.info(f"Loaded {gt.instance_count} instances over {len(images)} images from {annotation_file}")
    return gt


def ground_truth_to_coco(gt: GroundTruth) -> dict:
    annotations = []
    for inst in gt.all_instances():
        annotations.append({
            "id": inst.instance_id,
            "image_id": inst.image_id,
            "category_id": gt.categories[0]["id"] if gt.categories else 1,
            "bbox": inst.bbox.to_list(),
            "area": inst.bbox.area,
            "iscrowd": 0,
            "segmentation": [poly.to_flat() for poly in inst.polygons],
        })
    return {
        "images": [
            {"id": i.image_id, "width": i.width, "height": i.height, "file_name": i.file_name}
            for i in gt.images.values()
        ],
        "annotations": annotations,
        "categories": gt.categories,
    }


def _write_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_ground_truth(gt: GroundTruth, path: str) -> None:
    _write_json(path, ground_truth_to_coco(gt))
    logger.info(f"Wrote {gt.instance_count} ground-truth instances to {path}")


def write_scene_tags(gt: GroundTruth, path: str) -> None:
    _write_json(path, {str(k): v for k, v in gt.scene_tags().items()})


# --- Predictions I/O ---

def _parse_candidate(seg: dict, quality: float, info: ImageInfo, path: str) -> Candidate:
    rle = RleMask.from_dict(seg)
    if (rle.height, rle.width) != (info.height, info.width):
        raise MalformedRleError(
            f"{path}: image {info.image_id}: RLE size [{rle.height}, {rle.width}] "
            f"does not match image [{info.height}, {info.width}]"
        )
    return Candidate(mask=rle_decode(rle), quality=_unit(quality, "quality", path))


def _unit(value: Any, name: str, path: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise DatasetError(f"{name} must be a number, got {value!r}", path)
    if not 0.0 <= v <= 1.0:
        raise DatasetError(f"{name} must be in [0, 1], got {v}", path)
    return v


def read_prediction_records(results_file: str, images: dict[int, ImageInfo]) -> dict[int, list[PredictionRecord]]:
    """Parse a COCO-results array. Records without a segmentation get a box mask flagged as synthesized."""
    data = _read_json(results_file)
    if not isinstance(data, list):
        raise DatasetError("predictions must be a JSON array", results_file)

    grouped: dict[int, list[PredictionRecord]] = {}
    synthesized = 0
    for n, rec in enumerate(data):
        if not isinstance(rec, dict):
            raise DatasetError(f"record {n} is not an object", results_file)
        for key in ("image_id", "bbox", "score"):
            if key not in rec:
                raise DatasetError(f"record {n} is missing mandatory field '{key}'", results_file)
        try:
            image_id = int(rec["image_id"])
            bbox = BBox.from_list(rec["bbox"])
        except (TypeError, ValueError) as e:
            raise DatasetError(f"record {n}: {e}", results_file)
        info = images.get(image_id)
        if info is None:
            raise ReferentialIntegrityError(f"record {n} references unknown image {image_id}", results_file)
        detection = Detection(image_id, bbox, _unit(rec["score"], "score", results_file))

        failed = bool(rec.get("segmentation_failed", False))
        quality = rec.get("quality", 1.0)
        primary = None
        if not failed:
            if rec.get("segmentation"):
                primary = _parse_candidate(rec["segmentation"], quality, info, results_file)
                if rec.get("synthesized"):
                    primary = Candidate(primary.mask, primary.quality, synthesized=True)
            else:
                primary = Candidate(mask_from_bbox(bbox, info.width, info.height),
                                    _unit(quality, "quality", results_file), synthesized=True)
                synthesized += 1
        candidates: tuple[Candidate, ...] = ()
        if rec.get("candidates"):
            candidates = tuple(
                _parse_candidate(c.get("segmentation", {}), c.get("quality", 1.0), info, results_file)
                for c in rec["candidates"]
            )
        elif primary is not None:
            candidates = (primary,)
        grouped.setdefault(image_id, []).append(
            PredictionRecord(detection, primary, candidates, segmentation_failed=failed)
        )

    if synthesized:
        logger.warning(f"{synthesized} predictions had no segmentation - box masks synthesized and flagged")
    return dict(sorted(grouped.items()))


def load_predictions(results_file: str, images: dict[int, ImageInfo]) -> dict[int, ImagePrediction]:
    """Load stored predictions grouped by image (every GT image gets an entry)."""
    records = read_prediction_records(results_file, images)
    out = {}
    for image_id in images:
        recs = records.get(image_id, [])
        instances, failed = [], []
        for idx, rec in enumerate(recs):
            if rec.primary is None:
                failed.append(idx)
            else:
                instances.append(PredictedInstance(rec.detection, rec.primary.mask, rec.primary.quality,
                                                   rec.primary.synthesized, idx))
        out[image_id] = ImagePrediction(image_id, tuple(r.detection for r in recs), tuple(instances), tuple(failed))
    logger.info(f"Loaded {sum(len(r) for r in records.values())} prediction records from {results_file}")
    return out


def predictions_to_records(predictions: dict[int, ImagePrediction]) -> list[dict]:
    records = []
    for image_id in sorted(predictions):
        pred = predictions[image_id]
        by_index = {p.index: p for p in pred.instances}
        failed = set(pred.failed)
        for idx, det in enumerate(pred.detections):
            rec = {"image_id": image_id, "bbox": det.bbox.to_list(), "score": det.score}
            inst = by_index.get(idx)
            if inst is not None:
                rec["segmentation"] = inst.rle.to_dict()
                rec["quality"] = inst.quality
                if inst.synthesized:
                    rec["synthesized"] = True
            elif idx in failed:
                rec["segmentation_failed"] = True
            records.append(rec)
    return records


def write_predictions(predictions: dict[int, ImagePrediction], path: str) -> None:
    records = predictions_to_records(predictions)
    _write_json(path, records)
    logger.info(f"Wrote {len(records)} prediction records to {path}")


# --- Synthetic scenes ---

@dataclass(frozen=True)
class SyntheticSceneSpec:
    width: int
    height: int
    ship_count: int
    ship_width: tuple[int, int] = (8, 8)
    ship_height: tuple[int, int] = (4, 4)
    min_separation: int = 4
    scene: str = "offshore"
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GenerationError(f"image size must be positive, got {self.width}x{self.height}")
        if self.ship_count < 0:
            raise GenerationError(f"ship count must be >= 0, got {self.ship_count}")
        for name, (lo, hi) in (("width", self.ship_width), ("height", self.ship_height)):
            if lo < 1 or hi < lo:
                raise GenerationError(f"ship {name} range must satisfy 1 <= min <= max, got {lo}..{hi}")
        if self.min_separation < 0:
            raise GenerationError(f"minimum separation must be >= 0, got {self.min_separation}")
        if self.scene not in SCENE_TAGS:
            raise GenerationError(f"scene must be one of {SCENE_TAGS}, got {self.scene!r}")


@dataclass(frozen=True)
class SyntheticScene:
    info: ImageInfo
    instances: tuple[GtInstance, ...]
    image: np.ndarray = field(repr=False, compare=False)


def rect_gap(a: BBox, b: BBox) -> float:
    """Background pixels separating two rectangles along the better axis (negative when they overlap)."""
    gx = max(b.x - a.x2, a.x - b.x2)
    gy = max(b.y - a.y2, a.y - b.y2)
    return max(gx, gy)


def generate_synthetic(spec: SyntheticSceneSpec, image_id: int = 1, first_instance_id: int = 1,
                       file_name: str = "") -> SyntheticScene:
    """Place axis-aligned rectangular ships with integer corners, honoring the minimum separation."""
    rng = np.random.default_rng(spec.seed)
    if spec.ship_count and (spec.ship_width[0] > spec.width or spec.ship_height[0] > spec.height):
        raise GenerationError(
            f"smallest ship {spec.ship_width[0]}x{spec.ship_height[0]} does not fit a {spec.width}x{spec.height} image"
        )

    boxes: list[BBox] = []
    for k in range(spec.ship_count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            w = int(rng.integers(spec.ship_width[0], spec.ship_width[1] + 1))
            h = int(rng.integers(spec.ship_height[0], spec.ship_height[1] + 1))
            if w > spec.width or h > spec.height:
                continue
            x = int(rng.integers(0, spec.width - w + 1))
            y = int(rng.integers(0, spec.height - h + 1))
            box = BBox(x, y, w, h)
            if all(rect_gap(box, other) >= spec.min_separation for other in boxes):
                boxes.append(box)
                break
        else:
            raise GenerationError(
                f"cannot place ship {k + 1} of {spec.ship_count} with minimum separation "
                f"{spec.min_separation}px in a {spec.width}x{spec.height} image "
                f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )

    image = np.zeros((spec.height, spec.width), dtype=np.uint8)
    instances = []
    for n, box in enumerate(boxes):
        image[int(box.y):int(box.y2), int(box.x):int(box.x2)] = 255
        instances.append(GtInstance(
            instance_id=first_instance_id + n,
            image_id=image_id,
            bbox=box,
            polygons=(Polygon.from_bbox(box),),
            scene=spec.scene,
        ))
    info = ImageInfo(image_id, spec.width, spec.height, file_name)
    return SyntheticScene(info, tuple(instances), image)


def generate_dataset(n_images: int, width: int, height: int, ships: tuple[int, int],
                     ship_width: tuple[int, int], ship_height: tuple[int, int],
                     min_separation: int, scene: str, seed: int) -> tuple[GroundTruth, dict[int, np.ndarray]]:
    """Generate ``n_images`` scenes; per-image seeds are spawned from ``seed``.

    ``scene`` may be 'mixed', in which case each image is tagged inshore or
    offshore with equal probability.
    """
    if n_images < 0:
        raise GenerationError(f"image count must be >= 0, got {n_images}")
    if ships[0] < 0 or ships[1] < ships[0]:
        raise GenerationError(f"ship count range must satisfy 0 <= min <= max, got {ships[0]}..{ships[1]}")
    if scene != "mixed" and scene not in SCENE_TAGS:
        raise GenerationError(f"scene must be 'mixed' or one of {SCENE_TAGS}, got {scene!r}")

    master = np.random.SeedSequence(seed)
    plan_rng = np.random.default_rng(master)
    children = master.spawn(n_images)

    images: dict[int, ImageInfo] = {}
    instances: list[GtInstance] = []
    pixels: dict[int, np.ndarray] = {}
    tags: dict[int, str] = {}
    next_id = 1
    for n, child in enumerate(children):
        image_id = n + 1
        count = int(plan_rng.integers(ships[0], ships[1] + 1))
        tag = scene if scene != "mixed" else ("inshore" if plan_rng.random() < 0.5 else "offshore")
        spec = SyntheticSceneSpec(
            width=width, height=height, ship_count=count,
            ship_width=ship_width, ship_height=ship_height,
            min_separation=min_separation, scene=tag,
            seed=int(child.generate_state(1, dtype=np.uint64)[0]),
        )
        generated = generate_synthetic(spec, image_id, next_id, f"synth_{image_id:06d}.pgm")
        next_id += len(generated.instances)
        images[image_id] = generated.info
        instances.extend(generated.instances)
        pixels[image_id] = generated.image
        tags[image_id] = tag

    gt = GroundTruth(images, instances, scene_tags=tags)
    logger.info(f"Generated {len(instances)} ships over {n_images} synthetic images (seed {seed})")
    return gt, pixels


def write_pgm(image: np.ndarray, path: str) -> None:
    """Write an 8-bit binary PGM (P5)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PPM")


# --- Perturbation oracle ---

def perturb_gt(gt: GroundTruth, shift: int, drop_rate: float, seed: int,
               score_low: float = 0.5) -> dict[int, list[PredictedInstance]]:
    """Predictions with analytically known IoU: GT translated by (shift, 0), some dropped.

    Scores are uniform in [score_low, 1) from ``seed``; the random stream
    advances identically whether or not an instance is dropped.
    """
    if shift < 0 or int(shift) != shift:
        raise ValueError(f"shift must be a non-negative integer, got {shift}")
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must be in [0, 1], got {drop_rate}")
    rng = np.random.default_rng(seed)
    out: dict[int, list[PredictedInstance]] = {}
    for image_id, info in gt.images.items():
        kept: list[PredictedInstance] = []
        for inst in gt.instances(image_id):
            u = rng.random()
            score = float(rng.uniform(score_low, 1.0))
            if u < drop_rate:
                continue
            box = inst.bbox.translate(shift, 0).clip(info.width, info.height)
            if box is None:
                logger.debug(f"Instance {inst.instance_id} shifted out of image {image_id}")
                continue
            mask = translate_mask(gt.gt_mask(inst), int(shift), 0)
            kept.append(PredictedInstance(Detection(image_id, box, score), mask, 1.0, index=len(kept)))
        out[image_id] = kept
    return out
