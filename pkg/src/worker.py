# src/worker.py
"""
Reference backend worker: answers detect/segment requests from a ground-truth file.

Protocol: JSON Lines over stdin/stdout, one response line per request line.

  {"type": "detect", "image": "<path>"}
      -> {"detections": [{"bbox": [x, y, w, h], "score": s}, ...]}
  {"type": "segment", "image": "<path>", "bbox": [x, y, w, h]}
      -> {"candidates": [{"segmentation": {"size": [h, w], "counts": [...]}, "quality": q}, ...]}

Requests may carry "image_id"; otherwise the image is found by file name.
Failures are answered with {"error": "..."} and the worker keeps serving.
"""

import argparse
import json
import logging
import os
import sys

from .backends import ImageRef, OracleDetector, OracleSegmenter
from .dataset import load_ground_truth
from .errors import EmptyCandidateError, PromptSegError
from .raster import BBox, rle_encode

logger = logging.getLogger(__name__)


def _jsonl_write(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, separators=(",", ":")) + "\n")
    sys.stdout.flush()


class OracleWorker:
    def __init__(self, gt_path: str, seed: int, shift: int = 0, drop_rate: float = 0.0, distractors: int = 0):
        self.gt = load_ground_truth(gt_path)
        self.detector = OracleDetector(self.gt, seed, shift=shift, drop_rate=drop_rate)
        self.segmenter = OracleSegmenter(self.gt, shift=shift, distractors=distractors)
        self._by_name = {os.path.basename(info.file_name): image_id
                         for image_id, info in self.gt.images.items() if info.file_name}

    def _ref(self, request: dict) -> ImageRef:
        image_id = request.get("image_id")
        if image_id is None:
            image_id = self._by_name.get(os.path.basename(str(request.get("image", ""))))
        info = self.gt.images.get(image_id) if image_id is not None else None
        if info is None:
            raise KeyError(f"unknown image {request.get('image')!r}")
        return ImageRef(info.image_id, info.width, info.height, str(request.get("image", "")))

    def handle(self, request: dict) -> dict:
        kind = request.get("type")
        if kind == "detect":
            dets = self.detector.detect(self._ref(request))
            return {"detections": [{"bbox": d.bbox.to_list(), "score": d.score} for d in dets]}
        if kind == "segment":
            ref = self._ref(request)
            try:
                candidates = self.segmenter.segment(ref, BBox.from_list(request["bbox"]))
            except EmptyCandidateError:
                return {"candidates": []}
            return {"candidates": [{"segmentation": rle_encode(c.mask).to_dict(), "quality": c.quality}
                                   for c in candidates]}
        raise ValueError(f"unknown request type {kind!r}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Oracle detect/segment worker (JSONL stdin/stdout)")
    parser.add_argument("--gt", required=True, help="COCO-layout ground-truth file to answer from")
    parser.add_argument("--seed", type=int, default=0, help="Seed for detection scores")
    parser.add_argument("--shift", type=int, default=0, help="Horizontal shift of every answer, px")
    parser.add_argument("--drop-rate", type=float, default=0.0, help="Fraction of objects never detected")
    parser.add_argument("--distractors", type=int, default=0, help="Extra lower-quality candidates per prompt")
    args = parser.parse_args(argv)

    # stdout carries the protocol; logs go to stderr
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    try:
        worker = OracleWorker(args.gt, args.seed, args.shift, args.drop_rate, args.distractors)
    except PromptSegError as e:
        logger.error(f"Cannot load ground truth: {e}")
        return e.exit_code

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            _jsonl_write(worker.handle(request))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, PromptSegError) as e:
            _jsonl_write({"error": f"{type(e).__name__}: {e}"})
    return 0


if __name__ == "__main__":
    sys.exit(main())
