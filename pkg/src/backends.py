# src/backends.py

import json
import logging
import os
import queue
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass
from typing import Protocol

from .config import BackendDescriptor, RunConfig
from .dataset import (
    Candidate, Detection, GroundTruth, PredictionRecord, perturb_gt, read_prediction_records,
)
from .errors import (
    BackendError, BackendProtocolError, ConfigError, EmptyCandidateError, MalformedRleError,
)
from .metrics import box_iou
from .raster import BBox, RleMask, dilate, rle_decode, translate_mask

logger = logging.getLogger(__name__)

# Quality drop per distractor candidate returned by the oracle segmenter.
DISTRACTOR_QUALITY_STEP = 0.1


@dataclass(frozen=True)
class ImageRef:
    image_id: int
    width: int
    height: int
    path: str = ""


class Detector(Protocol):
    thread_safe: bool

    def detect(self, image: ImageRef) -> list[Detection]: ...


class Segmenter(Protocol):
    thread_safe: bool

    def segment(self, image: ImageRef, box: BBox, detection_index: int | None = None) -> list[Candidate]: ...


def image_refs(gt: GroundTruth, image_root: str | None = None) -> dict[int, ImageRef]:
    refs = {}
    for image_id, info in gt.images.items():
        path = os.path.join(image_root, info.file_name) if image_root and info.file_name else info.file_name
        refs[image_id] = ImageRef(image_id, info.width, info.height, path)
    return refs


# --- Replay ---

class ReplayBackend:
    """Serves stored detector and segmenter outputs from a COCO-results file."""

    thread_safe = True

    def __init__(self, records: dict[int, list[PredictionRecord]]):
        self._records = records

    @classmethod
    def from_file(cls, path: str, gt: GroundTruth) -> "ReplayBackend":
        return cls(read_prediction_records(path, gt.images))

    def detect(self, image: ImageRef) -> list[Detection]:
        return [r.detection for r in self._records.get(image.image_id, [])]

    def segment(self, image: ImageRef, box: BBox, detection_index: int | None = None) -> list[Candidate]:
        """Stored candidates for a prompt.

        ``detection_index`` (position in :meth:`detect` output) picks the record
        directly when that record overlaps the prompt; otherwise the record with
        the same box answers, then the one it overlaps most.
        """
        records = self._records.get(image.image_id, [])
        record = None
        if detection_index is not None and 0 <= detection_index < len(records):
            own = records[detection_index]
            if box_iou(own.detection.bbox, box) > 0:
                record = own
        if record is None:
            record = next((r for r in records if r.detection.bbox == box), None)
        if record is None and records:
            # prompt was clipped or expanded; take the stored box it overlaps most
            best = max(range(len(records)), key=lambda k: (box_iou(records[k].detection.bbox, box), -k))
            if box_iou(records[best].detection.bbox, box) > 0:
                record = records[best]
        if record is None:
            raise EmptyCandidateError(f"image {image.image_id}: no stored record for prompt {box.to_list()}")
        if record.segmentation_failed or not record.candidates:
            raise EmptyCandidateError(f"image {image.image_id}: stored record has no candidates")
        return list(record.candidates)


# --- Synthetic oracle ---

class OracleDetector:
    """GT boxes shifted right by ``shift`` px, some dropped, with seeded scores."""

    thread_safe = True

    def __init__(self, gt: GroundTruth, seed: int, shift: int = 0, drop_rate: float = 0.0, score_low: float = 0.5):
        self._by_image = perturb_gt(gt, shift, drop_rate, seed, score_low)

    def detect(self, image: ImageRef) -> list[Detection]:
        return [p.detection for p in self._by_image.get(image.image_id, [])]


class OracleSegmenter:
    """Answers a box prompt with the best-overlapping GT mask, translated by ``shift`` px.

    ``distractors`` adds dilated copies of the answer with lower quality after it.
    """

    thread_safe = True

    def __init__(self, gt: GroundTruth, shift: int = 0, distractors: int = 0):
        if distractors < 0:
            raise ValueError(f"distractors must be >= 0, got {distractors}")
        self._gt = gt
        self._shift = int(shift)
        self._distractors = int(distractors)

    def segment(self, image: ImageRef, box: BBox, detection_index: int | None = None) -> list[Candidate]:
        best, best_iou = None, 0.0
        for inst in self._gt.instances(image.image_id):
            iou = box_iou(inst.bbox.translate(self._shift, 0), box)
            if iou > best_iou:
                best, best_iou = inst, iou
        if best is None:
            raise EmptyCandidateError(f"image {image.image_id}: prompt {box.to_list()} overlaps no object")
        mask = translate_mask(self._gt.gt_mask(best), self._shift, 0)
        out = [Candidate(mask, 1.0)]
        for k in range(1, self._distractors + 1):
            out.append(Candidate(dilate(mask, k), max(0.0, round(1.0 - k * DISTRACTOR_QUALITY_STEP, 10))))
        return out


# --- External process ---

def _pump_lines(proc: subprocess.Popen, out: queue.Queue) -> None:
    """Forward each stdout line of ``proc`` to ``out``; an empty string marks EOF."""
    try:
        for line in iter(proc.stdout.readline, ""):
            out.put(line)
    except (OSError, ValueError):
        pass
    out.put("")


class ExternalProcessBackend:
    """Detector/segmenter served by child processes over newline-delimited JSON.

    One request at a time per child; ``workers`` children give parallelism.
    Response line numbers are counted per child and reported on protocol errors.
    """

    thread_safe = True

    def __init__(self, command: str | list[str], workers: int = 1, cwd: str | None = None,
                 timeout: float | None = None):
        self._argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self._argv:
            raise ConfigError("external-process backend needs a non-empty command")
        if self._argv[0] == "python":
            self._argv[0] = sys.executable
        if workers < 1:
            raise ConfigError(f"external-process workers must be >= 1, got {workers}")
        if timeout is not None and timeout <= 0:
            raise ConfigError(f"external-process timeout must be > 0 seconds, got {timeout}")
        self._cwd = cwd
        self._timeout = timeout
        self._idle: queue.Queue = queue.Queue()
        self._procs: list[subprocess.Popen] = []
        self._lines: dict[int, int] = {}
        self._responses: dict[int, queue.Queue] = {}
        self._readers: dict[int, threading.Thread] = {}
        self._lock = threading.Lock()
        for _ in range(workers):
            self._idle.put(self._spawn())
        logger.info(f"Started {workers} backend worker(s): {' '.join(self._argv)}")

    def _spawn(self) -> subprocess.Popen:
        try:
            proc = subprocess.Popen(
                self._argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
                cwd=self._cwd,
            )
        except OSError as e:
            raise BackendError(f"cannot start backend process {self._argv[0]}: {e}")
        responses: queue.Queue = queue.Queue()
        reader = threading.Thread(target=_pump_lines, args=(proc, responses), daemon=True)
        reader.start()
        with self._lock:
            self._procs.append(proc)
            self._responses[proc.pid] = responses
            self._readers[proc.pid] = reader
        return proc

    def _replace(self, proc: subprocess.Popen) -> subprocess.Popen:
        """Kill a child that missed its deadline and start a fresh one in its place."""
        proc.kill()
        proc.wait()
        with self._lock:
            self._procs.remove(proc)
        self._finish(proc)
        return self._spawn()

    def _request(self, payload: dict, image_id: int) -> dict:
        proc = self._idle.get()
        try:
            try:
                proc.stdin.write(json.dumps(payload) + "\n")
                proc.stdin.flush()
                line = self._responses[proc.pid].get(timeout=self._timeout)
            except (BrokenPipeError, OSError) as e:
                raise BackendError(f"backend process {proc.pid} is gone: {e}", image_id)
            except queue.Empty:
                pid = proc.pid
                proc = self._replace(proc)
                raise BackendError(f"backend process {pid} gave no response within {self._timeout}s", image_id)
            if not line:
                self._responses[proc.pid].put("")
                raise BackendError(f"backend process {proc.pid} closed its output (exit code {proc.poll()})", image_id)
            with self._lock:
                line_number = self._lines.get(proc.pid, 0) + 1
                self._lines[proc.pid] = line_number
        finally:
            self._idle.put(proc)

        try:
            response = json.loads(line)
        except json.JSONDecodeError as e:
            raise BackendProtocolError(f"invalid JSON ({e.msg}): {line.strip()[:80]!r}", line_number, image_id)
        if not isinstance(response, dict):
            raise BackendProtocolError("response is not a JSON object", line_number, image_id)
        if "error" in response:
            raise BackendError(f"backend reported: {response['error']}", image_id)
        response["_line"] = line_number
        return response

    def detect(self, image: ImageRef) -> list[Detection]:
        response = self._request({"type": "detect", "image": image.path, "image_id": image.image_id}, image.image_id)
        line = response["_line"]
        items = response.get("detections")
        if not isinstance(items, list):
            raise BackendProtocolError("missing 'detections' list", line, image.image_id)
        out = []
        for item in items:
            try:
                out.append(Detection(image.image_id, BBox.from_list(item["bbox"]), float(item["score"])))
            except (KeyError, TypeError, ValueError) as e:
                raise BackendProtocolError(f"bad detection {item!r}: {e}", line, image.image_id)
        return out

    def segment(self, image: ImageRef, box: BBox, detection_index: int | None = None) -> list[Candidate]:
        request = {"type": "segment", "image": image.path, "image_id": image.image_id, "bbox": box.to_list()}
        if detection_index is not None:
            request["detection_index"] = detection_index
        response = self._request(request, image.image_id)
        line = response["_line"]
        items = response.get("candidates")
        if not isinstance(items, list):
            raise BackendProtocolError("missing 'candidates' list", line, image.image_id)
        out = []
        for item in items:
            try:
                rle = RleMask.from_dict(item["segmentation"])
                quality = float(item.get("quality", 1.0))
            except (KeyError, TypeError, ValueError, MalformedRleError) as e:
                raise BackendProtocolError(f"bad candidate: {e}", line, image.image_id)
            if (rle.height, rle.width) != (image.height, image.width):
                raise BackendProtocolError(
                    f"candidate size [{rle.height}, {rle.width}] does not match image [{image.height}, {image.width}]",
                    line, image.image_id,
                )
            if not 0.0 <= quality <= 1.0:
                raise BackendProtocolError(f"candidate quality {quality} outside [0, 1]", line, image.image_id)
            out.append(Candidate(rle_decode(rle), quality))
        if not out:
            raise EmptyCandidateError(f"image {image.image_id}: backend returned no candidates")
        return out

    def _finish(self, proc: subprocess.Popen) -> None:
        try:
            if proc.stdin:
                proc.stdin.close()
        except OSError:
            pass
        reader = self._readers.pop(proc.pid, None)
        if reader is not None:
            reader.join(timeout=5)
        if proc.stdout:
            proc.stdout.close()
        self._responses.pop(proc.pid, None)

    def close(self) -> None:
        for proc in self._procs:
            try:
                if proc.stdin:
                    proc.stdin.close()
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                logger.warning(f"Backend process {proc.pid} did not exit - killing")
                proc.kill()
                proc.wait()
            finally:
                self._finish(proc)
        self._procs.clear()

    def __enter__(self) -> "ExternalProcessBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- Factories ---

def _require_seed(descriptor: BackendDescriptor, config: RunConfig) -> int:
    seed = descriptor.params.get("seed", config.seed)
    if seed is None:
        raise ConfigError("synthetic-oracle backend needs a seed (top-level 'seed' or backend 'seed')")
    return int(seed)


def make_detector(descriptor: BackendDescriptor, config: RunConfig, gt: GroundTruth):
    params = descriptor.params
    if descriptor.kind == "replay":
        return ReplayBackend.from_file(params["predictions"], gt)
    if descriptor.kind == "synthetic-oracle":
        return OracleDetector(
            gt, _require_seed(descriptor, config),
            shift=int(params.get("shift", 0)),
            drop_rate=float(params.get("drop_rate", 0.0)),
            score_low=float(params.get("score_low", 0.5)),
        )
    return ExternalProcessBackend(params["command"], workers=int(params.get("workers", 1)),
                                  timeout=params.get("timeout"))


def make_segmenter(descriptor: BackendDescriptor, config: RunConfig, gt: GroundTruth):
    params = descriptor.params
    if descriptor.kind == "replay":
        return ReplayBackend.from_file(params["predictions"], gt)
    if descriptor.kind == "synthetic-oracle":
        shift = params.get("shift")
        if shift is None and config.detector is not None and config.detector.kind == "synthetic-oracle":
            # answer where the oracle detector put the box
            shift = config.detector.params.get("shift", 0)
        return OracleSegmenter(gt, shift=int(shift or 0), distractors=int(params.get("distractors", 0)))
    return ExternalProcessBackend(params["command"], workers=int(params.get("workers", 1)),
                                  timeout=params.get("timeout"))


def close_backend(backend) -> None:
    close = getattr(backend, "close", None)
    if close is not None:
        close()
