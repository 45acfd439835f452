"""Shared test fixtures: synthetic datasets, a fake millisecond clock, small mask builders."""

import os

import numpy as np
import pytest

from src.dataset import GroundTruth, GtInstance, ImageInfo, generate_dataset
from src.raster import BBox, BinaryMask, Polygon

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


def rect_mask(width: int, height: int, x: int, y: int, w: int, h: int) -> BinaryMask:
    arr = np.zeros((height, width), dtype=np.uint8)
    arr[max(y, 0):max(y + h, 0), max(x, 0):max(x + w, 0)] = 1
    return BinaryMask(arr)


def rect_instance(instance_id: int, image_id: int, x: int, y: int, w: int, h: int,
                  scene: str = "unknown") -> GtInstance:
    box = BBox(x, y, w, h)
    return GtInstance(instance_id, image_id, box, (Polygon.from_bbox(box),), scene)


class FakeClock:
    """Integer-millisecond clock advanced explicitly by fake backends."""

    def __init__(self):
        self.t = 0

    def now_ms(self) -> int:
        return self.t

    def advance(self, ms: int) -> None:
        self.t += ms


@pytest.fixture
def fake_clock():
    return FakeClock()


@pytest.fixture(scope="session")
def seed7_dataset():
    """20 images, 1-4 8x4 ships each, seed 7."""
    gt, _ = generate_dataset(
        n_images=20, width=64, height=64, ships=(1, 4), ship_width=(8, 8), ship_height=(4, 4),
        min_separation=4, scene="mixed", seed=7,
    )
    return gt


@pytest.fixture
def two_ship_gt():
    """One 32x32 image with two well separated 8x4 ships."""
    images = {1: ImageInfo(1, 32, 32, "a.pgm")}
    return GroundTruth(images, [rect_instance(1, 1, 2, 2, 8, 4), rect_instance(2, 1, 16, 20, 8, 4)],
                       scene_tags={1: "offshore"})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
