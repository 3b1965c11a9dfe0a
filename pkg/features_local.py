"""Per-nucleus measurements and the 45-value local feature block.

Block layout (all statistics in the order mean, std, disorder, minmax):
  count block   nuclei count, area statistics                      5 values
  radial block  mean intensity and ring 1..4 intensity statistics  20 values
  shape block   minor axis, major axis, eccentricity, orientation,
                solidity statistics                                20 values
"""

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull

from errors import ConfigError, EmptyInput, NegativeValue, NoNuclei, ShapeMismatch
from image_io import GrayImage
from segmentation import NucleusObject, SegmentationResult

logger = logging.getLogger(__name__)

RING_COUNT = 4
STAT_NAMES = ("mean", "std", "disorder", "minmax")
RADIAL_NAMES = ("intensity", "ring1_intensity", "ring2_intensity", "ring3_intensity", "ring4_intensity")
SHAPE_NAMES = ("minor_axis", "major_axis", "eccentricity", "orientation", "solidity")
DUMP_COLUMNS = [
    "id", "cx", "cy", "area", "minor", "major", "ecc", "orient", "solidity",
    "mean_int", "ring1", "ring2", "ring3", "ring4",
]

PIXEL_EXTENT_VARIANCE = 1.0 / 12.0
# Shifts orientation from (-pi/2, pi/2] into (0, pi] so it can be aggregated
ORIENTATION_OFFSET = math.pi / 2


def stat_columns(prefix: str) -> List[str]:
    return [f"{prefix}_{stat}" for stat in STAT_NAMES]


LOCAL_COLUMNS = (
    ["nuclei_count"]
    + stat_columns("area")
    + [c for name in RADIAL_NAMES for c in stat_columns(name)]
    + [c for name in SHAPE_NAMES for c in stat_columns(name)]
)


class StatVector(NamedTuple):
    mean: float
    std: float
    disorder: float
    minmax: float


class ShapeMeasures(NamedTuple):
    minor_axis: float
    major_axis: float
    eccentricity: float
    orientation: float
    solidity: float


class RadialMeasures(NamedTuple):
    mean_intensity: float
    ring_means: Tuple[float, float, float, float]


def disorder(mean: float, std: float, convention: str = "ratio") -> float:
    """1 - 1/(1 + mean/std), or with std/mean under the ``cv`` convention."""
    if convention == "ratio":
        if std > 0:
            return 1.0 - 1.0 / (1.0 + mean / std)
        return 1.0 if mean > 0 else 0.0
    if convention == "cv":
        if mean > 0:
            return 1.0 - 1.0 / (1.0 + std / mean)
        return 0.0
    raise ConfigError(f"Unknown disorder convention {convention!r}")


def aggregate(values: Sequence[float], convention: str = "ratio") -> StatVector:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("Cannot aggregate an empty list")
    if np.any(v < 0):
        raise NegativeValue(f"aggregate expects non-negative values, min is {v.min()}")

    mean = float(v.mean())
    std = float(v.std())
    high = float(v.max())
    minmax = float(v.min()) / high if high > 0 else 1.0
    return StatVector(mean, std, disorder(mean, std, convention), minmax)


def shape_measures(obj: NucleusObject) -> ShapeMeasures:
    rows = obj.pixels[:, 0].astype(np.float64)
    cols = obj.pixels[:, 1].astype(np.float64)
    dx, dy = cols - cols.mean(), rows - rows.mean()
    mu20 = float(np.mean(dx * dx)) + PIXEL_EXTENT_VARIANCE
    mu02 = float(np.mean(dy * dy)) + PIXEL_EXTENT_VARIANCE
    mu11 = float(np.mean(dx * dy))

    mid = (mu20 + mu02) / 2.0
    spread = math.hypot((mu20 - mu02) / 2.0, mu11)
    lam1 = mid + spread
    lam2 = max(mid - spread, 0.0)
    eccentricity = math.sqrt(max(0.0, 1.0 - lam2 / lam1)) if lam1 > 0 else 0.0

    orientation = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    if orientation <= -math.pi / 2:
        orientation += math.pi

    return ShapeMeasures(
        minor_axis=4.0 * math.sqrt(lam2),
        major_axis=4.0 * math.sqrt(lam1),
        eccentricity=eccentricity,
        orientation=orientation,
        solidity=solidity(obj.pixels),
    )


def solidity(pixels: np.ndarray) -> float:
    """Pixel count over the convex hull of every pixel's four corners."""
    corners = np.concatenate([
        pixels[:, ::-1] + offset for offset in ((0, 0), (1, 0), (0, 1), (1, 1))
    ]).astype(np.float64)
    corners = np.unique(corners, axis=0)
    hull_area = ConvexHull(corners).volume
    return min(1.0, pixels.shape[0] / hull_area)


def radial_measures(obj: NucleusObject) -> RadialMeasures:
    intensities = np.asarray(obj.pixel_intensities, dtype=np.float64)
    cx, cy = obj.centroid
    dist = np.hypot(obj.pixels[:, 1] - cx, obj.pixels[:, 0] - cy)
    far = dist.max()
    radius = dist / far if far > 0 else np.zeros_like(dist)
    ring = np.minimum(np.floor(RING_COUNT * radius), RING_COUNT - 1).astype(np.intp)

    overall = float(intensities.mean())
    ring_means = tuple(
        float(intensities[ring == k].mean()) if np.any(ring == k) else overall
        for k in range(RING_COUNT)
    )
    return RadialMeasures(overall, ring_means)


@dataclass(frozen=True)
class ObjectMeasurement:
    id: int
    centroid: Tuple[float, float]
    area: int
    shape: ShapeMeasures
    radial: RadialMeasures

    def dump_row(self) -> list:
        return [
            self.id, self.centroid[0], self.centroid[1], self.area,
            self.shape.minor_axis, self.shape.major_axis, self.shape.eccentricity,
            self.shape.orientation, self.shape.solidity,
            self.radial.mean_intensity, *self.radial.ring_means,
        ]


def object_measurements(seg: SegmentationResult) -> List[ObjectMeasurement]:
    return [
        ObjectMeasurement(obj.id, obj.centroid, obj.area, shape_measures(obj), radial_measures(obj))
        for obj in seg.objects
    ]


def measurements_frame(measurements: Sequence[ObjectMeasurement]) -> pd.DataFrame:
    """Per-object dump table (``--dump-objects``)."""
    return pd.DataFrame([m.dump_row() for m in measurements], columns=DUMP_COLUMNS)


def _check_shape(seg: SegmentationResult, img: GrayImage) -> None:
    if tuple(seg.shape) != tuple(img.values.shape):
        raise ShapeMismatch(f"Segmentation shape {seg.shape} != image shape {img.values.shape}")


def block_from_measurements(
    measurements: Sequence[ObjectMeasurement], convention: str = "ratio"
) -> np.ndarray:
    if not measurements:
        raise NoNuclei("No nuclei to aggregate")

    block = [float(len(measurements))]
    block.extend(aggregate([m.area for m in measurements], convention))

    radial = np.array([[m.radial.mean_intensity, *m.radial.ring_means] for m in measurements])
    for column in radial.T:
        block.extend(aggregate(column, convention))

    shape = np.array([list(m.shape) for m in measurements])
    shape[:, SHAPE_NAMES.index("orientation")] += ORIENTATION_OFFSET
    for column in shape.T:
        block.extend(aggregate(column, convention))
    return np.asarray(block, dtype=np.float64)


def local_feature_block(
    seg: SegmentationResult, img: GrayImage, convention: str = "ratio"
) -> np.ndarray:
    """The 45-value count, radial and shape block for one tile."""
    _check_shape(seg, img)
    if not seg.objects:
        raise NoNuclei(f"Tile {seg.source_id!r} has no nuclei")
    return block_from_measurements(object_measurements(seg), convention)
