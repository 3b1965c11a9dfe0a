"""Nuclei identification: global Otsu threshold, 4-connected labelling, size filter, hole filling."""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage

from config import MAX_NUCLEUS_AREA, MIN_NUCLEUS_AREA, REFERENCE_SIDE
from errors import ConfigError, DegenerateImage, ShapeMismatch
from image_io import GrayImage

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 256
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SegConfig:
    min_area: float = MIN_NUCLEUS_AREA
    max_area: float = MAX_NUCLEUS_AREA
    polarity: str = "dark"

    def __post_init__(self):
        if self.polarity not in ("dark", "bright"):
            raise ConfigError(f"polarity must be 'dark' or 'bright', got {self.polarity!r}")
        if self.min_area < 0 or self.max_area < self.min_area:
            raise ConfigError(f"Invalid area range [{self.min_area}, {self.max_area}]")

    def scaled_for(self, side: int) -> "SegConfig":
        """Rescale the area bounds from the 1024 px field of view to ``side``."""
        factor = (side / REFERENCE_SIDE) ** 2
        min_area, max_area = self.min_area * factor, self.max_area * factor
        if min_area < 1.0:
            logger.warning("min_area %.3g at side %d clamped to 1 px", min_area, side)
            min_area = 1.0
        return SegConfig(min_area, max(max_area, min_area), self.polarity)


@dataclass(frozen=True, eq=False)
class NucleusObject:
    id: int
    pixels: np.ndarray  # (N, 2) row, col
    centroid: Tuple[float, float]  # x, y
    mean_gray: float
    pixel_intensities: np.ndarray

    @property
    def area(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    objects: Tuple[NucleusObject, ...]
    threshold_used: float
    source_id: str = ""
    shape: Tuple[int, int] = field(default=(0, 0))

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for obj in self.objects:
            out[obj.pixels[:, 0], obj.pixels[:, 1]] = True
        return out

    def label_image(self) -> np.ndarray:
        """Debug raster: object k gets gray value (k mod 255) + 1, background 0."""
        out = np.zeros(self.shape, dtype=np.uint8)
        for obj in self.objects:
            out[obj.pixels[:, 0], obj.pixels[:, 1]] = (obj.id % 255) + 1
        return out


def gray_histogram(img: GrayImage) -> np.ndarray:
    bins = np.clip(np.floor(img.values), 0, HISTOGRAM_BINS - 1).astype(np.intp)
    return np.bincount(bins.ravel(), minlength=HISTOGRAM_BINS)


def otsu_threshold(img: GrayImage) -> float:
    """Threshold t maximising between-class variance; class 0 holds bins below t.

    Ties resolve to the smallest t.
    """
    hist = gray_histogram(img).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImage(f"Image {img.source_id!r} has a single intensity level")

    levels = np.arange(HISTOGRAM_BINS, dtype=np.float64)
    n0 = np.concatenate(([0.0], np.cumsum(hist)[:-1]))
    s0 = np.concatenate(([0.0], np.cumsum(hist * levels)[:-1]))
    total, total_sum = hist.sum(), (hist * levels).sum()
    n1, s1 = total - n0, total_sum - s0

    with np.errstate(divide="ignore", invalid="ignore"):
        between = n0 * n1 * (s0 / n0 - s1 / n1) ** 2
    between[(n0 == 0) | (n1 == 0)] = -np.inf
    return float(np.argmax(between))


def segment_nuclei(img: GrayImage, cfg: SegConfig = SegConfig()) -> SegmentationResult:
    threshold = otsu_threshold(img)
    values = img.values
    foreground = values < threshold if cfg.polarity == "dark" else values >= threshold

    labels, count = ndimage.label(foreground, structure=FOUR_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    keep = (sizes >= cfg.min_area) & (sizes <= cfg.max_area)
    keep[0] = False
    kept = np.flatnonzero(keep)
    slices = ndimage.find_objects(labels)

    filled = {}
    for lab in kept:
        region = slices[lab - 1]
        filled[lab] = (region, ndimage.binary_fill_holes(labels[region] == lab))

    # Components sitting inside another component's hole are absorbed by it
    claimed = np.zeros(values.shape, dtype=np.int64)
    survivors = []
    for lab in sorted(kept, key=lambda l: (-int(filled[l][1].sum()), l)):
        region, mask = filled[lab]
        if np.any(claimed[region][labels[region] == lab]):
            continue
        claimed[region][mask] = lab
        survivors.append(lab)

    objects = []
    for new_id, lab in enumerate(sorted(survivors), start=1):
        region, mask = filled[lab]
        local = np.argwhere(mask)
        pixels = local + np.array([region[0].start, region[1].start])
        intensities = values[pixels[:, 0], pixels[:, 1]].astype(np.float64)
        objects.append(NucleusObject(
            id=new_id,
            pixels=pixels,
            centroid=(float(pixels[:, 1].mean()), float(pixels[:, 0].mean())),
            mean_gray=float(intensities.mean()),
            pixel_intensities=intensities,
        ))

    logger.debug(
        "%s: threshold %.0f, %d components, %d nuclei kept",
        img.source_id, threshold, count, len(objects),
    )
    return SegmentationResult(tuple(objects), threshold, img.source_id, values.shape)


def image_occupied_area(seg: SegmentationResult, img: GrayImage) -> float:
    """Fraction of the image covered by nucleus pixels."""
    if tuple(seg.shape) != tuple(img.values.shape):
        raise ShapeMismatch(f"Segmentation shape {seg.shape} != image shape {img.values.shape}")
    covered = sum(obj.area for obj in seg.objects)
    return covered / float(img.width * img.height)
