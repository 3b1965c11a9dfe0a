"""Translation/rotation sampling grid around a source location, with blank-region rejection.

Each variant translates the centre by (dx, dy) and then rotates about the
new centre. At the default grid that is 5 x 5 translations x 3 rotations,
75 variants per origin.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from config import (
    BLANK_LUMINANCE,
    GRID_DELTA,
    GRID_K_MAX,
    GRID_SIDE,
    GRID_THETAS,
    MAX_BLANK_FRACTION,
    get_thread_count,
)
from errors import ConfigError
from file_formats import Label
from image_io import MIN_SIDE, Rejection, Tile, Transform, extract_region

logger = logging.getLogger(__name__)

OUT_OF_BOUNDS = "OutOfBounds"
BLANK = "Blank"
PAD_WHITE = 255


@dataclass(frozen=True)
class AugmentationGrid:
    delta: int = GRID_DELTA
    k_max: int = GRID_K_MAX
    thetas: Tuple[float, ...] = GRID_THETAS
    side: int = GRID_SIDE

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        if self.delta <= 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.k_max < 0:
            raise ConfigError(f"k_max must be >= 0, got {self.k_max}")
        if not self.thetas:
            raise ConfigError("At least one rotation angle is required")
        bad = [t for t in self.thetas if not 0.0 <= t < 360.0]
        if bad:
            raise ConfigError(f"Rotation angles must lie in [0, 360): {bad}")
        if self.side < MIN_SIDE:
            raise ConfigError(f"Output side must be at least {MIN_SIDE}, got {self.side}")

    @property
    def offsets(self) -> Tuple[int, ...]:
        reach = self.k_max * self.delta
        return tuple(range(-reach, reach + 1, self.delta))

    @property
    def variant_count(self) -> int:
        return (2 * self.k_max + 1) ** 2 * len(self.thetas)


@dataclass(frozen=True)
class RejectionPolicy:
    max_blank_fraction: float = MAX_BLANK_FRACTION
    blank_luminance: int = BLANK_LUMINANCE
    allow_out_of_bounds: bool = False

    def __post_init__(self):
        if not 0.0 <= self.max_blank_fraction <= 1.0:
            raise ConfigError(f"max_blank_fraction must lie in [0, 1], got {self.max_blank_fraction}")


class Variant(NamedTuple):
    index: int
    center: Tuple[float, float]
    dx: int
    dy: int
    theta: float


@dataclass(frozen=True)
class RejectionRecord:
    source_id: str
    dx: int
    dy: int
    theta: float
    reason: str
    detail: str = ""


@dataclass
class AugmentationResult:
    accepted: List[Tile] = field(default_factory=list)
    rejections: List[RejectionRecord] = field(default_factory=list)


def enumerate_variants(grid: AugmentationGrid, origin: Tuple[float, float]) -> List[Variant]:
    """x offsets x y offsets x rotations, in that nesting order."""
    xc, yc = origin
    return [
        Variant(index, (xc + dx, yc + dy), dx, dy, theta)
        for index, (dx, dy, theta) in enumerate(
            itertools.product(grid.offsets, grid.offsets, grid.thetas)
        )
    ]


def blank_fraction(tile: Tile, blank_luminance: int = BLANK_LUMINANCE) -> float:
    """Share of pixels whose darkest channel is still at least ``blank_luminance``."""
    return float(np.mean(tile.pixels.min(axis=2) >= blank_luminance))


def variant_tile_id(source_id: str, dx: int, dy: int, theta: float) -> str:
    return f"{source_id}_dx{dx:+d}_dy{dy:+d}_r{theta:g}"


def sample_augmented(
    context: Tile,
    grid: AugmentationGrid,
    origin: Tuple[float, float],
    policy: RejectionPolicy = RejectionPolicy(),
    source_id: str = "",
    patient_id: Optional[str] = None,
    label: Optional[Label] = None,
    workers: Optional[int] = None,
) -> AugmentationResult:
    """Extract every grid variant around ``origin`` and split them into accepted and rejected."""
    source_id = source_id or context.id
    patient_id = context.patient_id if patient_id is None else patient_id
    label = context.label if label is None else label
    pad_value = PAD_WHITE if policy.allow_out_of_bounds else None

    def run(variant: Variant):
        region = extract_region(
            context, variant.center, grid.side, variant.theta,
            allowed_thetas=grid.thetas, pad_value=pad_value,
        )
        if isinstance(region, Rejection):
            return region
        fraction = blank_fraction(region, policy.blank_luminance)
        if fraction > policy.max_blank_fraction:
            return Rejection(BLANK, f"blank fraction {fraction:.4f}")
        return region

    variants = enumerate_variants(grid, origin)
    with ThreadPoolExecutor(max_workers=workers or get_thread_count()) as pool:
        outcomes = list(pool.map(run, variants))

    result = AugmentationResult()
    for variant, outcome in zip(variants, outcomes):
        if isinstance(outcome, Rejection):
            logger.debug(
                "%s dx=%+d dy=%+d r=%g rejected: %s", source_id,
                variant.dx, variant.dy, variant.theta, outcome.reason,
            )
            result.rejections.append(RejectionRecord(
                source_id, variant.dx, variant.dy, variant.theta, outcome.reason, outcome.detail
            ))
            continue
        result.accepted.append(outcome.replace(
            id=variant_tile_id(source_id, variant.dx, variant.dy, variant.theta),
            patient_id=patient_id,
            label=label,
            source_id=source_id,
            transform=Transform(variant.dx, variant.dy, variant.theta),
        ))

    logger.info(
        "%s: %d of %d variants accepted", source_id, len(result.accepted), len(variants)
    )
    return result
