"""Seeded synthetic H&E-like tiles with ground-truth nuclei.

The morphology is a caricature, not a pathology simulator. CribriformLike
tiles hold one large epithelial disk of scattered dark nuclei perforated by
several round lumina; NonCribriformLike tiles hold separate small glands,
each a single lumen ringed by tangential nuclei. Nuclei never touch each
other or the tile border, so segmentation can recover them one for one.
All geometry is given at a 256 px side and scales with the tile.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import get_thread_count
from errors import ConfigError, InfeasibleGeometry
from evaluation import write_sets_config
from features_spatial import mst
from file_formats import Label, ManifestRow, write_manifest
from image_io import MIN_SIDE, Tile, save_tile

logger = logging.getLogger(__name__)

BASE_SIDE = 256
NUCLEUS_RGB = (60, 35, 100)
EPITHELIUM_RGB = (225, 190, 215)
STROMA_RGB = (240, 205, 225)
LUMEN_RGB = (250, 245, 248)
NUCLEUS_AXES = (3.5, 2.5)
PLACEMENT_ATTEMPTS = 400
# Seeds of consecutive synthetic patients are this far apart
PATIENT_SEED_STRIDE = 100_000


class SynthClass(str, Enum):
    CRIBRIFORM_LIKE = "CribriformLike"
    NON_CRIBRIFORM_LIKE = "NonCribriformLike"

    @property
    def label(self) -> Label:
        return Label.CRIBRIFORM if self is SynthClass.CRIBRIFORM_LIKE else Label.NON_CRIBRIFORM


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    synth_class: SynthClass
    side: int = BASE_SIDE
    n_glands: int = 1
    nuclei_per_gland: int = 40
    lumina_per_gland: int = 4
    noise_sigma: float = 4.0
    background_rgb: Tuple[int, int, int] = STROMA_RGB
    nucleus_rgb: Tuple[int, int, int] = NUCLEUS_RGB
    epithelium_rgb: Tuple[int, int, int] = EPITHELIUM_RGB
    lumen_rgb: Tuple[int, int, int] = LUMEN_RGB
    patient_id: str = ""
    tile_id: str = ""

    def __post_init__(self):
        if self.side < MIN_SIDE:
            raise ConfigError(f"Synthetic tiles need side >= {MIN_SIDE}, got {self.side}")
        if self.n_glands < 1 or self.nuclei_per_gland < 1:
            raise ConfigError("n_glands and nuclei_per_gland must be positive")
        if self.synth_class is SynthClass.CRIBRIFORM_LIKE and self.lumina_per_gland < 3:
            raise ConfigError("CribriformLike glands need at least 3 lumina")
        if self.synth_class is SynthClass.NON_CRIBRIFORM_LIKE and self.lumina_per_gland != 1:
            raise ConfigError("NonCribriformLike glands have exactly 1 lumen")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def default_spec(synth_class: SynthClass, seed: int, patient_id: str = "", side: int = BASE_SIDE) -> SynthSpec:
    if synth_class is SynthClass.CRIBRIFORM_LIKE:
        return SynthSpec(seed, synth_class, side, n_glands=1, nuclei_per_gland=40, lumina_per_gland=4,
                         patient_id=patient_id)
    return SynthSpec(seed, synth_class, side, n_glands=3, nuclei_per_gland=14, lumina_per_gland=1,
                     patient_id=patient_id)


@dataclass
class SynthResult:
    tile: Tile
    mask: np.ndarray
    nucleus_count: int
    label: Label
    centers: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


class _Canvas:
    def __init__(self, side: int, background):
        self.side = side
        self.rgb = np.empty((side, side, 3), dtype=np.float64)
        self.rgb[:] = background
        self.nuclei = np.zeros((side, side), dtype=bool)
        self.rows, self.cols = np.mgrid[0:side, 0:side]

    def disk(self, cx: float, cy: float, radius: float, color) -> None:
        inside = (self.cols - cx) ** 2 + (self.rows - cy) ** 2 <= radius * radius
        self.rgb[inside] = color

    def ellipse_pixels(self, cx, cy, a, b, phi) -> np.ndarray:
        reach = int(math.ceil(a)) + 1
        r0, r1 = int(math.floor(cy)) - reach, int(math.floor(cy)) + reach + 2
        c0, c1 = int(math.floor(cx)) - reach, int(math.floor(cx)) + reach + 2
        if r0 < 2 or c0 < 2 or r1 > self.side - 2 or c1 > self.side - 2:
            return np.zeros((0, 2), dtype=np.intp)
        rows, cols = np.mgrid[r0:r1, c0:c1]
        dx, dy = cols - cx, rows - cy
        u = (dx * math.cos(phi) + dy * math.sin(phi)) / a
        v = (-dx * math.sin(phi) + dy * math.cos(phi)) / b
        inside = u * u + v * v <= 1.0
        return np.stack([rows[inside], cols[inside]], axis=1)

    def try_nucleus(self, cx, cy, a, b, phi, color) -> bool:
        """Stamp a nucleus unless it would overlap or 4-touch another one."""
        pixels = self.ellipse_pixels(cx, cy, a, b, phi)
        if pixels.shape[0] == 0:
            return False
        top, left = pixels.min(axis=0) - 1
        bottom, right = pixels.max(axis=0) + 2
        window = (slice(top, bottom), slice(left, right))
        stamp = np.zeros((bottom - top, right - left), dtype=bool)
        stamp[pixels[:, 0] - top, pixels[:, 1] - left] = True
        if np.any(ndimage.binary_dilation(stamp) & self.nuclei[window]):
            return False
        self.nuclei[window] |= stamp
        self.rgb[window][stamp] = color
        return True


def _place_circles(rng, count, radius, region_center, region_radius, gap, side, margin) -> List[Tuple[float, float]]:
    """Rejection-sample non-overlapping circle centres inside a disk (or the whole tile)."""
    centers: List[Tuple[float, float]] = []
    for _ in range(PLACEMENT_ATTEMPTS * count):
        if len(centers) == count:
            break
        if region_center is None:
            x, y = rng.uniform(margin + radius, side - margin - radius, size=2)
        else:
            r = region_radius * math.sqrt(rng.uniform())
            t = rng.uniform(0, 2 * math.pi)
            x, y = region_center[0] + r * math.cos(t), region_center[1] + r * math.sin(t)
        if all(math.hypot(x - px, y - py) >= 2 * radius + gap for px, py in centers):
            centers.append((x, y))
    if len(centers) < count:
        raise InfeasibleGeometry(f"Could only place {len(centers)} of {count} circles of radius {radius:.1f}")
    return centers


def _cribriform(spec: SynthSpec, canvas: _Canvas, rng, unit: float) -> List[Tuple[float, float]]:
    gland_radius = 0.38 * spec.side / math.sqrt(spec.n_glands)
    if spec.n_glands > 1:
        gland_radius *= 0.8
    lumen_radius = 0.24 * gland_radius
    glands = _place_circles(rng, spec.n_glands, gland_radius, None, 0, 4 * unit, spec.side, 4 * unit)
    a, b = (axis * unit for axis in NUCLEUS_AXES)
    spacing = 12 * unit

    centers = []
    for gx, gy in glands:
        canvas.disk(gx, gy, gland_radius, spec.epithelium_rgb)
        lumina = _place_circles(
            rng, spec.lumina_per_gland, lumen_radius, (gx, gy),
            gland_radius - lumen_radius - 8 * unit, 8 * unit, spec.side, 0,
        )
        for lx, ly in lumina:
            canvas.disk(lx, ly, lumen_radius, spec.lumen_rgb)

        placed = []
        for _ in range(PLACEMENT_ATTEMPTS * spec.nuclei_per_gland):
            if len(placed) == spec.nuclei_per_gland:
                break
            r = (gland_radius - 6 * unit) * math.sqrt(rng.uniform())
            t = rng.uniform(0, 2 * math.pi)
            x, y = gx + r * math.cos(t), gy + r * math.sin(t)
            if any(math.hypot(x - lx, y - ly) < lumen_radius + 5 * unit for lx, ly in lumina):
                continue
            if any(math.hypot(x - px, y - py) < spacing for px, py in placed):
                continue
            if canvas.try_nucleus(x, y, a, b, rng.uniform(0, math.pi), spec.nucleus_rgb):
                placed.append((x, y))
        if len(placed) < spec.nuclei_per_gland:
            raise InfeasibleGeometry(
                f"Placed {len(placed)} of {spec.nuclei_per_gland} nuclei in a gland of radius {gland_radius:.1f}"
            )
        centers.extend(placed)
    return centers


def _single_lumen(spec: SynthSpec, canvas: _Canvas, rng, unit: float) -> List[Tuple[float, float]]:
    a, b = (axis * unit for axis in NUCLEUS_AXES)
    spacing = 9 * unit
    ring_radius = max(spacing * spec.nuclei_per_gland / (2 * math.pi), 10 * unit)
    lumen_radius = ring_radius - 4 * unit
    outer_radius = ring_radius + 6 * unit
    glands = _place_circles(rng, spec.n_glands, outer_radius, None, 0, 6 * unit, spec.side, 4 * unit)

    centers = []
    for gx, gy in glands:
        canvas.disk(gx, gy, outer_radius, spec.epithelium_rgb)
        canvas.disk(gx, gy, lumen_radius, spec.lumen_rgb)
        phase = rng.uniform(0, 2 * math.pi)
        for k in range(spec.nuclei_per_gland):
            t = phase + 2 * math.pi * k / spec.nuclei_per_gland
            x, y = gx + ring_radius * math.cos(t), gy + ring_radius * math.sin(t)
            # Major axis runs along the ring
            if not canvas.try_nucleus(x, y, a, b, t + math.pi / 2, spec.nucleus_rgb):
                raise InfeasibleGeometry(f"Ring nucleus {k} of gland at ({gx:.0f}, {gy:.0f}) collides")
            centers.append((x, y))
    return centers


def generate(spec: SynthSpec) -> SynthResult:
    """Render one tile; identical specs give byte-identical tiles."""
    rng = np.random.default_rng(spec.seed)
    unit = spec.side / BASE_SIDE
    canvas = _Canvas(spec.side, spec.background_rgb)
    if spec.synth_class is SynthClass.CRIBRIFORM_LIKE:
        centers = _cribriform(spec, canvas, rng, unit)
    else:
        centers = _single_lumen(spec, canvas, rng, unit)

    rgb = canvas.rgb
    if spec.noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, spec.noise_sigma, size=rgb.shape)
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    label = spec.synth_class.label
    tile_id = spec.tile_id or f"synth_{spec.seed}"
    tile = Tile(pixels, id=tile_id, patient_id=spec.patient_id, label=label)
    return SynthResult(tile, canvas.nuclei, len(centers), label, centers)


# Dataset writer -----------------------------------------------------------

@dataclass(frozen=True)
class DatasetPlan:
    patients_per_set: int = 3
    tiles_per_class: int = 200
    side: int = BASE_SIDE
    seed: int = 0
    noise_sigma: Optional[float] = None

    @property
    def patients(self) -> List[str]:
        return [f"P{i + 1:02d}" for i in range(3 * self.patients_per_set)]

    @property
    def sets(self) -> List[List[str]]:
        p = self.patients
        k = self.patients_per_set
        return [p[0:k], p[k:2 * k], p[2 * k:3 * k]]


def dataset_specs(plan: DatasetPlan) -> List[SynthSpec]:
    specs = []
    for p_index, patient in enumerate(plan.patients):
        for c_index, synth_class in enumerate(SynthClass):
            short = "crib" if synth_class is SynthClass.CRIBRIFORM_LIKE else "noncrib"
            for k in range(plan.tiles_per_class):
                seed = plan.seed + p_index * PATIENT_SEED_STRIDE + c_index * (PATIENT_SEED_STRIDE // 2) + k
                spec = replace(default_spec(synth_class, seed, patient, plan.side), tile_id=f"{patient}_{short}_{k:04d}")
                if plan.noise_sigma is not None:
                    spec = replace(spec, noise_sigma=plan.noise_sigma)
                specs.append(spec)
    return specs


def write_dataset(out_dir: str, plan: DatasetPlan, workers: Optional[int] = None) -> List[ManifestRow]:
    """Write tiles, ground-truth masks, manifest.csv and sets.env under ``out_dir``."""
    tiles_dir = os.path.join(out_dir, "tiles")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(tiles_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    def render(spec: SynthSpec) -> ManifestRow:
        result = generate(spec)
        tile_path = os.path.join(tiles_dir, f"{spec.tile_id}.png")
        save_tile(result.tile, tile_path)
        save_tile(result.mask.astype(np.uint8) * 255, os.path.join(masks_dir, f"{spec.tile_id}.png"))
        return ManifestRow(tile_path, spec.tile_id, spec.patient_id, result.label)

    specs = dataset_specs(plan)
    with ThreadPoolExecutor(max_workers=workers or get_thread_count()) as pool:
        rows = list(pool.map(render, specs))

    write_manifest(os.path.join(out_dir, "manifest.csv"), rows, relative_to=out_dir)
    write_sets_config(os.path.join(out_dir, "sets.env"), plan.sets)
    logger.info("Wrote %d synthetic tiles for %d patients to %s", len(rows), len(plan.patients), out_dir)
    return rows


def mst_mean_edges(results: Sequence[SynthResult]) -> np.ndarray:
    """Mean MST edge length over each tile's planted nucleus centres."""
    return np.array([mst(r.centers).weights.mean() for r in results])
